import numpy as np
import pytest

from grit.geo import build_spatial_graph
from grit.model import ModelConfig


def random_track(rng, nodes, lat0=70.0, lon0=-45.0, step=0.01):
    lat = lat0 + np.cumsum(rng.uniform(0.2, 1.0, nodes)) * step
    lon = lon0 + np.cumsum(rng.uniform(-1.0, 1.0, nodes)) * step
    return lat, lon


def random_graph(rng, nodes, topology="chain"):
    lat, lon = random_track(rng, nodes)
    return build_spatial_graph(lat, lon, rng.uniform(1, 20, nodes), topology)


@pytest.fixture
def tiny_config():
    return ModelConfig(m=2, n=3, node_count=6, sage_out_dim=4, heads=2, d_ff=8,
                       decoder_channels=3, dropout_p=0.0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
