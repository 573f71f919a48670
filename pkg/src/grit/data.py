"""Layer records, the completeness filter, synthetic data, normalization and splits."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .geo import GraphConfig, GraphSequence, build_sequence

logger = logging.getLogger(__name__)

REQUIRED_LAYERS = 20
FEATURES = ("latitude", "longitude", "thickness")
# Greenland bounding box used by the generator.
LAT_RANGE = (60.0, 82.0)
LON_RANGE = (-73.0, -12.0)


class RecordError(ValueError):
    """A record violates the schema; ``line`` and ``field`` locate the problem."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class NormalizationError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class Layer:
    year: int
    thickness: np.ndarray
    complete: bool = True


@dataclass
class RadargramRecord:
    id: str
    latitude: np.ndarray
    longitude: np.ndarray
    layers: list[Layer]

    def __post_init__(self):
        n = self.column_count
        if self.longitude.shape != (n,):
            raise RecordError(f"length {self.longitude.shape} != column_count {n}", field="longitude")
        years = [layer.year for layer in self.layers]
        if any(a <= b for a, b in zip(years, years[1:])):
            raise RecordError("years must be strictly decreasing (newest first)", field="layers")
        for k, layer in enumerate(self.layers):
            if layer.thickness.shape != (n,):
                raise RecordError(f"layer {k} has {layer.thickness.shape[0]} columns, expected {n}",
                                  field="layers")

    @property
    def column_count(self) -> int:
        return int(self.latitude.shape[0])

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "column_count": self.column_count,
            "latitude": self.latitude.tolist(),
            "longitude": self.longitude.tolist(),
            "layers": [{"year": l.year, "thickness": l.thickness.tolist(), "complete": l.complete}
                       for l in self.layers],
        }

    @classmethod
    def from_dict(cls, obj: dict, line: int | None = None) -> "RadargramRecord":
        def need(d, key, kind, where=None):
            if key not in d:
                raise RecordError("missing", line, where or key)
            value = d[key]
            if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
                raise RecordError(f"expected {kind.__name__ if isinstance(kind, type) else kind}",
                                  line, where or key)
            return value

        def floats(values, where):
            try:
                arr = np.asarray(values, dtype=np.float64)
            except (TypeError, ValueError):
                raise RecordError("expected a list of numbers", line, where) from None
            if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                raise RecordError("expected a flat list of finite numbers", line, where)
            return arr

        if not isinstance(obj, dict):
            raise RecordError("record must be a JSON object", line)
        rid = need(obj, "id", str)
        count = need(obj, "column_count", int)
        lat = floats(need(obj, "latitude", list), "latitude")
        lon = floats(need(obj, "longitude", list), "longitude")
        if len(lat) != count:
            raise RecordError(f"{len(lat)} values, column_count is {count}", line, "latitude")
        if np.any(np.abs(lat) > 90):
            raise RecordError("outside [-90, 90]", line, "latitude")
        if np.any(np.abs(lon) > 180):
            raise RecordError("outside [-180, 180]", line, "longitude")
        layers = []
        for k, raw in enumerate(need(obj, "layers", list)):
            where = f"layers[{k}]"
            if not isinstance(raw, dict):
                raise RecordError("expected an object", line, where)
            year = need(raw, "year", int, f"{where}.year")
            thick = floats(need(raw, "thickness", list, f"{where}.thickness"), f"{where}.thickness")
            if np.any(thick < 0):
                raise RecordError("negative thickness", line, f"{where}.thickness")
            complete = need(raw, "complete", bool, f"{where}.complete")
            layers.append(Layer(year, thick, complete))
        try:
            return cls(rid, lat, lon, layers)
        except RecordError as err:
            raise RecordError(str(err), line, err.field) from None


def read_records(path: str | Path) -> list[RadargramRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise RecordError(f"invalid JSON: {err.msg}", lineno) from None
            records.append(RadargramRecord.from_dict(obj, lineno))
    return records


def write_records(path: str | Path, records: Iterable[RadargramRecord]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), separators=(",", ":")))
            fh.write("\n")
            count += 1
    return count


# --------------------------------------------------------------------------
# Filtering
# --------------------------------------------------------------------------


def removal_reason(record: RadargramRecord, required: int = REQUIRED_LAYERS) -> str | None:
    """Why ``record`` fails the completeness filter, or None if it passes."""
    if len(record.layers) < required:
        return f"only {len(record.layers)} layers (need {required})"
    incomplete = [k for k, layer in enumerate(record.layers[:required]) if not layer.complete]
    if incomplete:
        return f"incomplete layer(s) {incomplete} within the top {required}"
    return None


def filter_records(records: Sequence[RadargramRecord], required: int = REQUIRED_LAYERS
                   ) -> list[RadargramRecord]:
    """Keep records whose top ``required`` layers all exist and are complete."""
    kept = [r for r in records if removal_reason(r, required) is None]
    removed = len(records) - len(kept)
    if removed:
        logger.info("filter removed %d of %d records", removed, len(records))
    if not kept:
        logger.warning("no records survived the %d-layer filter", required)
    return kept


# --------------------------------------------------------------------------
# Synthetic generator
# --------------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    """Synthetic corpus settings.

    Thickness of layer ``l`` at column ``x`` is
    ``mean * g + std * (sqrt(s) * C(x) + sqrt(1 - s) * Z_l(x)) + noise`` where
    ``C`` is a record-wide persistent field, ``Z_l`` an AR(1) sequence of
    smooth fields with lag-one correlation ``layer_correlation``, ``s`` the
    ``shared_fraction`` and ``g`` a latitude-dependent accumulation factor.
    """

    records: int = 100
    column_count: int = 256
    layer_count: int = 20
    smoothness: float = 16.0
    layer_correlation: float = 0.85
    shared_fraction: float = 0.6
    thickness_mean: float = 10.0
    thickness_std: float = 3.0
    noise_std: float = 0.0
    track_step_deg: float = 0.01
    first_year: int = 2011
    short_fraction: float = 0.0
    incomplete_fraction: float = 0.0

    def validate(self) -> None:
        if self.records < 1:
            raise ValueError("records must be >= 1")
        if self.column_count < 2:
            raise ValueError("column_count must be >= 2")
        if self.layer_count < 1:
            raise ValueError("layer_count must be >= 1")
        if self.smoothness <= 0 or self.track_step_deg <= 0:
            raise ValueError("smoothness and track_step_deg must be positive")
        if not 0 <= self.layer_correlation < 1:
            raise ValueError("layer_correlation must lie in [0, 1)")
        for name in ("shared_fraction", "short_fraction", "incomplete_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.thickness_mean <= 0 or self.thickness_std < 0 or self.noise_std < 0:
            raise ValueError("thickness_mean must be positive, stds non-negative")


def _smooth_field(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    f = gaussian_filter1d(rng.standard_normal(n), sigma, mode="reflect")
    sd = f.std()
    return (f - f.mean()) / sd if sd > 0 else f


def _flight_track(rng: np.random.Generator, cfg: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    n = cfg.column_count
    lat0 = rng.uniform(LAT_RANGE[0] + 2, LAT_RANGE[1] - 2)
    lon0 = rng.uniform(LON_RANGE[0] + 3, LON_RANGE[1] - 3)
    heading = rng.uniform(0, 2 * math.pi) + np.cumsum(
        0.05 * gaussian_filter1d(rng.standard_normal(n), cfg.smoothness, mode="reflect"))
    dlat = cfg.track_step_deg * np.cos(heading)
    dlon = cfg.track_step_deg * np.sin(heading) / math.cos(math.radians(lat0))
    lat = np.clip(lat0 + np.concatenate([[0.0], np.cumsum(dlat[1:])]), *LAT_RANGE)
    lon = np.clip(lon0 + np.concatenate([[0.0], np.cumsum(dlon[1:])]), *LON_RANGE)
    return lat, lon


def synthesize_record(rng: np.random.Generator, cfg: GeneratorConfig, rid: str) -> RadargramRecord:
    n = cfg.column_count
    lat, lon = _flight_track(rng, cfg)
    # More accumulation toward the south-east coast.
    accumulation = 1.0 + 0.25 * (72.0 - lat) / 10.0 + 0.1 * (lon + 40.0) / 30.0
    shared = _smooth_field(rng, n, cfg.smoothness)
    s = cfg.shared_fraction
    rho = cfg.layer_correlation
    z = _smooth_field(rng, n, cfg.smoothness)
    layers = []
    layer_count = cfg.layer_count
    if cfg.short_fraction and rng.random() < cfg.short_fraction:
        layer_count = int(rng.integers(1, max(layer_count, 2)))
    for k in range(cfg.layer_count):
        if k:
            z = rho * z + math.sqrt(1 - rho * rho) * _smooth_field(rng, n, cfg.smoothness)
        thick = (cfg.thickness_mean * accumulation
                 + cfg.thickness_std * (math.sqrt(s) * shared + math.sqrt(1 - s) * z)
                 + cfg.noise_std * rng.standard_normal(n))
        layers.append(Layer(cfg.first_year - k, np.maximum(thick, 0.5), True))
    layers = layers[:layer_count]
    if cfg.incomplete_fraction and rng.random() < cfg.incomplete_fraction:
        layers[int(rng.integers(0, len(layers)))].complete = False
    return RadargramRecord(rid, lat, lon, layers)


def synthesize_dataset(cfg: GeneratorConfig, seed: int) -> list[RadargramRecord]:
    """Deterministic synthetic corpus; each record draws from its own child stream."""
    cfg.validate()
    children = np.random.SeedSequence(seed).spawn(cfg.records)
    width = len(str(cfg.records - 1))
    return [synthesize_record(np.random.default_rng(ss), cfg, f"syn-{seed}-{i:0{width}d}")
            for i, ss in enumerate(children)]


# --------------------------------------------------------------------------
# Normalization
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Normalization:
    """Per-feature z-score statistics, ordered (latitude, longitude, thickness).

    ``source_ids`` lists the records the statistics were computed from.
    """

    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    source_ids: tuple[str, ...] = ()

    @classmethod
    def identity(cls) -> "Normalization":
        return cls((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))

    def normalize(self, values: np.ndarray, feature: int | str) -> np.ndarray:
        k = FEATURES.index(feature) if isinstance(feature, str) else feature
        return (np.asarray(values, dtype=np.float64) - self.mean[k]) / self.std[k]

    def denormalize(self, values: np.ndarray, feature: int | str = "thickness") -> np.ndarray:
        k = FEATURES.index(feature) if isinstance(feature, str) else feature
        return np.asarray(values, dtype=np.float64) * self.std[k] + self.mean[k]

    def node_features(self, lat, lon, thickness) -> np.ndarray:
        """Stack normalized ``[lat, lon, thickness]`` columns: ``(nodes, 3)``."""
        return np.stack([self.normalize(lat, 0), self.normalize(lon, 1),
                         self.normalize(thickness, 2)], axis=1)


def compute_normalization(records: Sequence[RadargramRecord], layers_used: int = REQUIRED_LAYERS
                          ) -> Normalization:
    """Statistics over the given (training) records only."""
    if not records:
        raise NormalizationError("cannot normalize from an empty record set")
    lat = np.concatenate([r.latitude for r in records])
    lon = np.concatenate([r.longitude for r in records])
    thick = np.concatenate([l.thickness for r in records for l in r.layers[:layers_used]])
    mean, std = [], []
    for name, values in zip(FEATURES, (lat, lon, thick)):
        sd = float(values.std())
        if not sd > 0:
            raise NormalizationError(f"feature {name!r} has zero variance in the training data")
        mean.append(float(values.mean()))
        std.append(sd)
    return Normalization(tuple(mean), tuple(std), tuple(r.id for r in records))


def normalize(values: np.ndarray, normalization: Normalization, feature: int | str = "thickness"):
    return normalization.normalize(values, feature)


def denormalize(predictions: np.ndarray, normalization: Normalization):
    return normalization.denormalize(predictions, "thickness")


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------


def split_sizes(total: int) -> tuple[int, int, int]:
    """3:1:1 sizes with the remainder going to train."""
    if total < 5:
        raise SplitError(f"need at least 5 records for a 3:1:1 split, got {total}")
    val = test = total // 5
    return total - val - test, val, test


@dataclass(eq=False)
class DatasetSplit:
    train: list[GraphSequence]
    validation: list[GraphSequence]
    test: list[GraphSequence]
    permutation_seed: int
    normalization: Normalization
    version: int = 0
    record_ids: dict[str, list[str]] = field(default_factory=dict)


def permutation_seed(seed: int, version: int) -> int:
    return int(np.random.SeedSequence([seed, version]).generate_state(1, dtype=np.uint64)[0])


def split_indices(total: int, seed: int, version: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(train, validation, test) record indices for one dataset version."""
    n_train, n_val, _ = split_sizes(total)
    order = np.random.default_rng(permutation_seed(seed, version)).permutation(total)
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def record_to_sequence(record: RadargramRecord, m: int, n: int,
                       graph_config: GraphConfig = GraphConfig()) -> GraphSequence:
    layers = [(l.year, l.thickness) for l in record.layers]
    return build_sequence(layers, record.latitude, record.longitude, m, n, graph_config, record.id)


def make_splits(records: Sequence[RadargramRecord], seed: int, versions: int = 5, m: int = 5,
                n: int = 15, graph_config: GraphConfig = GraphConfig()) -> list[DatasetSplit]:
    """Independent seeded permutations of the full record list, each sliced 3:1:1.

    Normalization for every version is computed from its training slice only.
    """
    if versions < 1:
        raise SplitError("versions must be >= 1")
    split_sizes(len(records))
    sequences = [record_to_sequence(r, m, n, graph_config) for r in records]
    out = []
    for version in range(versions):
        pseed = permutation_seed(seed, version)
        parts = split_indices(len(records), seed, version)
        train_records = [records[i] for i in parts[0]]
        out.append(DatasetSplit(
            train=[sequences[i] for i in parts[0]],
            validation=[sequences[i] for i in parts[1]],
            test=[sequences[i] for i in parts[2]],
            permutation_seed=pseed,
            normalization=compute_normalization(train_records, m + n),
            version=version,
            record_ids={name: [records[i].id for i in idx]
                        for name, idx in zip(("train", "validation", "test"), parts)},
        ))
    return out

