"""Weighted spatial graphs over geolocated flight-track columns."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

WEIGHT_VARIANTS = ("as_written", "standard")
DEFAULT_EPSILON = 1e-9


class HaversineDomainError(ValueError):
    """The haversine term handed to arcsin lies outside [0, 1]."""


class GraphBuildError(ValueError):
    pass


class InsufficientLayersError(ValueError):
    pass


def _hav(theta):
    return np.sin(theta / 2.0) ** 2


def haversine_term(phi_i, lambda_i, phi_j, lambda_j):
    """hav(dphi) + cos(phi_i) cos(phi_j) hav(dlambda), inputs in degrees.

    Differences enter through their absolute value so the result is
    bit-exactly symmetric in (i, j).
    """
    pi_, pj = np.radians(phi_i), np.radians(phi_j)
    dphi = np.abs(pj - pi_)
    dlam = np.abs(np.radians(lambda_j) - np.radians(lambda_i))
    return _hav(dphi) + (np.cos(pi_) * np.cos(pj)) * _hav(dlam)


def central_angle(phi_i, lambda_i, phi_j, lambda_j):
    """Classical haversine central angle in radians."""
    a = np.clip(haversine_term(phi_i, lambda_i, phi_j, lambda_j), 0.0, 1.0)
    return 2.0 * np.arcsin(np.sqrt(a))


def haversine_weights(phi_i, lambda_i, phi_j, lambda_j, variant: str = "as_written",
                      epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Vectorized inverse-distance edge weights.

    ``as_written`` evaluates ``1 / (2 arcsin(hav(dphi) + cos phi_i cos phi_j hav(dlambda)))``
    with no square root; ``standard`` uses the classical ``2 arcsin(sqrt(.))``.
    The denominator is clamped below by ``epsilon``.
    """
    if variant not in WEIGHT_VARIANTS:
        raise ValueError(f"unknown weight variant {variant!r}; expected one of {WEIGHT_VARIANTS}")
    a = np.asarray(haversine_term(phi_i, lambda_i, phi_j, lambda_j), dtype=np.float64)
    if np.any(a > 1.0):
        raise HaversineDomainError(f"arcsin argument exceeds 1: {float(np.max(a))!r}")
    arg = a if variant == "as_written" else np.sqrt(a)
    denom = 2.0 * np.arcsin(arg)
    if epsilon > 0:
        denom = np.maximum(denom, epsilon)
    elif np.any(denom == 0.0):
        raise ZeroDivisionError("coincident points with epsilon=0 give an infinite weight")
    return 1.0 / denom


def haversine_weight(phi_i: float, lambda_i: float, phi_j: float, lambda_j: float,
                     variant: str = "as_written", epsilon: float = DEFAULT_EPSILON) -> float:
    for name, v, lim in (("phi_i", phi_i, 90), ("phi_j", phi_j, 90),
                         ("lambda_i", lambda_i, 180), ("lambda_j", lambda_j, 180)):
        if not -lim <= v <= lim:
            raise ValueError(f"{name}={v} outside [-{lim}, {lim}] degrees")
    return float(haversine_weights(phi_i, lambda_i, phi_j, lambda_j, variant, epsilon))


def parse_topology(topology: str) -> tuple[str, int]:
    """``"chain"`` -> ("chain", 0); ``"knn:K"`` -> ("knn", K)."""
    if topology == "chain":
        return "chain", 0
    if topology.startswith("knn:"):
        try:
            k = int(topology[4:])
        except ValueError:
            k = 0
        if k >= 1:
            return "knn", k
    raise ValueError(f"topology must be 'chain' or 'knn:K' with K >= 1, got {topology!r}")


@dataclass(frozen=True)
class GraphConfig:
    topology: str = "chain"
    weight_variant: str = "as_written"
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        parse_topology(self.topology)
        if self.weight_variant not in WEIGHT_VARIANTS:
            raise ValueError(f"weight_variant must be one of {WEIGHT_VARIANTS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")


@dataclass(eq=False)
class SpatialGraph:
    """One ice layer: per-node coordinates and thickness plus weighted undirected edges."""

    latitude: np.ndarray
    longitude: np.ndarray
    thickness: np.ndarray
    edges: np.ndarray  # (E, 2) int, i < j
    edge_weight: np.ndarray  # (E,)
    _mean_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = self.latitude.shape[0]
        if self.longitude.shape != (n,) or self.thickness.shape != (n,):
            raise GraphBuildError("latitude, longitude and thickness must be equal-length 1-D arrays")
        if np.any(np.abs(self.latitude) > 90) or np.any(np.abs(self.longitude) > 180):
            raise GraphBuildError("coordinates out of range")
        if np.any(self.thickness < 0):
            raise GraphBuildError("thickness must be non-negative")
        if len(self.edges):
            if np.any(self.edges[:, 0] >= self.edges[:, 1]):
                raise GraphBuildError("edges must be stored as (i, j) with i < j (no self-loops)")
            if len(np.unique(self.edges, axis=0)) != len(self.edges):
                raise GraphBuildError("duplicate edges")
        if not np.all(np.isfinite(self.edge_weight)) or np.any(self.edge_weight <= 0):
            raise GraphBuildError("edge weights must be finite and positive")

    @property
    def node_count(self) -> int:
        return int(self.latitude.shape[0])

    def neighbors(self, i: int) -> list[int]:
        e = self.edges
        return sorted(e[e[:, 0] == i, 1].tolist() + e[e[:, 1] == i, 0].tolist())

    def aggregation_matrix(self, weighted: bool = False) -> np.ndarray:
        """Dense row-normalized adjacency so that ``A @ x`` is the neighbor mean.

        Isolated nodes get an all-zero row (zero neighbor mean).
        """
        key = bool(weighted)
        if key not in self._mean_cache:
            n = self.node_count
            adj = np.zeros((n, n))
            w = self.edge_weight if weighted else np.ones(len(self.edges))
            if len(self.edges):
                i, j = self.edges[:, 0], self.edges[:, 1]
                adj[i, j] = w
                adj[j, i] = w
            rows = adj.sum(axis=1, keepdims=True)
            self._mean_cache[key] = np.divide(adj, rows, out=np.zeros_like(adj), where=rows > 0)
        return self._mean_cache[key]


@dataclass(eq=False)
class GraphSequence:
    """m input graphs sharing node identity plus the (n, node_count) target thickness."""

    inputs: list[SpatialGraph]
    targets: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        if not self.inputs:
            raise GraphBuildError("a sequence needs at least one input graph")
        g0 = self.inputs[0]
        for g in self.inputs[1:]:
            if (g.node_count != g0.node_count or not np.array_equal(g.latitude, g0.latitude)
                    or not np.array_equal(g.longitude, g0.longitude)):
                raise GraphBuildError("input graphs must share node_count and coordinates")
        if self.targets.ndim != 2 or self.targets.shape[1] != g0.node_count:
            raise GraphBuildError(f"targets must be (n, {g0.node_count}), got {self.targets.shape}")
        if np.any(self.targets < 0):
            raise GraphBuildError("target thickness must be non-negative")

    @property
    def m(self) -> int:
        return len(self.inputs)

    @property
    def n(self) -> int:
        return int(self.targets.shape[0])

    @property
    def node_count(self) -> int:
        return self.inputs[0].node_count


def build_edges(lat: np.ndarray, lon: np.ndarray, topology: str = "chain") -> np.ndarray:
    kind, k = parse_topology(topology)
    n = len(lat)
    if kind == "chain":
        idx = np.arange(n - 1)
        return np.stack([idx, idx + 1], axis=1)
    dist = central_angle(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    np.fill_diagonal(dist, np.inf)
    k = min(k, n - 1)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    pairs = {(min(i, j), max(i, j)) for i in range(n) for j in nearest[i].tolist()}
    return np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)


def edge_weights(lat, lon, edges, variant="as_written", epsilon=DEFAULT_EPSILON) -> np.ndarray:
    if len(edges) == 0:
        return np.zeros(0)
    i, j = edges[:, 0], edges[:, 1]
    try:
        return haversine_weights(lat[i], lon[i], lat[j], lon[j], variant, epsilon)
    except (HaversineDomainError, ZeroDivisionError) as err:
        # Locate the first offending edge for the message.
        for a, b in edges.tolist():
            try:
                haversine_weights(lat[a], lon[a], lat[b], lon[b], variant, epsilon)
            except (HaversineDomainError, ZeroDivisionError):
                raise GraphBuildError(f"edge ({a}, {b}): {err}") from err
        raise


def build_spatial_graph(lat, lon, thickness, topology: str = "chain",
                        weight_variant: str = "as_written",
                        epsilon: float = DEFAULT_EPSILON) -> SpatialGraph:
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    thickness = np.asarray(thickness, dtype=np.float64)
    if not (lat.ndim == lon.ndim == thickness.ndim == 1) or not (len(lat) == len(lon) == len(thickness)):
        raise GraphBuildError("lat, lon and thickness must be equal-length 1-D arrays")
    if len(lat) < 2:
        raise GraphBuildError("a spatial graph needs at least 2 nodes")
    edges = build_edges(lat, lon, topology)
    weights = edge_weights(lat, lon, edges, weight_variant, epsilon)
    return SpatialGraph(lat, lon, thickness, edges, weights)


def build_sequence(layers: Sequence[tuple[int, np.ndarray]], lat, lon, m: int, n: int,
                   config: GraphConfig = GraphConfig(), source_id: str = "") -> GraphSequence:
    """Top ``m`` layers (newest first) become input graphs; the next ``n`` become targets.

    Layers beyond ``m + n`` are ignored.  ``n = 0`` builds an inference-only
    sequence with an empty target matrix.
    """
    if len(layers) < m + n:
        raise InsufficientLayersError(
            f"{source_id or 'record'}: {len(layers)} layers, need at least m+n={m + n}")
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    # Coordinates are layer-independent, so every input graph shares one edge set.
    template = build_spatial_graph(lat, lon, np.asarray(layers[0][1], dtype=np.float64),
                                   config.topology, config.weight_variant, config.epsilon)
    graphs = [template]
    for _, thick in layers[1:m]:
        graphs.append(SpatialGraph(lat, lon, np.asarray(thick, dtype=np.float64),
                                   template.edges, template.edge_weight))
    if n:
        targets = np.stack([np.asarray(t, dtype=np.float64) for _, t in layers[m:m + n]])
    else:
        targets = np.zeros((0, len(lat)))
    return GraphSequence(graphs, targets, source_id)

