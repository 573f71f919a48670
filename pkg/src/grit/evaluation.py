"""RMSE in pixel units and its mean / sample-std aggregation across dataset versions."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .geo import GraphSequence
from .model import GritModel, predict


def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"rmse: shape mismatch {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("rmse: empty input")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


@dataclass
class VersionScore:
    rmse: float
    per_layer_rmse: list[float]


def score_sequences(model: GritModel, sequences: Sequence[GraphSequence]) -> VersionScore:
    """Pool squared errors over every node, layer and sequence, in pixel units."""
    if not sequences:
        raise ValueError("score_sequences: no sequences")
    preds = np.concatenate([predict(model, s) for s in sequences])  # [sum nodes, n]
    targets = np.concatenate([s.targets.T for s in sequences])
    per_layer = np.sqrt(np.mean((preds - targets) ** 2, axis=0))
    return VersionScore(rmse(preds, targets), per_layer.tolist())


def mean_baseline_rmse(train: Sequence[GraphSequence], test: Sequence[GraphSequence]) -> float:
    """RMSE of predicting each deep layer's training-set mean thickness everywhere."""
    layer_mean = np.concatenate([s.targets for s in train], axis=1).mean(axis=1)
    targets = np.concatenate([s.targets for s in test], axis=1)
    return rmse(np.broadcast_to(layer_mean[:, None], targets.shape), targets)


@dataclass
class EvalReport:
    per_version_rmse: list[float]
    mean_rmse: float
    std_rmse: float
    per_layer_rmse: list[float] = field(default_factory=list)
    version_count: int = 0
    warning: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        lines = ["version  rmse"]
        lines += [f"{i:>7d}  {r:.4f}" for i, r in enumerate(self.per_version_rmse)]
        lines.append(f"   mean  {self.mean_rmse:.4f} +- {self.std_rmse:.4f}")
        if self.warning:
            lines.append(f"warning: {self.warning}")
        return "\n".join(lines) + "\n"

    def per_layer_csv(self) -> str:
        rows = ["layer,rmse"] + [f"{k},{v!r}" for k, v in enumerate(self.per_layer_rmse)]
        return "\n".join(rows) + "\n"


def aggregate(per_version: Sequence[float],
              per_layer: Sequence[Sequence[float]] | None = None) -> EvalReport:
    """Arithmetic mean and sample (N-1) standard deviation across versions."""
    values = [float(v) for v in per_version]
    if not values:
        raise ValueError("aggregate: need at least one version")
    if any(v < 0 or not math.isfinite(v) for v in values):
        raise ValueError("aggregate: RMSE values must be finite and non-negative")
    count = len(values)
    mean = math.fsum(values) / count
    warning = None
    if count == 1:
        std = 0.0
        warning = "single version: standard deviation reported as 0"
    else:
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (count - 1))
    layers = np.mean(np.asarray(per_layer, dtype=np.float64), axis=0).tolist() if per_layer else []
    return EvalReport(values, mean, std, layers, count, warning)
