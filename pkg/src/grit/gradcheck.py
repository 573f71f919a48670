"""Central finite-difference gradient checking."""
from __future__ import annotations

from collections.abc import Callable, Iterable
from dataclasses import dataclass, field

import numpy as np

from .tensor import GradientTape, Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    max_abs_error: float
    max_rel_error: float
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``param.data``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = fn().item()
            flat[i] = orig - h
            minus = fn().item()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * h)
    return grad


def check_gradients(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-6,
    floor: float | None = None,
) -> GradCheckResult:
    """Compare tape gradients of ``fn`` against central differences.

    Entries with ``max(|a|, |n|) > floor`` must have relative error
    ``|a - n| / max(|a|, |n|)`` below ``rtol``; smaller entries, whose
    relative error is dominated by finite-difference roundoff, must have
    ``|a - n| <= atol``.  ``floor`` defaults to ``atol``.  ``fn`` must be
    deterministic (fix dropout seeds inside it).
    """
    floor = atol if floor is None else floor
    params = list(params)
    for p in params:
        p.grad = None
    with GradientTape():
        loss = fn()
        backward(loss)
    result = GradCheckResult(0.0, 0.0)
    for k, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_gradient(fn, p, h)
        diff = np.abs(analytic - numeric)
        denom = np.maximum(np.abs(analytic), np.abs(numeric))
        rel = np.where(denom > 0, diff / np.where(denom > 0, denom, 1.0), 0.0)
        significant = denom > floor
        bad = np.where(significant, rel > rtol, diff > atol)
        result.max_abs_error = max(result.max_abs_error, float(diff.max(initial=0.0)))
        result.max_rel_error = max(result.max_rel_error, float(rel[significant].max(initial=0.0)))
        if bad.any():
            label = p.name or f"param[{k}]"
            result.failures.append(f"{label}: {int(bad.sum())} entries, max rel {float(rel[bad].max()):.3e}, max abs {float(diff[bad].max()):.3e}")
    return result
