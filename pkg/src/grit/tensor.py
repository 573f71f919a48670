"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation appends one node to the active
:class:`GradientTape`.  :func:`backward` walks the tape in strict reverse
append order, accumulates gradients into the ``requires_grad`` leaves that
are reachable from the loss, and then clears the tape.  Each thread owns its
own active tape, so independent evaluations can run side by side.
"""
from __future__ import annotations

import contextlib
import threading
from collections.abc import Callable, Sequence
from typing import Any, NamedTuple

import numpy as np

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape (stale tensors, non-scalar loss)."""


class _Node(NamedTuple):
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradientTape:
    """Append-only record of differentiable operations.

    Use as a context manager to install a private tape for the current thread::

        with GradientTape():
            loss = model_loss(...)
            backward(loss)
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.generation = 0
        self._previous: GradientTape | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple["Tensor", ...], out: "Tensor", backward_fn) -> None:
        for t in inputs:
            if t.tape_id is not None and (t._tape is not self or t._gen != self.generation):
                raise TapeError(
                    f"{op}: input was produced on a cleared or foreign tape; call detach() first"
                )
        out.tape_id = len(self.nodes)
        out._tape = self
        out._gen = self.generation
        self.nodes.append(_Node(op, inputs, backward_fn))

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1

    def __enter__(self) -> "GradientTape":
        self._previous = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc: Any) -> None:
        _state.tape = self._previous
        self._previous = None


_state = threading.local()


def active_tape() -> GradientTape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = GradientTape()
        _state.tape = tape
    return tape


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A dense n-dimensional float64 array that can take part in a gradient tape.

    Args:
        data: anything ``numpy.asarray`` accepts.
        requires_grad: whether ``backward`` should accumulate into ``grad``.
        name: optional label used in error messages and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape_id", "name", "_tape", "_gen")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None) -> None:
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self.name = name
        self._tape: GradientTape | None = None
        self._gen = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr if arr.dtype == DTYPE else arr.astype(DTYPE)
        t.requires_grad = False
        t.grad = None
        t.tape_id = None
        t.name = None
        t._tape = None
        t._gen = -1
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.tape_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # Arithmetic sugar; all of these route through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean_axis(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor._wrap(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        active_tape().record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# Elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | int | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` at train time only.

    ``rng`` may be a Generator (consumed) or an integer seed; the same seed
    always produces the same mask.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng or integer seed")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batching over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    # A batched input times a 2-D weight is one GEMM over the flattened rows.
    flat = bd.ndim == 2 and ad.ndim > 2

    def backward(g):
        if b.requires_grad:
            if flat:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        else:
            gb = None
        if not a.requires_grad:
            ga = None
        elif flat:
            ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
        else:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        return ga, gb

    if flat:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out = ad @ bd
    return _result("matmul", out, (a, b), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    if x.shape[-1] < 1:
        raise ShapeError(f"softmax_rows: need at least one column, got shape {x.shape}")
    if np.isnan(x.data).any():
        raise FloatingPointError("softmax_rows: NaN in input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _result("softmax", s, (x,),
                   lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last axis of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    gd = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result("layer_norm", xhat * gd + bias.data, (x, gain, bias), backward)


# --------------------------------------------------------------------------
# Reductions and shape manipulation
# --------------------------------------------------------------------------


def _check_axis(op: str, x: Tensor, axis) -> None:
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if ax is not None and not -x.ndim <= ax < x.ndim:
            raise IndexError(f"{op}: axis {ax} invalid for shape {x.shape}")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_axis("sum", x, axis)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean_axis(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_axis("mean", x, axis)
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _result("mean", np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward)


def concat_axis(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("concat_axis: need at least one tensor")
    _check_axis("concat", tensors[0], axis)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat_axis: {[t.shape for t in tensors]} along {axis}: {err}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result("concat", data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def split_axis(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Inverse of :func:`concat_axis`; returns views as separate tensors."""
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split_axis: sizes {list(sizes)} do not cover axis {axis} of {x.shape}")
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + s)
        out.append(getitem(x, tuple(idx)))
        start += s
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"stack: {[t.shape for t in tensors]}: {err}") from None
    n = len(tensors)
    return _result("stack", data, tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) % max(x.ndim, 1) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise IndexError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _result("reshape", data, (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _result("getitem", np.array(x.data[index]), (x,), backward)


def pad_axis(x: Tensor, before: int, after: int, axis: int = -1) -> Tensor:
    """Zero-pad one axis."""
    _check_axis("pad", x, axis)
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(before, before + x.shape[axis])
    idx = tuple(idx)
    return _result("pad", np.pad(x.data, widths), (x,), lambda g: (g[idx],))


# --------------------------------------------------------------------------
# Backward pass
# --------------------------------------------------------------------------


def backward(loss: Tensor, *, clear: bool = True) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf.

    The tape that produced ``loss`` is cleared afterwards (define-by-run
    policy); pass ``clear=False`` to keep it for inspection.
    """
    if loss.size != 1:
        raise TapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("backward: loss does not depend on any requires_grad tensor")
    seed = np.ones(loss.shape, dtype=DTYPE)
    if loss.tape_id is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = loss._tape
    if loss._gen != tape.generation:
        raise TapeError("backward: loss belongs to a cleared tape")

    pending: dict[int, np.ndarray] = {loss.tape_id: seed}
    nodes = tape.nodes
    for idx in range(loss.tape_id, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = nodes[idx]
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp.tape_id is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            elif inp.tape_id in pending:
                pending[inp.tape_id] = pending[inp.tape_id] + ig
            else:
                pending[inp.tape_id] = ig
    if clear:
        tape.clear()
