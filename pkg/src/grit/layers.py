"""GraphSAGE convolution, temporal multi-head attention encoder, and 1-D convolution."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geo import SpatialGraph
from .tensor import ShapeError, Tensor


def _uniform(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def _ones(shape, name: str) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


# --------------------------------------------------------------------------
# GraphSAGE
# --------------------------------------------------------------------------


@dataclass
class GraphSageParams:
    W1: Tensor  # root transform, (in_dim, out_dim)
    W2: Tensor  # neighbor-mean transform, (in_dim, out_dim)

    def __post_init__(self):
        if self.W1.shape != self.W2.shape or self.W1.ndim != 2:
            raise ShapeError(f"GraphSAGE weights must share a 2-D shape: {self.W1.shape} vs {self.W2.shape}")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator, prefix: str = "sage"):
        return cls(_uniform(rng, (in_dim, out_dim), in_dim, f"{prefix}.W1"),
                   _uniform(rng, (in_dim, out_dim), in_dim, f"{prefix}.W2"))

    def parameters(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "W2": self.W2}


def graphsage_forward(params: GraphSageParams, graph: SpatialGraph, x: Tensor,
                      weighted: bool = False) -> Tensor:
    """``x'_i = W1 x_i + W2 mean_{j in N(i)} x_j`` for every node at once.

    With ``weighted=True`` the neighbor mean is weighted by the edge weights.
    """
    if x.ndim != 2 or x.shape[0] != graph.node_count:
        raise ShapeError(f"graphsage: features {x.shape} do not match {graph.node_count} nodes")
    if x.shape[1] != params.W1.shape[0]:
        raise ShapeError(f"graphsage: feature width {x.shape[1]} vs W1 {params.W1.shape}")
    agg = Tensor._wrap(graph.aggregation_matrix(weighted))
    return x @ params.W1 + (agg @ x) @ params.W2


# --------------------------------------------------------------------------
# Multi-head attention encoder block
# --------------------------------------------------------------------------


@dataclass
class AttentionParams:
    """Weights of one post-norm transformer encoder block.

    The per-head projections are stored side by side: columns
    ``[i*d_k:(i+1)*d_k]`` of ``Wq`` hold head ``i``'s query matrix.
    """

    heads: int
    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    dropout_p: float = 0.1

    def __post_init__(self):
        d = self.Wq.shape[0]
        if d % self.heads:
            raise ValueError(f"d_model={d} is not divisible by heads={self.heads}")
        for name in ("Wq", "Wk", "Wv", "Wo"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be ({d}, {d}), got {getattr(self, name).shape}")

    @property
    def d_model(self) -> int:
        return self.Wq.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    @property
    def d_ff(self) -> int:
        return self.ff_w1.shape[1]

    @classmethod
    def init(cls, d_model: int, heads: int, d_ff: int, dropout_p: float,
             rng: np.random.Generator, prefix: str = "encoder"):
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        p = prefix
        return cls(
            heads=heads,
            Wq=_uniform(rng, (d_model, d_model), d_model, f"{p}.Wq"),
            Wk=_uniform(rng, (d_model, d_model), d_model, f"{p}.Wk"),
            Wv=_uniform(rng, (d_model, d_model), d_model, f"{p}.Wv"),
            Wo=_uniform(rng, (d_model, d_model), d_model, f"{p}.Wo"),
            ff_w1=_uniform(rng, (d_model, d_ff), d_model, f"{p}.ff_w1"),
            ff_b1=_zeros((d_ff,), f"{p}.ff_b1"),
            ff_w2=_uniform(rng, (d_ff, d_model), d_ff, f"{p}.ff_w2"),
            ff_b2=_zeros((d_model,), f"{p}.ff_b2"),
            ln1_gain=_ones((d_model,), f"{p}.ln1_gain"),
            ln1_bias=_zeros((d_model,), f"{p}.ln1_bias"),
            ln2_gain=_ones((d_model,), f"{p}.ln2_gain"),
            ln2_bias=_zeros((d_model,), f"{p}.ln2_bias"),
            dropout_p=dropout_p,
        )

    def head_weights(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(W_i^Q, W_i^K, W_i^V), each ``d_model x d_k``."""
        cols = slice(i * self.d_k, (i + 1) * self.d_k)
        return self.Wq.data[:, cols], self.Wk.data[:, cols], self.Wv.data[:, cols]

    def parameters(self) -> dict[str, Tensor]:
        names = ("Wq", "Wk", "Wv", "Wo", "ff_w1", "ff_b1", "ff_w2", "ff_b2",
                 "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")
        return {n: getattr(self, n) for n in names}


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [..., seq, d] -> [..., heads, seq, d_k]
    *lead, seq, d = x.shape
    x = x.reshape(*lead, seq, heads, d // heads)
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    # [..., heads, seq, d_k] -> [..., seq, heads * d_k]
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    x = x.transpose(axes)
    *lead, seq, h, dk = x.shape
    return x.reshape(*lead, seq, h * dk)


def multi_head_attention(params: AttentionParams, X: Tensor, training: bool = False,
                         return_weights: bool = False):
    """Unmasked scaled dot-product attention over the second-to-last axis.

    ``X`` is ``[..., seq, d_model]``; leading axes are independent batches.
    With ``return_weights`` the per-head attention matrices
    ``[..., heads, seq, seq]`` are returned alongside the output.
    """
    if X.ndim < 2 or X.shape[-1] != params.d_model:
        raise ShapeError(f"attention: input {X.shape} does not end in d_model={params.d_model}")
    if X.shape[-2] < 1:
        raise ShapeError("attention: sequence length must be >= 1")
    h = params.heads
    q = _split_heads(X @ params.Wq, h)
    k = _split_heads(X @ params.Wk, h)
    v = _split_heads(X @ params.Wv, h)
    nd = k.ndim
    kt = k.transpose(list(range(nd - 2)) + [nd - 1, nd - 2])
    weights = T.softmax_rows(T.scale(q @ kt, 1.0 / math.sqrt(params.d_k)))
    out = _merge_heads(weights @ v) @ params.Wo
    return (out, weights) if return_weights else out


def feed_forward(params: AttentionParams, x: Tensor) -> Tensor:
    hidden = T.relu(x @ params.ff_w1 + params.ff_b1)
    return hidden @ params.ff_w2 + params.ff_b2


def attention_encoder_block(params: AttentionParams, X: Tensor, training: bool = False,
                            rng: np.random.Generator | None = None) -> Tensor:
    """Post-norm block: ``Y = LN(X + drop(MHA(X)))``, ``out = LN(Y + drop(FFN(Y)))``."""
    p = params.dropout_p
    attn = T.dropout(multi_head_attention(params, X, training), p, training, rng)
    y = T.layer_norm(X + attn, params.ln1_gain, params.ln1_bias)
    ff = T.dropout(feed_forward(params, y), p, training, rng)
    return T.layer_norm(y + ff, params.ln2_gain, params.ln2_bias)


# --------------------------------------------------------------------------
# 1-D convolution
# --------------------------------------------------------------------------


@dataclass
class Conv1dParams:
    kernel: Tensor  # (out_channels, in_channels, width)
    bias: Tensor  # (out_channels,)

    def __post_init__(self):
        if self.kernel.ndim != 3 or self.kernel.shape[2] % 2 == 0:
            raise ShapeError(f"conv kernel must be (out, in, odd width), got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"conv bias {self.bias.shape} vs kernel {self.kernel.shape}")

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def width(self) -> int:
        return self.kernel.shape[2]

    @property
    def padding(self) -> int:
        return self.width // 2

    @classmethod
    def init(cls, in_channels: int, out_channels: int, width: int,
             rng: np.random.Generator, prefix: str = "conv"):
        return cls(_uniform(rng, (out_channels, in_channels, width), in_channels * width,
                            f"{prefix}.kernel"),
                   _zeros((out_channels,), f"{prefix}.bias"))

    def parameters(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}


def conv1d_forward(params: Conv1dParams, x: Tensor) -> Tensor:
    """Cross-correlation with zero same-padding: ``[in, L] -> [out, L]``."""
    if x.ndim != 2 or x.shape[0] != params.in_channels:
        raise ShapeError(f"conv1d: input {x.shape} vs {params.in_channels} input channels")
    length, width = x.shape[1], params.width
    if length < width:
        raise ShapeError(f"conv1d: length {length} shorter than kernel width {width}")
    padded = T.pad_axis(x, params.padding, params.padding, axis=1)
    # cols[c * width + k, t] = padded[c, t + k]
    cols = T.stack([padded[:, k:k + length] for k in range(width)], axis=1)
    cols = cols.reshape(params.in_channels * width, length)
    w = params.kernel.reshape(params.out_channels, params.in_channels * width)
    return w @ cols + params.bias.reshape(params.out_channels, 1)
