"""The assembled network: per-layer GraphSAGE encoders, temporal attention, conv decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import Normalization
from .geo import DEFAULT_EPSILON, WEIGHT_VARIANTS, GraphConfig, GraphSequence, parse_topology
from .layers import (
    AttentionParams,
    Conv1dParams,
    GraphSageParams,
    attention_encoder_block,
    conv1d_forward,
    graphsage_forward,
)
from .tensor import Tensor


class ModelContractError(ValueError):
    """A sequence does not fit the model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    m: int = 5
    n: int = 15
    node_count: int = 256
    in_features: int = 3
    sage_out_dim: int = 64
    heads: int = 8
    d_ff: int | None = None  # None -> 4 * d_model
    decoder_channels: int = 32
    decoder_width: int = 3
    dropout_p: float = 0.1
    weight_variant: str = "as_written"
    topology: str = "chain"
    aggregation: str = "mean"  # or "weighted_mean"
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError(f"m and n must be >= 1 (got m={self.m}, n={self.n})")
        if self.node_count < 1 or self.in_features < 1 or self.sage_out_dim < 1:
            raise ValueError("node_count, in_features and sage_out_dim must be positive")
        if self.heads < 1 or self.sage_out_dim % self.heads:
            raise ValueError(f"d_model={self.sage_out_dim} must be divisible by heads={self.heads}")
        if self.decoder_width % 2 == 0 or self.decoder_channels < 1:
            raise ValueError("decoder_width must be odd and decoder_channels positive")
        if self.node_count < self.decoder_width:
            raise ValueError("node_count must be at least decoder_width")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.weight_variant not in WEIGHT_VARIANTS:
            raise ValueError(f"weight_variant must be one of {WEIGHT_VARIANTS}")
        if self.aggregation not in ("mean", "weighted_mean"):
            raise ValueError("aggregation must be 'mean' or 'weighted_mean'")
        parse_topology(self.topology)
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    @property
    def d_model(self) -> int:
        return self.sage_out_dim

    @property
    def ff_width(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    def graph_config(self) -> GraphConfig:
        return GraphConfig(self.topology, self.weight_variant, self.epsilon)


@dataclass(eq=False)
class GritModel:
    config: ModelConfig
    sage: list[GraphSageParams]
    encoder: AttentionParams
    decoder: list[Conv1dParams]
    normalization: Normalization = field(default_factory=Normalization.identity)

    def __post_init__(self):
        if len(self.sage) != self.config.m:
            raise ModelContractError(f"expected {self.config.m} GraphSAGE encoders, got {len(self.sage)}")
        if len(self.decoder) != 2:
            raise ModelContractError("the decoder has exactly two convolutions")

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0,
             normalization: Normalization | None = None) -> "GritModel":
        """Uniform(+-1/sqrt(fan_in)) weights and zero biases from ``seed``."""
        rng = np.random.default_rng(seed)
        c = config
        sage = [GraphSageParams.init(c.in_features, c.d_model, rng, f"sage.{t}") for t in range(c.m)]
        encoder = AttentionParams.init(c.d_model, c.heads, c.ff_width, c.dropout_p, rng, "encoder")
        decoder = [
            Conv1dParams.init(c.d_model, c.decoder_channels, c.decoder_width, rng, "decoder.0"),
            Conv1dParams.init(c.decoder_channels, c.n, c.decoder_width, rng, "decoder.1"),
        ]
        return cls(c, sage, encoder, decoder, normalization or Normalization.identity())

    def parameters(self) -> dict[str, Tensor]:
        """Learnable tensors keyed by stable dotted names, in a fixed order."""
        out: dict[str, Tensor] = {}
        for t, s in enumerate(self.sage):
            out.update({f"sage.{t}.{k}": v for k, v in s.parameters().items()})
        out.update({f"encoder.{k}": v for k, v in self.encoder.parameters().items()})
        for i, conv in enumerate(self.decoder):
            out.update({f"decoder.{i}.{k}": v for k, v in conv.parameters().items()})
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def copy_parameters(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters().items():
            if values[name].shape != p.shape:
                raise ModelContractError(f"{name}: shape {values[name].shape} != {p.shape}")
            p.data[...] = values[name]


def count_parameters(model: GritModel) -> int:
    return int(sum(p.size for p in model.parameters().values()))


def node_features(model: GritModel, seq: GraphSequence) -> list[np.ndarray]:
    """Normalized ``[lat, lon, thickness]`` matrices, one per input graph."""
    norm = model.normalization
    return [norm.node_features(g.latitude, g.longitude, g.thickness) for g in seq.inputs]


def check_sequence(model: GritModel, seq: GraphSequence) -> None:
    c = model.config
    if seq.m != c.m or seq.node_count != c.node_count:
        raise ModelContractError(
            f"sequence has m={seq.m}, node_count={seq.node_count}; "
            f"model expects m={c.m}, node_count={c.node_count}")


def sage_embeddings(model: GritModel, seq: GraphSequence) -> list[Tensor]:
    """Step 1: graph ``t`` through its own encoder ``sage[t]`` -> ``[nodes, d_model]`` each."""
    weighted = model.config.aggregation == "weighted_mean"
    feats = node_features(model, seq)
    return [graphsage_forward(model.sage[t], g, Tensor._wrap(x), weighted)
            for t, (g, x) in enumerate(zip(seq.inputs, feats))]


def temporal_to_decoder(encoded: Tensor) -> Tensor:
    """Bridge ``[nodes, m, d_model]`` to ``[d_model, nodes]`` by averaging over time."""
    return encoded.mean(axis=1).T


def forward(model: GritModel, seq: GraphSequence, training: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Predicted (normalized) thickness, shape ``[node_count, n]``.

    ``rng`` drives dropout and is only needed when ``training`` is set.
    """
    check_sequence(model, seq)
    stacked = T.stack(sage_embeddings(model, seq), axis=0)  # [m, nodes, d]
    per_node = stacked.transpose(1, 0, 2)  # [nodes, m, d]: attention runs over m
    encoded = attention_encoder_block(model.encoder, per_node, training, rng)
    h = conv1d_forward(model.decoder[0], temporal_to_decoder(encoded))
    out = conv1d_forward(model.decoder[1], T.relu(h))  # [n, nodes]
    return out.T


def predict(model: GritModel, seq: GraphSequence) -> np.ndarray:
    """Denormalized thickness predictions ``[node_count, n]`` in pixels."""
    with T.no_grad():
        out = forward(model, seq, training=False)
    return model.normalization.denormalize(out.data)
