"""MSE loss, Adam with L2 weight decay, learning-rate schedulers and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import DatasetSplit
from .geo import GraphSequence
from .model import GritModel, forward
from .tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)

IMPROVEMENT_THRESHOLD = 1e-8


class NumericalError(FloatingPointError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, epoch: int, lr: float, loss: float):
        self.epoch, self.lr, self.loss = epoch, lr, loss
        super().__init__(f"training diverged at epoch {epoch} (lr={lr!r}, loss={loss!r})")


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.001
    weight_decay: float = 0.0001
    epochs: int = 450
    plateau_patience: int = 16
    plateau_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    scheduler: str = "plateau"  # or "step"
    step_size: int = 75
    step_factor: float = 0.5
    select: str = "best"  # or "final"

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if not 0 < self.plateau_factor < 1 or not 0 < self.step_factor < 1:
            raise ValueError("scheduler factors must lie in (0, 1)")
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ValueError("invalid Adam hyper-parameters")
        if self.scheduler not in ("plateau", "step"):
            raise ValueError("scheduler must be 'plateau' or 'step'")
        if self.select not in ("best", "final"):
            raise ValueError("select must be 'best' or 'final'")


@dataclass
class TrainState:
    lr: float
    epoch: int = 0
    step: int = 0
    moment1: dict[str, np.ndarray] = field(default_factory=dict)
    moment2: dict[str, np.ndarray] = field(default_factory=dict)
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    rng_seed: int = 0

    @classmethod
    def fresh(cls, config: TrainConfig, seed: int = 0) -> "TrainState":
        return cls(lr=config.initial_lr, rng_seed=seed)

    def scalars(self) -> dict:
        return {"lr": self.lr, "epoch": self.epoch, "step": self.step,
                "best_val_loss": self.best_val_loss, "best_epoch": self.best_epoch,
                "epochs_since_improvement": self.epochs_since_improvement,
                "rng_seed": self.rng_seed}


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def adam_step(params: dict[str, Tensor], state: TrainState, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is L2: ``decay * theta`` is added to the gradient before the
    moment updates.
    """
    for name, p in params.items():
        if p.grad is None:
            raise NumericalError(f"adam_step: no gradient for {name}")
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"adam_step: non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad + config.weight_decay * p.data if config.weight_decay else p.grad
        m = state.moment1.get(name)
        v = state.moment2.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.moment1[name], state.moment2[name] = m, v
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


def plateau_scheduler(state: TrainState, val_loss: float, config: TrainConfig) -> TrainState:
    """Halve the rate once more than ``patience`` epochs pass without improvement."""
    if not math.isfinite(val_loss):
        raise NumericalError(f"plateau_scheduler: non-finite validation loss {val_loss!r}")
    if val_loss < state.best_val_loss - IMPROVEMENT_THRESHOLD:
        state.best_val_loss = val_loss
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement > config.plateau_patience:
            state.lr *= config.plateau_factor
            state.epochs_since_improvement = 0
    return state


def step_scheduler(state: TrainState, epoch: int, config: TrainConfig) -> TrainState:
    """Multiply the rate by ``step_factor`` after every ``step_size`` completed epochs."""
    if epoch % config.step_size == 0:
        state.lr *= config.step_factor
    return state


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    model: GritModel
    history: list[EpochRecord]
    state: TrainState


def normalized_targets(model: GritModel, seq: GraphSequence) -> Tensor:
    return Tensor._wrap(model.normalization.normalize(seq.targets.T, "thickness"))


def evaluate_loss(model: GritModel, sequences: Sequence[GraphSequence]) -> float:
    """Mean normalized MSE with dropout off; summed in list order."""
    total = 0.0
    with T.no_grad():
        for seq in sequences:
            total += mse_loss(forward(model, seq, training=False), normalized_targets(model, seq)).item()
    return total / len(sequences)


def train_step(model: GritModel, seq: GraphSequence, state: TrainState, config: TrainConfig,
               rng: np.random.Generator) -> float:
    params = model.parameters()
    model.zero_grad()
    with T.GradientTape():
        loss = mse_loss(forward(model, seq, training=True, rng=rng), normalized_targets(model, seq))
        T.backward(loss)
    adam_step(params, state, config)
    return loss.item()


def train(model: GritModel, split: DatasetSplit, config: TrainConfig, seed: int = 0,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train one model on one dataset version.

    The split's normalization is installed on the model.  Each epoch
    shuffles the training sequences, takes one Adam step per sequence, then
    evaluates the validation set to drive the scheduler.  With
    ``config.select == "best"`` the best-validation parameters are restored
    at the end.
    """
    if not split.train or not split.validation:
        raise ValueError("train: need non-empty train and validation sets")
    model.normalization = split.normalization
    state = TrainState.fresh(config, seed)
    rng = np.random.default_rng(seed)
    history: list[EpochRecord] = []
    best_params = model.copy_parameters()

    for epoch in range(1, config.epochs + 1):
        lr = state.lr
        order = rng.permutation(len(split.train))
        total = 0.0
        for i in order:
            loss = train_step(model, split.train[i], state, config, rng)
            if not math.isfinite(loss):
                raise DivergenceError(epoch, lr, loss)
            total += loss
        train_loss = total / len(order)
        val_loss = evaluate_loss(model, split.validation)
        if not math.isfinite(val_loss):
            raise DivergenceError(epoch, lr, val_loss)

        if val_loss < state.best_val_loss - IMPROVEMENT_THRESHOLD:
            state.best_epoch = epoch
            best_params = model.copy_parameters()
        if config.scheduler == "plateau":
            plateau_scheduler(state, val_loss, config)
        else:
            state.best_val_loss = min(state.best_val_loss, val_loss)
            step_scheduler(state, epoch, config)
        state.epoch = epoch

        record = EpochRecord(epoch, train_loss, val_loss, lr)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        logger.debug("epoch %d train %.6g val %.6g lr %g", epoch, train_loss, val_loss, lr)

    if config.select == "best":
        model.load_parameters(best_params)
    return TrainResult(model, history, state)


def history_csv(history: Sequence[EpochRecord]) -> str:
    lines = ["epoch,train_loss,val_loss,lr"]
    lines += [f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.lr!r}" for r in history]
    return "\n".join(lines) + "\n"


def write_history_csv(path: str | Path, history: Sequence[EpochRecord]) -> None:
    Path(path).write_text(history_csv(history), encoding="utf-8")
