"""Seeded mini-batch training loop minimizing MSE on standardized labels.

Batches are homogeneous in sequence length (the dataset is layered, so no
padding or masking is ever needed). Everything downstream of the config
seed is deterministic: parameter init, per-epoch shuffles, and the
optimizer, so identical runs produce identical checkpoints.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tlstm
from .autodiff import NumericError
from .preprocess import (
    MAX_TRAIN_LENGTH,
    SplitDataset,
    Standardizer,
    fit_standardizer,
    training_matrix,
)
from .tlstm import DECAY_KINDS, DEFAULT_DECAY, DEFAULT_HIDDEN, TlstmParams

OPTIMIZERS = ("adam", "sgd")


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 128
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    decay_kind: str = DEFAULT_DECAY
    hidden_dim: int = DEFAULT_HIDDEN
    clip_norm: float | None = None  # global-norm clipping, off by default
    checkpoint_every: int = 0  # 0 = no cadence checkpoints

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.decay_kind not in DECAY_KINDS:
            raise ValueError(f"decay_kind must be one of {DECAY_KINDS}")
        if self.hidden_dim < 1:
            raise ValueError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainConfig":
        """Build from a flat key = value mapping (unknown keys rejected)."""
        config = cls()
        casts = {
            "epochs": int,
            "batch_size": int,
            "optimizer": str,
            "learning_rate": float,
            "beta1": float,
            "beta2": float,
            "epsilon": float,
            "seed": int,
            "decay_kind": str,
            "hidden_dim": int,
            "clip_norm": float,
            "checkpoint_every": int,
        }
        for key, raw in kv.items():
            if key not in casts:
                raise ValueError(f"unknown config key {key!r}")
            setattr(config, key, casts[key](raw))
        return config


@dataclass
class LossTrace:
    """Per-epoch training MSE (standardized scale) and wall-clock seconds."""

    mse: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.mse)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("epoch,mse,seconds\n")
            for epoch, (value, secs) in enumerate(zip(self.mse, self.seconds), 1):
                handle.write(f"{epoch},{value!r},{secs:.3f}\n")


@dataclass
class TrainResult:
    params: TlstmParams
    standardizer: Standardizer
    trace: LossTrace


def mse(y: Sequence[float], y_hat: Sequence[float]) -> float:
    """Mean squared error (1/m) sum (y_i - y_hat_i)^2."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("mse of empty sequences")
    diff = y - y_hat
    return float(np.mean(diff * diff))


class Adam:
    """Bias-corrected adaptive moments; state keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, theta in arrays.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(theta)
                self.v[name] = np.zeros_like(theta)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, theta in arrays.items():
            theta -= self.lr * grads[name]


def adam_step(
    arrays: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    optimizer: Adam,
) -> None:
    """One in-place Adam update; thin wrapper kept for symmetry with tests."""
    optimizer.step(arrays, grads)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> dict[str, np.ndarray]:
    norm = global_grad_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        return {name: g * scale for name, g in grads.items()}
    return grads


@dataclass
class _LayerTensors:
    x: np.ndarray  # (n, length, features), standardized
    deltas: np.ndarray  # (n, length)
    y: np.ndarray  # (n,), standardized


def _layer_tensors(dataset: SplitDataset, standardizer: Standardizer) -> dict[int, _LayerTensors]:
    tensors: dict[int, _LayerTensors] = {}
    for length, layer in sorted(dataset.layers.items()):
        if length > MAX_TRAIN_LENGTH or not layer.train:
            continue
        x = np.stack([standardizer.transform(s.inputs) for s in layer.train])
        deltas = np.array([s.intervals for s in layer.train], dtype=np.float64)
        y = standardizer.se_to_standard(np.array([s.label_se for s in layer.train]))
        tensors[length] = _LayerTensors(x=x, deltas=deltas, y=y)
    return tensors


def make_batches(
    layer_sizes: dict[int, int],
    batch_size: int,
    seed: int,
    epoch: int,
) -> list[tuple[int, np.ndarray]]:
    """Per-epoch batch plan: (layer length, index array) entries.

    Each layer is shuffled independently and chunked, then the batch list
    itself is shuffled so layers interleave. Deterministic in (seed, epoch);
    every sample index appears exactly once."""
    rng = np.random.default_rng([seed, 202, epoch])
    batches: list[tuple[int, np.ndarray]] = []
    for length in sorted(layer_sizes):
        n = layer_sizes[length]
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batches.append((length, order[start : start + batch_size]))
    rng.shuffle(batches)
    return batches


def train(
    dataset: SplitDataset,
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Fit the network on the dataset's training layers.

    The standardizer is fitted here, on training inputs only, and applied
    to both features and labels; sequences longer than MAX_TRAIN_LENGTH
    never reach a batch. Aborts with TrainError on a non-finite loss
    (cadence checkpoints, if any, stay on disk)."""
    config.validate()
    standardizer = fit_standardizer(training_matrix(dataset))
    tensors = _layer_tensors(dataset, standardizer)
    if not tensors:
        raise TrainError("no trainable layers (lengths 1..4) in dataset")

    params = tlstm.init_params(
        input_dim=standardizer.mean.shape[0],
        hidden_dim=config.hidden_dim,
        seed=config.seed,
    )
    arrays = params.arrays()
    if config.optimizer == "adam":
        optimizer = Adam(config.learning_rate, config.beta1, config.beta2, config.epsilon)
    else:
        optimizer = Sgd(config.learning_rate)

    layer_sizes = {length: t.y.shape[0] for length, t in tensors.items()}
    n_total = sum(layer_sizes.values())
    trace = LossTrace()
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    for epoch in range(config.epochs):
        started = time.perf_counter()
        sse = 0.0
        for length, indices in make_batches(
            layer_sizes, config.batch_size, config.seed, epoch
        ):
            t = tensors[length]
            x = t.x[indices]
            deltas = t.deltas[indices]
            labels = t.y[indices]
            try:
                tape, loss, param_nodes = tlstm.loss_graph(
                    arrays, x, deltas, labels, config.hidden_dim, config.decay_kind
                )
            except NumericError as exc:
                raise TrainError(
                    f"non-finite value at epoch {epoch + 1} ({exc}); aborting "
                    f"(last checkpoint, if any, is in {checkpoint_dir})"
                ) from exc
            batch_mse = float(loss.value[0, 0])
            tape.backward(loss)
            grads = {name: node.grad for name, node in param_nodes.items()}
            if config.clip_norm is not None:
                grads = clip_gradients(grads, config.clip_norm)
            optimizer.step(arrays, grads)
            sse += batch_mse * labels.shape[0]
        trace.mse.append(sse / n_total)
        trace.seconds.append(time.perf_counter() - started)
        if (
            checkpoint_dir is not None
            and config.checkpoint_every > 0
            and (epoch + 1) % config.checkpoint_every == 0
        ):
            tlstm.save_checkpoint(
                checkpoint_dir / f"model_epoch{epoch + 1:05d}.txt",
                params,
                config.decay_kind,
                standardizer,
            )

    return TrainResult(params=params, standardizer=standardizer, trace=trace)
