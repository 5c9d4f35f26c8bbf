"""Seeded minibatch SGD, full-batch gradient descent, initialization and evaluation."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import model
from .data import Dataset
from .model import ModelSpec

INITS = ("scaled-normal-fan-in", "scaled-uniform-fan-avg")


class TrainingError(FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 0.1),)
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    init: str = "scaled-normal-fan-in"
    shuffle: bool = True

    def __post_init__(self):
        sched = tuple((int(e), float(lr)) for e, lr in self.lr_schedule)
        object.__setattr__(self, "lr_schedule", sched)
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not sched or sched[0][0] != 0:
            raise ValueError("lr_schedule must start at epoch 0")
        if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise ValueError("lr_schedule must be sorted by epoch_start")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if epoch >= start:
                lr = value
        return lr

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_schedule"] = [list(x) for x in self.lr_schedule]
        return d

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class Metrics:
    mean_loss: float
    accuracy: float | None
    n_evaluated: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def objective_spec(spec: ModelSpec, config: TrainConfig) -> ModelSpec:
    """The spec whose loss training actually minimizes (weight decay folded into l2)."""
    if config.weight_decay:
        return spec.with_l2(spec.l2_reg + config.weight_decay)
    return spec


def init_params(spec: ModelSpec, config: TrainConfig) -> np.ndarray:
    rng = np.random.default_rng(config.seed)
    params = np.zeros(spec.param_count)
    for (_, sl), (fan_in, fan_out) in zip(
            [s for s in spec.slices() if s[0].startswith("W")], spec.layers()):
        size = fan_in * fan_out
        if config.init == "scaled-normal-fan-in":
            params[sl] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=size)
        else:
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            params[sl] = rng.uniform(-bound, bound, size=size)
    return params


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(spec: ModelSpec, dataset: Dataset, config: TrainConfig) -> np.ndarray:
    """Minibatch SGD with momentum from a fresh seeded initialization.

    Runs ``epochs * ceil(n / batch_size)`` steps; the last batch of an epoch
    may be short. The learning rate only changes at epoch boundaries.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    obj = objective_spec(spec, config)
    params = init_params(spec, config)
    X, y = model.check_batch(spec, dataset.features, dataset.labels)
    n, bs = len(dataset), config.batch_size
    velocity = np.zeros_like(params)
    step = 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = epoch_order(n, config.seed, epoch, config.shuffle)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            # overflow is detected just below and reported with its step
            with np.errstate(over="ignore", invalid="ignore"):
                value, g = model.batch_loss_grad(obj, params, X[idx], y[idx])
            if not (math.isfinite(value) and np.all(np.isfinite(g))):
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch})", step)
            velocity = config.momentum * velocity + g
            params = params - lr * velocity
            step += 1
    if not np.all(np.isfinite(params)):
        raise TrainingError(f"non-finite parameters after step {step}", step)
    return params


def lipschitz_bound(spec: ModelSpec, dataset: Dataset) -> float:
    """Upper bound on the curvature of the mean loss, for linear and softmax heads."""
    if spec.kind == "mlp":
        raise ValueError("no closed-form curvature bound for mlp; pass a learning rate")
    Xt = dataset.features
    if spec.fit_bias:
        Xt = np.hstack([Xt, np.ones((len(dataset), 1))])
    top = float(np.linalg.eigvalsh(Xt.T @ Xt / len(dataset))[-1])
    # softmax cross-entropy curvature in logit space is at most 1/2
    factor = 1.0 if spec.kind == "linear-mse" else 0.5
    return factor * top + spec.l2_reg


@dataclass
class FullBatchResult:
    params: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float


def train_full_batch(spec: ModelSpec, dataset: Dataset, *, lr: float | None = None,
                     tol: float = 1e-8, max_iter: int = 200_000,
                     start=None) -> FullBatchResult:
    """Deterministic full-batch gradient descent until ``||grad|| < tol``.

    Used where a well-defined optimum is needed (leave-one-out retraining).
    ``start`` warm-starts from given parameters; otherwise zeros.
    """
    X, y = model.check_batch(spec, dataset.features, dataset.labels)
    if lr is None:
        lr = 1.0 / lipschitz_bound(spec, dataset)
    params = (np.zeros(spec.param_count) if start is None
              else np.array(start, dtype=np.float64, copy=True))
    gnorm = float("inf")
    for it in range(max_iter + 1):
        value, g = model.batch_loss_grad(spec, params, X, y)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at iteration {it}", it)
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            return FullBatchResult(params, True, it, gnorm)
        if it == max_iter:
            break
        params = params - lr * g
    return FullBatchResult(params, False, max_iter, gnorm)


def evaluate(spec: ModelSpec, params, dataset: Dataset) -> Metrics:
    """Mean unregularized loss and, for classifiers, argmax accuracy."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    losses = model.per_sample_losses(spec, params, dataset.features, dataset.labels)
    acc = None
    if spec.is_classifier:
        pred = model.predict_logits(spec, params, dataset.features).argmax(axis=1)
        acc = float(np.mean(pred == dataset.labels.astype(np.int64)))
    return Metrics(float(losses.mean()), acc, len(dataset))
