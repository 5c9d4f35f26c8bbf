"""Small differentiable models over a flat parameter vector.

Supported kinds:

``linear-mse``
    ``0.5 * (w.x + b - y)**2``, one real output.
``logistic``
    Binary classification as a 2-class softmax cross-entropy.
``softmax``
    Multiclass softmax cross-entropy.
``mlp``
    One hidden layer (tanh or relu) followed by a softmax cross-entropy head.

Every per-sample loss carries ``l2_reg * ||params||**2 / 2``. Gradients and
Hessian-vector products are exact (analytic / R-operator), computed by the
active kernel backend (see :mod:`datadrop.backend`).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import backend

KINDS = ("linear-mse", "logistic", "softmax", "mlp")
ACTIVATIONS = ("tanh", "relu")

_KIND_CODE = {"linear-mse": 0, "logistic": 1, "softmax": 1, "mlp": 2}
_ACT_CODE = {"tanh": 0, "relu": 1}

ParamVector = np.ndarray


class ShapeError(ValueError):
    """Raised when arrays do not match the dimensions of a ModelSpec."""


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    output_dim: int
    hidden_dim: int = 0
    activation: str = "tanh"
    l2_reg: float = 0.0
    fit_bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if self.hidden_dim < 0:
            raise ValueError("hidden_dim must be non-negative")
        if (self.hidden_dim > 0) != (self.kind == "mlp"):
            raise ValueError("hidden_dim > 0 is required for mlp and forbidden otherwise")
        if self.kind == "linear-mse" and self.output_dim != 1:
            raise ValueError("linear-mse has exactly one output")
        if self.kind == "logistic" and self.output_dim != 2:
            raise ValueError("logistic is a 2-class softmax; output_dim must be 2")
        if self.kind in ("softmax", "mlp") and self.output_dim < 2:
            raise ValueError("classifiers need output_dim >= 2")
        if not (self.l2_reg >= 0.0 and np.isfinite(self.l2_reg)):
            raise ValueError("l2_reg must be a finite non-negative number")

    @property
    def is_classifier(self) -> bool:
        return self.kind != "linear-mse"

    @property
    def layout(self) -> tuple:
        return (_KIND_CODE[self.kind], _ACT_CODE[self.activation], self.input_dim,
                self.hidden_dim, self.output_dim, bool(self.fit_bias))

    @property
    def param_count(self) -> int:
        d, h, o, b = self.input_dim, self.hidden_dim, self.output_dim, int(self.fit_bias)
        if self.kind == "mlp":
            return h * d + b * h + o * h + b * o
        return o * d + b * o

    def layers(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of each weight matrix, in parameter order."""
        if self.kind == "mlp":
            return [(self.input_dim, self.hidden_dim), (self.hidden_dim, self.output_dim)]
        return [(self.input_dim, self.output_dim)]

    def slices(self) -> list[tuple[str, slice]]:
        """Named blocks of the flat parameter vector (weights then biases, per layer)."""
        out, off = [], 0
        for li, (fan_in, fan_out) in enumerate(self.layers(), start=1):
            out.append((f"W{li}", slice(off, off + fan_in * fan_out)))
            off += fan_in * fan_out
            if self.fit_bias:
                out.append((f"b{li}", slice(off, off + fan_out)))
                off += fan_out
        return out

    def with_l2(self, l2_reg: float) -> "ModelSpec":
        return dataclasses.replace(self, l2_reg=float(l2_reg))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown ModelSpec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: float
    id: int = 0


def check_params(spec: ModelSpec, params) -> np.ndarray:
    params = np.ascontiguousarray(params, dtype=np.float64)
    if params.shape != (spec.param_count,):
        raise ShapeError(f"params has shape {params.shape}, spec expects ({spec.param_count},)")
    return params


def check_batch(spec: ModelSpec, X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(f"features have shape {X.shape}, spec expects (n, {spec.input_dim})")
    if y.shape != (X.shape[0],):
        raise ShapeError(f"labels have shape {y.shape}, expected ({X.shape[0]},)")
    if spec.is_classifier and y.size:
        if np.any(y < 0) or np.any(y >= spec.output_dim) or np.any(y != np.floor(y)):
            raise ShapeError(f"class labels must be integers in [0, {spec.output_dim})")
    return X, y


def _sample_arrays(spec, sample: Sample):
    x = np.asarray(sample.features, dtype=np.float64).reshape(1, -1)
    return check_batch(spec, x, np.array([sample.label], dtype=np.float64))


# -- per-sample API ---------------------------------------------------------

def loss(spec: ModelSpec, params, sample: Sample) -> float:
    """Per-sample loss including the l2 term."""
    params = check_params(spec, params)
    X, y = _sample_arrays(spec, sample)
    out = np.empty(1)
    backend.kernels.sample_losses(spec.layout, params, X, y, out)
    return float(out[0] + 0.5 * spec.l2_reg * params.dot(params))


def grad(spec: ModelSpec, params, sample: Sample) -> np.ndarray:
    """Analytic gradient of :func:`loss`."""
    params = check_params(spec, params)
    X, y = _sample_arrays(spec, sample)
    g = np.empty(spec.param_count)
    backend.kernels.loss_grad(spec.layout, params, X, y, g)
    if spec.l2_reg:
        g += spec.l2_reg * params
    return g


def hvp(spec: ModelSpec, params, dataset, v, damping: float = 0.0) -> np.ndarray:
    """``(H + damping*I) v`` with H the Hessian of the mean training loss (l2 included)."""
    return hvp_arrays(spec, params, dataset.features, dataset.labels, v, damping)


# -- batch API --------------------------------------------------------------

def hvp_arrays(spec: ModelSpec, params, X, y, v, damping: float = 0.0) -> np.ndarray:
    params = check_params(spec, params)
    X, y = check_batch(spec, X, y)
    if X.shape[0] == 0:
        raise ValueError("hvp needs a non-empty dataset")
    if damping < 0:
        raise ValueError("damping must be non-negative")
    v = check_params(spec, v)
    out = np.empty(spec.param_count)
    backend.kernels.hvp_mean(spec.layout, params, X, y, v, out)
    reg = spec.l2_reg + damping
    if reg:
        out += reg * v
    return out


def batch_loss_grad(spec: ModelSpec, params, X, y) -> tuple[float, np.ndarray]:
    """Mean regularized loss over a batch, and its gradient."""
    params = check_params(spec, params)
    X, y = check_batch(spec, X, y)
    g = np.empty(spec.param_count)
    value = backend.kernels.loss_grad(spec.layout, params, X, y, g)
    if spec.l2_reg:
        value += 0.5 * spec.l2_reg * params.dot(params)
        g += spec.l2_reg * params
    return float(value), g


def per_sample_losses(spec: ModelSpec, params, X, y) -> np.ndarray:
    """Unregularized loss of each row."""
    params = check_params(spec, params)
    X, y = check_batch(spec, X, y)
    out = np.empty(X.shape[0])
    backend.kernels.sample_losses(spec.layout, params, X, y, out)
    return out


def per_sample_grads(spec: ModelSpec, params, X, y) -> np.ndarray:
    """Unregularized gradient of each row, shape (n, param_count)."""
    params = check_params(spec, params)
    X, y = check_batch(spec, X, y)
    out = np.empty((X.shape[0], spec.param_count))
    backend.kernels.sample_grads(spec.layout, params, X, y, out)
    return out


def predict_logits(spec: ModelSpec, params, X) -> np.ndarray:
    params = check_params(spec, params)
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(f"features have shape {X.shape}, spec expects (n, {spec.input_dim})")
    out = np.empty((X.shape[0], spec.output_dim))
    backend.kernels.logits(spec.layout, params, X, out)
    return out


def dense_hessian(spec: ModelSpec, params, X, y, damping: float = 0.0) -> np.ndarray:
    """Materialize the Hessian column by column. For checks on small models only."""
    p = spec.param_count
    H = np.empty((p, p))
    e = np.zeros(p)
    for k in range(p):
        e[k] = 1.0
        H[:, k] = hvp_arrays(spec, params, X, y, e, damping)
        e[k] = 0.0
    return H
