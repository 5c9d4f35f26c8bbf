"""Influence of each training sample on the total validation loss.

For a validation sample ``x_j`` let ``s_j = (H + damping*I)^-1 grad L(x_j)``.
The influence of removing training sample ``x`` on the loss at ``x_j`` is
``-s_j . grad L(x)``; a sample whose total over all validation samples is
strictly positive is *unfavorable* (removing it is predicted to lower the
validation loss).

:func:`score_all` solves for each ``s_j`` once and then sweeps all training
gradients, so the number of inverse-HVP solves is the number of validation
samples rather than ``n * k``.
"""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import backend, ihvp, model
from .data import Dataset
from .ihvp import IhvpConfig, IhvpResult
from .model import ModelSpec

CACHE_LIMIT = 10_000_000


class InfluenceError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class InfluenceScore:
    sample_id: int
    total: float
    per_validation: np.ndarray | None = None


@dataclass
class InfluenceReport:
    scores: list[InfluenceScore]
    ihvp_solve_count: int
    ihvp_residuals: np.ndarray
    config_echo: IhvpConfig
    model_hash: str
    val_ids: np.ndarray | None = None
    methods_used: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.scores)

    @property
    def k(self) -> int:
        return len(self.ihvp_residuals)

    @property
    def ids(self) -> np.ndarray:
        return np.array([s.sample_id for s in self.scores], dtype=np.int64)

    @property
    def totals(self) -> np.ndarray:
        return np.array([s.total for s in self.scores], dtype=np.float64)

    def as_dict(self) -> dict[int, float]:
        return {s.sample_id: s.total for s in self.scores}


def params_hash(params) -> str:
    return hashlib.sha256(np.asarray(params, dtype="<f8").tobytes()).hexdigest()


def make_oracles(spec: ModelSpec, params, train_set: Dataset):
    """Undamped full-dataset and minibatch Hessian-vector oracles."""
    X, y = train_set.features, train_set.labels

    def full(v):
        return model.hvp_arrays(spec, params, X, y, v, 0.0)

    def batch(idx, v):
        return model.hvp_arrays(spec, params, X[idx], y[idx], v, 0.0)

    return full, batch


def train_grads(spec: ModelSpec, params, train_set: Dataset) -> np.ndarray:
    """Per-sample data-loss gradients (no l2 term), one row per training sample.

    Removing ``x`` takes its data term out of ``(1/n) sum_i L_i + l2/2 ||theta||^2``;
    the regularizer stays, so it does not enter the removed gradient.
    """
    return model.per_sample_grads(spec, params, train_set.features, train_set.labels)


def validation_grad(spec: ModelSpec, params, features, label) -> np.ndarray:
    # the l2 term belongs to the training objective, not to a validation sample's loss
    return model.per_sample_grads(spec, params, np.reshape(features, (1, -1)), [label])[0]


def s_vector(spec: ModelSpec, params, train_set: Dataset, validation_sample,
             config: IhvpConfig, oracles=None) -> IhvpResult:
    """Inverse-HVP of the validation gradient; the result carries solver diagnostics."""
    full, batch = oracles or make_oracles(spec, params, train_set)
    g = validation_grad(spec, params, validation_sample.features, validation_sample.label)
    return ihvp.solve(config, full, batch, g, len(train_set))


def influence_pair(s_j, train_grad) -> float:
    s_j = np.ascontiguousarray(s_j, dtype=np.float64)
    train_grad = np.ascontiguousarray(train_grad, dtype=np.float64)
    if s_j.shape != train_grad.shape or s_j.ndim != 1:
        raise ValueError(f"length mismatch: {s_j.shape} vs {train_grad.shape}")
    out = np.empty(1)
    backend.kernels.neg_dots(train_grad.reshape(1, -1), s_j, out)
    return float(out[0])


def influence_column(s_j, train_grads) -> np.ndarray:
    """``influence_pair(s_j, g_i)`` for every row ``g_i`` (same bits as the pairwise call)."""
    G = np.ascontiguousarray(train_grads, dtype=np.float64)
    out = np.empty(G.shape[0])
    backend.kernels.neg_dots(G, np.ascontiguousarray(s_j, dtype=np.float64), out)
    return out


def naive_totals(s_vectors, train_grads) -> np.ndarray:
    """Reference double loop: training sample outermost, validation innermost."""
    totals = np.empty(len(train_grads))
    for i, g in enumerate(train_grads):
        acc = 0.0
        for s in s_vectors:
            acc += influence_pair(s, g)
        totals[i] = acc
    return totals


def score_all(spec: ModelSpec, params, train_set: Dataset, val_set: Dataset,
              config: IhvpConfig, *, workers: int = 1, keep_per_validation: bool = True,
              cache_train_grads: bool | None = None,
              return_s_vectors: bool = False):
    """Total influence of every training sample over the validation set.

    One inverse-HVP solve per validation sample; each ``s_j`` is then dotted
    against all training gradients. Validation passes may run on ``workers``
    threads; partial columns are merged in validation order, so the output
    does not depend on the worker count.
    """
    params = model.check_params(spec, params)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("score_all needs non-empty training and validation sets")
    n, k, p = len(train_set), len(val_set), spec.param_count
    if cache_train_grads is None:
        cache_train_grads = n * p <= CACHE_LIMIT

    oracles = make_oracles(spec, params, train_set)
    cached = train_grads(spec, params, train_set) if cache_train_grads else None

    def one_pass(j):
        res = s_vector(spec, params, train_set, val_set[j], config, oracles)
        if res.diverged:
            return res, None
        G = cached if cached is not None else train_grads(spec, params, train_set)
        return res, influence_column(res.solution, G)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            passes = list(pool.map(one_pass, range(k)))
    else:
        passes = [one_pass(j) for j in range(k)]

    totals = np.zeros(n)
    per_val = np.empty((n, k)) if keep_per_validation else None
    residuals = np.empty(k)
    methods = []
    solves = 0
    s_vectors = []
    for j, (res, column) in enumerate(passes):
        solves += 1
        residuals[j] = res.residual
        methods.append(res.method_used)
        if column is None:
            partial = _report(train_set, totals, per_val, residuals[: j + 1], solves,
                              config, params, val_set.ids[: j + 1], methods)
            raise InfluenceError(
                f"inverse-HVP solve for validation sample {int(val_set.ids[j])} diverged "
                "and CG fallback is disabled", partial)
        totals += column
        if per_val is not None:
            per_val[:, j] = column
        if return_s_vectors:
            s_vectors.append(res.solution)

    report = _report(train_set, totals, per_val, residuals, solves, config, params,
                     val_set.ids, methods)
    if return_s_vectors:
        return report, np.array(s_vectors)
    return report


def _report(train_set, totals, per_val, residuals, solves, config, params, val_ids, methods):
    scores = [
        InfluenceScore(int(sid), float(totals[i]),
                       None if per_val is None else per_val[i, : len(residuals)].copy())
        for i, sid in enumerate(train_set.ids)
    ]
    return InfluenceReport(scores, solves, np.asarray(residuals, dtype=np.float64).copy(),
                           config, params_hash(params), np.asarray(val_ids).copy(), list(methods))


def select_unfavorable(report: InfluenceReport) -> set[int]:
    """Ids whose total influence is strictly positive; ties at zero are kept."""
    return {s.sample_id for s in report.scores if s.total > 0.0}
