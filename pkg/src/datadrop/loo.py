"""Leave-one-out retraining: the ground truth that influence totals approximate.

Needs one converged retrain per training sample, so it is only meant for
small instances and convex models.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import model
from .data import Dataset
from .ihvp import IhvpConfig
from .influence import InfluenceReport, score_all
from .model import ModelSpec
from .trainer import lipschitz_bound, train_full_batch

DEFAULT_MAX_SAMPLES = 500


class LooError(RuntimeError):
    pass


@dataclass
class LooResult:
    ids: np.ndarray
    totals: np.ndarray
    deltas: np.ndarray
    converged: np.ndarray
    report: InfluenceReport
    params: np.ndarray
    tol: float
    spearman: float
    sign_agreement: float
    n_sign_checked: int

    def rows(self):
        for i in range(len(self.ids)):
            yield {"id": int(self.ids[i]), "influence_total": float(self.totals[i]),
                   "loo_delta": float(self.deltas[i]), "converged": bool(self.converged[i])}

    def summary(self) -> dict:
        return {
            "n": int(len(self.ids)),
            "n_converged": int(self.converged.sum()),
            "spearman": self.spearman,
            "sign_agreement": self.sign_agreement,
            "n_sign_checked": self.n_sign_checked,
            "delta_threshold": 10 * self.tol,
        }


def validation_total(spec: ModelSpec, params, val_set: Dataset) -> float:
    return float(model.per_sample_losses(spec, params, val_set.features, val_set.labels).sum())


def agreement(totals, deltas, converged, threshold):
    """Spearman correlation and sign agreement between scores and true deltas."""
    ok = np.asarray(converged, dtype=bool)
    rho = float(stats.spearmanr(totals[ok], deltas[ok]).statistic) if ok.sum() > 2 else float("nan")
    big = ok & (np.abs(deltas) > threshold)
    signs = float(np.mean(np.sign(totals[big]) == np.sign(deltas[big]))) if big.any() else float("nan")
    return rho, signs, int(big.sum())


def loo_oracle(spec: ModelSpec, train_set: Dataset, val_set: Dataset, ihvp_cfg: IhvpConfig,
               *, tol: float = 1e-8, max_iter: int = 200_000, lr: float | None = None,
               max_samples: int = DEFAULT_MAX_SAMPLES, force: bool = False) -> LooResult:
    """Influence totals next to actual validation-loss changes under removal.

    ``delta_i = sum_j L(x_j; theta) - L(x_j; theta_without_i)``: positive when
    removing sample ``i`` lowers the total validation loss. ``theta_without_i``
    minimizes ``(1/n) sum_{k != i} L_k + l2/2 ||theta||^2``: the data term
    keeps its 1/n weight, which on the reduced mean means l2 scaled by
    ``n / (n - 1)``. Every model is trained by full-batch gradient descent to
    ``||grad|| < tol``; each retrain is warm-started from the full-data optimum.
    """
    n = len(train_set)
    if n > max_samples and not force:
        raise LooError(f"{n} training samples exceeds the cap of {max_samples}; pass force=True")
    if n < 2:
        raise LooError("leave-one-out needs at least two training samples")
    full = train_full_batch(spec, train_set, lr=lr, tol=tol, max_iter=max_iter)
    if not full.converged:
        raise LooError(f"full-data training did not converge (||grad|| = {full.grad_norm:.3g})")
    report = score_all(spec, full.params, train_set, val_set, ihvp_cfg)
    base = validation_total(spec, full.params, val_set)

    loo_spec = spec.with_l2(spec.l2_reg * n / (n - 1))
    deltas = np.empty(n)
    converged = np.empty(n, dtype=bool)
    for i, sid in enumerate(train_set.ids):
        reduced = train_set.drop([sid])
        step = lr if lr is not None else 1.0 / lipschitz_bound(loo_spec, reduced)
        res = train_full_batch(loo_spec, reduced, lr=step, tol=tol, max_iter=max_iter, start=full.params)
        deltas[i] = base - validation_total(spec, res.params, val_set)
        converged[i] = res.converged

    totals = report.totals
    rho, signs, checked = agreement(totals, deltas, converged, 10 * tol)
    return LooResult(train_set.ids.copy(), totals, deltas, converged, report, full.params,
                     tol, rho, signs, checked)
