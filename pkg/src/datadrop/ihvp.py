"""Implicit inverse Hessian-vector products: ``s = (H + damping*I)^-1 v``.

Two routes:

* :func:`solve_cg` -- conjugate gradient on the exact Hessian-vector product.
* :func:`solve_lissa` -- the stochastic Neumann-series recurrence driven by
  minibatch Hessian-vector products.

Oracles passed in here are *undamped*; each solver adds ``config.damping``.
Whatever the route, the reported residual is measured afterwards with one
exact full-dataset product, never taken from the solver's own bookkeeping.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

METHODS = ("cg", "lissa", "both")

HvpOracle = Callable[[np.ndarray], np.ndarray]
BatchHvpOracle = Callable[[np.ndarray, np.ndarray], np.ndarray]


class IhvpError(RuntimeError):
    pass


@dataclass(frozen=True)
class IhvpConfig:
    method: str = "cg"
    damping: float = 0.01
    cg_tol: float = 1e-10
    cg_max_iter: int = 1000
    lissa_depth: int = 1000
    lissa_scale: float = 10.0
    lissa_repeats: int = 4
    lissa_batch: int = 8
    seed: int = 0
    cg_fallback: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")
        if self.cg_tol <= 0 or self.lissa_scale <= 0:
            raise ValueError("cg_tol and lissa_scale must be positive")
        for name in ("cg_max_iter", "lissa_depth", "lissa_repeats", "lissa_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "IhvpConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class IhvpResult:
    solution: np.ndarray
    residual: float
    iterations: int
    method_used: str
    diverged: bool = False
    residual_history: list[float] = field(default_factory=list, repr=False)
    alternatives: dict[str, float] = field(default_factory=dict)


def _check_finite(vec, where):
    if not np.all(np.isfinite(vec)):
        raise FloatingPointError(f"non-finite value from Hessian-vector oracle ({where})")


def _relative_residual(apply_damped, x, v, vnorm):
    return float(np.linalg.norm(apply_damped(x) - v) / vnorm)


def solve_cg(hvp_oracle: HvpOracle, v, config: IhvpConfig,
             callback: Callable[[int, np.ndarray], None] | None = None) -> IhvpResult:
    """Conjugate gradient on ``hvp_oracle(x) + damping * x = v``.

    Stops once the relative residual is at most ``config.cg_tol``; otherwise
    returns the lowest-residual iterate after ``cg_max_iter`` products. If
    rounding makes the true residual drift above the recursive one, CG is
    restarted from the current iterate.
    """
    v = np.asarray(v, dtype=np.float64)
    lam = config.damping
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0.0:
        return IhvpResult(np.zeros_like(v), 0.0, 0, "cg")

    def apply(x):
        out = hvp_oracle(x)
        _check_finite(out, "cg")
        return out + lam * x if lam else out

    x = np.zeros_like(v)
    best_x, best_res = x.copy(), 1.0
    history: list[float] = []
    it = 0
    r = v.copy()
    while it < config.cg_max_iter:
        p = r.copy()
        rs = float(r.dot(r))
        while it < config.cg_max_iter:
            Ap = apply(p)
            pAp = float(p.dot(Ap))
            if not pAp > 0.0:
                raise IhvpError("Hessian is not positive definite along a CG direction; increase damping")
            alpha = rs / pAp
            x = x + alpha * p
            r = r - alpha * Ap
            it += 1
            rs_new = float(r.dot(r))
            res = np.sqrt(rs_new) / vnorm
            history.append(res)
            if callback is not None:
                callback(it, x)
            if res < best_res:
                best_x, best_res = x.copy(), res
            if res <= config.cg_tol:
                break
            p = r + (rs_new / rs) * p
            rs = rs_new
        true_res = _relative_residual(apply, best_x, v, vnorm)
        if true_res <= config.cg_tol:
            break
        # recursive residual drifted: restart from the best iterate
        x = best_x.copy()
        r = v - apply(x)
        best_res = true_res
    residual = _relative_residual(apply, best_x, v, vnorm)
    return IhvpResult(best_x, residual, it, "cg", False, history)


def solve_lissa(batch_hvp_oracle: BatchHvpOracle, v, config: IhvpConfig,
                n_samples: int) -> IhvpResult:
    """Stochastic estimate of ``(H + damping*I)^-1 v``.

    ``batch_hvp_oracle(indices, x)`` returns the mean Hessian of the rows in
    ``indices`` applied to ``x``. Each of ``lissa_repeats`` runs iterates::

        s_0 = v
        s_t = v + s_{t-1} - (H_t s_{t-1} + damping * s_{t-1}) / scale

    whose fixed point is ``scale * (H + damping*I)^-1 v``; the runs are
    averaged and divided by ``scale``. A run whose iterate norm passes
    ``1e6 * ||v||`` marks the result as diverged.
    """
    v = np.asarray(v, dtype=np.float64)
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0.0:
        return IhvpResult(np.zeros_like(v), 0.0, 0, "lissa")
    if n_samples < 1:
        raise ValueError("solve_lissa needs a non-empty dataset")
    lam, scale = config.damping, config.lissa_scale
    limit = 1e6 * vnorm
    acc = np.zeros_like(v)
    steps = 0
    diverged = False
    for rep in range(config.lissa_repeats):
        rng = np.random.default_rng([config.seed, rep])
        s = v.copy()
        for _ in range(config.lissa_depth):
            idx = rng.integers(0, n_samples, size=config.lissa_batch)
            hs = batch_hvp_oracle(idx, s)
            s = v + s - (hs + lam * s) / scale
            steps += 1
            if not np.all(np.isfinite(s)) or np.linalg.norm(s) > limit:
                diverged = True
                break
        acc += s
        if diverged:
            break
    solution = acc / ((rep + 1) * scale)

    everything = np.arange(n_samples)
    if np.all(np.isfinite(solution)):
        exact = batch_hvp_oracle(everything, solution) + lam * solution
        residual = float(np.linalg.norm(exact - v) / vnorm)
    else:
        residual = float("inf")
    return IhvpResult(solution, residual, steps, "lissa", diverged)


def solve(config: IhvpConfig, hvp_oracle: HvpOracle, batch_hvp_oracle: BatchHvpOracle,
          v, n_samples: int) -> IhvpResult:
    """Dispatch on ``config.method``.

    ``both`` runs the two routes, records both residuals in ``alternatives``
    and keeps the lower-residual solution.
    A diverged stochastic solve falls back to CG when ``config.cg_fallback``.
    """
    if config.method == "cg":
        return solve_cg(hvp_oracle, v, config)
    lissa = solve_lissa(batch_hvp_oracle, v, config, n_samples)
    if config.method == "lissa":
        if lissa.diverged and config.cg_fallback:
            cg = solve_cg(hvp_oracle, v, config)
            cg.alternatives["lissa"] = lissa.residual
            return cg
        return lissa
    cg = solve_cg(hvp_oracle, v, config)
    winner, other = (lissa, cg) if (not lissa.diverged and lissa.residual < cg.residual) else (cg, lissa)
    winner.alternatives.update({"cg": cg.residual, "lissa": lissa.residual})
    return winner
