"""Numerical self-tests behind ``datadrop check``."""
from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from . import backend, ihvp, model
from .model import ModelSpec, Sample

KIND_SPECS = {
    "linear-mse": dict(kind="linear-mse", input_dim=3, output_dim=1, l2_reg=0.01),
    "logistic": dict(kind="logistic", input_dim=3, output_dim=2, l2_reg=0.01),
    "softmax": dict(kind="softmax", input_dim=3, output_dim=4, l2_reg=0.01),
    "mlp-tanh": dict(kind="mlp", input_dim=3, output_dim=3, hidden_dim=4, activation="tanh", l2_reg=0.01),
    "mlp-relu": dict(kind="mlp", input_dim=3, output_dim=3, hidden_dim=4, activation="relu", l2_reg=0.01),
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    limit: float

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.name:<32} worst={self.worst:.3e}  limit={self.limit:.0e}"


def random_problem(name: str, rng: np.random.Generator, n: int = 10):
    spec = ModelSpec(**KIND_SPECS[name])
    params = rng.normal(0.0, 0.5, spec.param_count)
    X = rng.normal(size=(n, spec.input_dim))
    if spec.is_classifier:
        y = rng.integers(0, spec.output_dim, n).astype(float)
    else:
        y = rng.normal(size=n)
    return spec, params, X, y


def hidden_preactivations(spec, params, X):
    d, h = spec.input_dim, spec.hidden_dim
    W1 = params[: h * d].reshape(h, d)
    b1 = params[h * d: h * d + h] if spec.fit_bias else 0.0
    return X @ W1.T + b1


def fd_valid(spec, params, X, deltas) -> bool:
    """False when a central difference would straddle a relu kink.

    Finite differences across a kink measure a blend of two linear pieces, so
    such draws say nothing about the analytic derivatives and are redrawn.
    """
    if spec.kind != "mlp" or spec.activation != "relu":
        return True
    a = hidden_preactivations(spec, params, X)
    for delta in deltas:
        for sign in (1.0, -1.0):
            moved = hidden_preactivations(spec, params + sign * delta, X)
            if np.any(np.sign(moved) != np.sign(a)) or np.any(a == 0.0):
                return False
    return True


def coordinate_steps(spec, step):
    # one-hot perturbations of the first layer only; later layers are smooth in params
    count = spec.hidden_dim * (spec.input_dim + int(spec.fit_bias))
    eye = np.zeros((count, spec.param_count))
    eye[np.arange(count), np.arange(count)] = step
    return eye


def draw_fd_problem(name, rng, n, deltas_for):
    """random_problem, redrawn until finite differences are meaningful."""
    while True:
        spec, params, X, y = random_problem(name, rng, n)
        deltas, extra = deltas_for(spec, rng)
        if fd_valid(spec, params, X, deltas):
            return spec, params, X, y, extra


def _rel(a, b):
    return float(np.linalg.norm(a - b) / (np.linalg.norm(a) + 1e-12))


def fd_grad(spec, params, sample, step=1e-5):
    g = np.empty_like(params)
    for k in range(params.size):
        e = np.zeros_like(params)
        e[k] = step
        g[k] = (model.loss(spec, params + e, sample) - model.loss(spec, params - e, sample)) / (2 * step)
    return g


def check_gradients(seed, draws=20, fault=0.0) -> list[CheckResult]:
    out = []
    for idx, name in enumerate(KIND_SPECS):
        rng = np.random.default_rng([seed, 1, idx])
        worst = 0.0
        for _ in range(draws):
            spec, params, X, y, _ = draw_fd_problem(
                name, rng, 1, lambda sp, r: (coordinate_steps(sp, 1e-5), None))
            s = Sample(X[0], y[0])
            g = model.grad(spec, params, s) * (1.0 + fault)
            worst = max(worst, _rel(g, fd_grad(spec, params, s)))
        out.append(CheckResult(f"gradient/{name}", worst < 1e-5, worst, 1e-5))
    return out


def check_hvp(seed, draws=10, fault=0.0) -> list[CheckResult]:
    out = []
    eps = 1e-4
    for idx, name in enumerate(KIND_SPECS):
        rng = np.random.default_rng([seed, 2, idx])
        worst_fd = worst_sym = worst_lin = 0.0
        for _ in range(draws):
            spec, params, X, y, (u, v) = draw_fd_problem(
                name, rng, 10, lambda sp, r: _hvp_directions(sp, r, eps))
            a, b = rng.normal(size=2)
            lam = 0.01

            def H(w):
                return model.hvp_arrays(spec, params, X, y, w, lam) * (1.0 + fault)

            fd = (model.batch_loss_grad(spec, params + eps * v, X, y)[1]
                  - model.batch_loss_grad(spec, params - eps * v, X, y)[1]) / (2 * eps) + lam * v
            Hv, Hu = H(v), H(u)
            worst_fd = max(worst_fd, _rel(Hv, fd))
            uHv, vHu = u.dot(Hv), v.dot(Hu)
            worst_sym = max(worst_sym, abs(uHv - vHu) / (abs(uHv) + 1e-12))
            worst_lin = max(worst_lin, _rel(a * Hu + b * Hv, H(a * u + b * v)))
        out += [CheckResult(f"hvp-fd/{name}", worst_fd < 1e-4, worst_fd, 1e-4),
                CheckResult(f"hvp-symmetry/{name}", worst_sym < 1e-10, worst_sym, 1e-10),
                CheckResult(f"hvp-linearity/{name}", worst_lin < 1e-10, worst_lin, 1e-10)]
    return out


def _hvp_directions(spec, rng, eps):
    u, v = rng.normal(size=(2, spec.param_count))
    return [eps * v], (u, v)


def check_cg(seed, fault=0.0) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 3])
    spec = ModelSpec("logistic", 4, 2, l2_reg=0.01)
    params = rng.normal(size=spec.param_count)
    X = rng.normal(size=(20, 4))
    y = rng.integers(0, 2, 20).astype(float)
    cfg = ihvp.IhvpConfig(damping=0.01)
    v = rng.normal(size=spec.param_count)
    res = ihvp.solve_cg(lambda w: model.hvp_arrays(spec, params, X, y, w), v, cfg)
    dense = model.dense_hessian(spec, params, X, y, cfg.damping)
    ref = np.linalg.solve(dense, v)
    err = _rel(ref, res.solution * (1.0 + fault))
    return [CheckResult("cg-vs-dense/logistic", err < 1e-5, err, 1e-5)]


def check_backends(seed) -> list[CheckResult]:
    if len(backend.available()) < 2:
        return []
    worst = 0.0
    for idx, name in enumerate(KIND_SPECS):
        rng = np.random.default_rng([seed, 4, idx])
        spec, params, X, y = random_problem(name, rng)
        v = rng.normal(size=spec.param_count)
        res = {}
        for b in ("cython", "python"):
            with backend.use_backend(b):
                res[b] = np.concatenate([model.batch_loss_grad(spec, params, X, y)[1],
                                         model.hvp_arrays(spec, params, X, y, v)])
        worst = max(worst, _rel(res["python"], res["cython"]))
    return [CheckResult("backend-parity", worst < 1e-12, worst, 1e-12)]


def run_all(seed: int = 0, fault: float = 0.0, draws: int = 20) -> list[CheckResult]:
    results = check_gradients(seed, draws=draws, fault=fault)
    results += check_hvp(seed, draws=max(1, draws // 2), fault=fault)
    results += check_cg(seed, fault=fault)
    results += check_backends(seed)
    return results
