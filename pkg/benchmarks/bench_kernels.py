"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--n 2000]

Covers the loops that dominate real runs: per-sample gradients (influence
scoring), batch Hessian-vector products (CG and LiSSA), and small-batch
loss/gradient calls (SGD steps).
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from datadrop import backend, model
from datadrop.model import ModelSpec

SPECS = {
    "logistic d=20": ModelSpec("logistic", 20, 2, l2_reg=0.01),
    "softmax d=20 c=10": ModelSpec("softmax", 20, 10, l2_reg=0.01),
    "mlp d=20 h=32 c=10": ModelSpec("mlp", 20, 10, hidden_dim=32, l2_reg=0.01),
}


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def workloads(spec, n, rng):
    params = rng.normal(0, 0.3, spec.param_count)
    X = rng.normal(size=(n, spec.input_dim))
    y = rng.integers(0, spec.output_dim, n).astype(float)
    v = rng.normal(size=spec.param_count)

    def sgd_steps():
        for start in range(0, n, 8):
            model.batch_loss_grad(spec, params, X[start:start + 8], y[start:start + 8])

    def lissa_steps():
        for start in range(0, min(n, 800), 8):
            model.hvp_arrays(spec, params, X[start:start + 8], y[start:start + 8], v)

    return {
        "per-sample grads": lambda: model.per_sample_grads(spec, params, X, y),
        "full hvp": lambda: model.hvp_arrays(spec, params, X, y, v),
        "sgd steps (batch 8)": sgd_steps,
        "lissa steps (batch 8)": lissa_steps,
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=2000)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    names = backend.available()
    if "cython" not in names:
        print("compiled kernels not built; only the numpy fallback is available")
    print(f"{'model':<22}{'workload':<24}" + "".join(f"{b:>12}" for b in names)
          + ("   speedup" if len(names) > 1 else ""))
    for label, spec in SPECS.items():
        timings = {}
        for b in names:
            with backend.use_backend(b):
                jobs = workloads(spec, args.n, np.random.default_rng(0))
                for job, fn in jobs.items():
                    fn()  # warm up
                    timings.setdefault(job, {})[b] = best_of(fn, args.repeat)
        for job, per in timings.items():
            row = f"{label:<22}{job:<24}" + "".join(f"{per[b] * 1e3:>10.2f}ms" for b in names)
            if len(names) > 1:
                row += f"{per['python'] / per['cython']:>9.1f}x"
            print(row)


if __name__ == "__main__":
    main()
