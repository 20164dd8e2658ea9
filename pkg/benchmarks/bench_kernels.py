"""Compare the compiled kernels with their pure-Python twins.

    python benchmarks/bench_kernels.py [--repeat 3]

Each kernel runs on the same inputs under both backends; the script checks
that outputs agree and prints the median wall time and the speed-up.
"""

import argparse
import statistics
import time

import numpy as np

from dslab import kernels


def _problems(rng):
    d = 50
    X = rng.standard_normal((400, d))
    teacher = rng.standard_normal(d)
    y = np.sign(X @ teacher)
    Z = y[:, None] * X
    order = rng.permutation(X.shape[0]).astype(np.int64)

    def dual_cd(mod):
        alpha = np.zeros(Z.shape[0])
        w = np.zeros(d)
        mod.dual_cd(Z, alpha, w, 200, 1e-6)
        return w

    def perceptron(mod):
        w = np.zeros(d)
        mod.perceptron_epochs(X, y, w, order, 20)
        return w

    def minover(mod):
        w = np.zeros(d)
        mod.minover(Z, w, 5000, 1e-6, 500)
        return w

    return {"dual_cd": dual_cd, "perceptron_epochs": perceptron, "minover": minover}


def _time(fn, mod, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(mod)
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    try:
        compiled = kernels.backend_module("cython")
    except ImportError:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    python = kernels.backend_module("python")
    print(f"{'kernel':<20}{'cython [s]':>12}{'python [s]':>12}{'speed-up':>10}  agree")
    for name, fn in _problems(np.random.default_rng(0)).items():
        tc, wc = _time(fn, compiled, args.repeat)
        tp, wp = _time(fn, python, args.repeat)
        agree = np.allclose(wc, wp, rtol=1e-9, atol=1e-12)
        print(f"{name:<20}{tc:>12.4f}{tp:>12.4f}{tp / tc:>10.1f}  {agree}")


if __name__ == "__main__":
    main()
