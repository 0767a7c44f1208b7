"""Time the compiled and pure-Python kernels on pipeline-sized problems.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from sdc_concepts import kernels
from sdc_concepts.reporter import _sqdist


def lasso_case(rng, n=500, v=285):
    X = np.asfortranarray(rng.standard_normal((n, v)))
    y = X[:, :25] @ rng.uniform(0.5, 1.5, 25) + rng.standard_normal(n)
    return X, y - y.mean()


def run_lasso(impl, X, y, alpha=5e-3):
    n, v = X.shape
    w, r = np.zeros(v), y.copy()
    col_sq = (X * X).sum(axis=0) / n
    obj = np.empty(10_001)
    sweeps, _ = impl.lasso_cd(X, r, w, col_sq, alpha, 1e-7, 10_000, obj)
    return w, sweeps


def run_perplexity(impl, D, perplexity=30.0):
    m = D.shape[0]
    P, gap = np.zeros((m, m)), np.zeros(m)
    impl.perplexity_search(D, perplexity, 1e-5, 200, P, gap)
    return P


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    X, y = lasso_case(rng)
    D = np.ascontiguousarray(_sqdist(rng.standard_normal((250, 64))))
    impls = kernels.backends()
    results = {}
    print(f"{'kernel':<22}{'backend':<10}{'seconds':>10}")
    for name, impl in sorted(impls.items()):
        t_lasso, (w, sweeps) = best_of(lambda: run_lasso(impl, X, y), args.repeat)
        t_perp, P = best_of(lambda: run_perplexity(impl, D), args.repeat)
        results[name] = (w, P)
        print(f"{'lasso 500x285':<22}{name:<10}{t_lasso:>10.4f}   ({sweeps} sweeps)")
        print(f"{'perplexity 250 pts':<22}{name:<10}{t_perp:>10.4f}")
    if len(results) == 2:
        (wa, Pa), (wb, Pb) = results.values()
        print(f"max |w diff| {np.abs(wa - wb).max():.2e}, max |P diff| {np.abs(Pa - Pb).max():.2e}")


if __name__ == "__main__":
    main()
