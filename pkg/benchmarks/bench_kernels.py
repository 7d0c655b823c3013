"""Time the compiled and pure-Python tree kernels on the same forests.

    python benchmarks/bench_kernels.py [--rows 2000] [--trees 20] [--repeat 3]

Both backends must produce identical trees; the script checks that before
reporting timings.
"""

import argparse
import time

import numpy as np

from tabgraa import kernels
from tabgraa.forest import TreeEnsemble


def _data(n, p, task, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    X[:, : p // 2] = np.round(X[:, : p // 2], 1)  # some tied values
    signal = X[:, 0] - 0.5 * X[:, 1] + 0.3 * rng.normal(size=n)
    y = (signal > 0).astype(np.int64) if task == "gini" else signal
    return X, y


def _fit(X, y, criterion, trees, backend):
    return TreeEnsemble(n_trees=trees, criterion=criterion, seed=7, backend=backend).fit(X, y)


def bench(rows, cols, trees, repeat):
    try:
        kernels.get_backend("compiled")
    except ImportError:
        print("compiled backend not built; only the python backend is available")
        return
    print(f"{'criterion':<10}{'backend':<10}{'best [s]':>10}{'speedup':>10}")
    for criterion in ("gini", "mse"):
        X, y = _data(rows, cols, criterion, 0)
        fits = {b: _fit(X, y, criterion, trees, b) for b in ("compiled", "python")}
        for tc, tp in zip(fits["compiled"].trees, fits["python"].trees):
            for f in ("feature", "threshold", "left", "right", "value"):
                assert np.array_equal(getattr(tc, f), getattr(tp, f)), f"backends differ in {f}"
        best = {}
        for b in ("compiled", "python"):
            ts = []
            for _ in range(repeat):
                t0 = time.perf_counter()
                _fit(X, y, criterion, trees, b)
                ts.append(time.perf_counter() - t0)
            best[b] = min(ts)
        for b in ("compiled", "python"):
            print(f"{criterion:<10}{b:<10}{best[b]:>10.3f}{best['python'] / best[b]:>10.1f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=2000)
    ap.add_argument("--cols", type=int, default=8)
    ap.add_argument("--trees", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    a = ap.parse_args()
    bench(a.rows, a.cols, a.trees, a.repeat)
