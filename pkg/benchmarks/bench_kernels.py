"""Throughput of the compiled and pure-Python kernels on a synthetic click stream.

    python benchmarks/bench_kernels.py --events 20000 --dim 8
"""

import argparse
import time

import numpy as np

from acfilter import _pykernels


def _csr(rng, n, n_rows, max_k):
    k = rng.integers(1, max_k + 1, size=n)
    ptr = np.concatenate([[0], np.cumsum(k)]).astype(np.int64)
    rows = rng.integers(0, n_rows, size=ptr[-1]).astype(np.int64)
    w = (1.0 / np.repeat(k, k)).astype(np.float64)
    return ptr, rows, w


def problem(n, dim, n_rows, seed):
    rng = np.random.default_rng(seed)
    V = rng.normal(0, 0.1, size=(n_rows, dim))
    G = np.zeros_like(V)
    u = _csr(rng, n, n_rows, 4)  # user side carries a multi-value field
    a = _csr(rng, n, n_rows, 2)
    labels = (rng.uniform(size=n) < 0.05).astype(np.float64)
    return V, G, u, a, np.arange(n, dtype=np.int64), labels


def bench(impl, n, dim, n_rows, repeat, seed):
    best_train = best_pred = float("inf")
    for _ in range(repeat):
        V, G, u, a, order, labels = problem(n, dim, n_rows, seed)
        state = np.zeros(2)
        pred = np.zeros(n)
        t0 = time.perf_counter()
        impl.train_events(V, G, state, *u, *a, order, labels, 0.1, 1e-8, 1e-6, True, pred)
        best_train = min(best_train, time.perf_counter() - t0)
        out = np.zeros(n)
        t0 = time.perf_counter()
        impl.predict_events(V, float(state[0]), *u, *a, out)
        best_pred = min(best_pred, time.perf_counter() - t0)
    return best_train, best_pred, V, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--events", type=int, default=20_000)
    ap.add_argument("--dim", type=int, default=8)
    ap.add_argument("--rows", type=int, default=5_000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    impls = {"python": _pykernels}
    try:
        from acfilter import _kernels

        impls["cython"] = _kernels
    except ImportError:
        print("compiled extension not built; timing the Python backend only")

    results = {name: bench(m, args.events, args.dim, args.rows, args.repeat, args.seed) for name, m in impls.items()}
    print(f"{'backend':8s} {'train ev/s':>14s} {'predict ev/s':>14s}")
    for name, (tt, tp, _, _) in results.items():
        print(f"{name:8s} {args.events / tt:14,.0f} {args.events / tp:14,.0f}")
    if "cython" in results:
        py, cy = results["python"], results["cython"]
        same = np.array_equal(py[2], cy[2]) and np.array_equal(py[3], cy[3])
        print(f"speedup  train x{py[0] / cy[0]:.0f}, predict x{py[1] / cy[1]:.0f}; bit-identical: {same}")


if __name__ == "__main__":
    main()
