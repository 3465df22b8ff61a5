"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Each kernel runs once untimed on both backends (this also triggers numba
compilation), then the best of ``--repeat`` runs is reported.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from mosfuse._kernels import _np

try:
    from mosfuse._kernels import _nb
except ImportError:  # numba unavailable
    _nb = None


def _cases(scale: float):
    rng = np.random.default_rng(0)
    n_pairs = int(2000 * scale)
    x = rng.integers(0, 5, n_pairs).astype(float)
    y = rng.normal(size=n_pairs)

    points = rng.normal(size=(int(20000 * scale), 80))
    centroids = rng.normal(size=(200, 80))

    n, F, D, L, E = int(2000 * scale), 80, 64, 50, 128
    V = rng.normal(size=(n, F))
    counts = rng.integers(1, 5, n)
    ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    lis = np.concatenate([rng.choice(L, c, replace=False) for c in counts]).astype(np.int64)
    sc = rng.integers(1, 6, ptr[-1]).astype(float)
    ys = np.array([sc[ptr[i]:ptr[i + 1]].mean() for i in range(n)])
    params = [rng.normal(size=(F, D)) * 0.1, rng.normal(size=D) * 0.1, np.array([3.0]),
              rng.normal(size=(L, E)) * 0.1, rng.normal(size=D) * 0.1, rng.normal(size=E) * 0.1,
              np.array([3.0])]
    order = rng.permutation(n).astype(np.int64)
    batch = order[:4].copy()

    X = rng.normal(size=(int(5000 * scale), 5))
    yf = X @ np.full(5, 0.2)

    def sgd(mod):
        mod.sgd_epoch(V, ys, ptr, lis, sc, order, 4, *[p.copy() for p in params], 1e-4, 1.0, 1.0, True)

    def rms(mod):
        mod.rmsprop_epoch(X, yf, np.full(5, 0.2), np.zeros(5), np.arange(X.shape[0], dtype=np.int64),
                          4, 1e-5, 0.9, 1e-8)

    return {
        f"pair_counts (n={n_pairs})": lambda mod: mod.pair_counts(x, y),
        f"nearest_centroid ({points.shape[0]}x200)": lambda mod: mod.nearest_centroid(points, centroids),
        "batch_gradients (batch 4)": lambda mod: mod.batch_gradients(V, ys, ptr, lis, sc, batch, *params,
                                                                     1.0, 1.0, True),
        f"sgd_epoch (n={n})": sgd,
        f"rmsprop_epoch (n={X.shape[0]})": rms,
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0, help="multiplies problem sizes")
    args = ap.parse_args()

    backends = {"numpy": _np}
    if _nb is not None:
        backends["numba"] = _nb
    print(f"{'kernel':36s}" + "".join(f"{b:>12s}" for b in backends) + ("   speedup" if _nb else ""))
    for name, fn in _cases(args.scale).items():
        times = {}
        for label, mod in backends.items():
            fn(mod)
            times[label] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        line = f"{name:36s}" + "".join(f"{times[b] * 1e3:10.2f}ms" for b in backends)
        if _nb is not None:
            line += f"{times['numpy'] / times['numba']:9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
