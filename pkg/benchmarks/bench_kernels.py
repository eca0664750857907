"""Time each hot kernel in its numba and numpy flavour.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both flavours are called directly, so the BOOSTJET_DISABLE_JIT flag has no
effect here.  Numba compile time is excluded by a warm-up call.
"""
import argparse
import timeit

import numpy as np

from boostjet import _jit
from boostjet import kernels as K


def cases(rng):
    n = 200_000
    codes = rng.integers(0, 50_000, n).astype(np.int64)
    ts = rng.integers(0, 10 ** 9, n).astype(np.int64)
    yield "group_reduce (200k events)", (codes, ts), K._group_reduce_np, K._group_reduce_nb

    F, rows_n, parts, bins = 250, 20_000, 32, 33
    b = rng.integers(0, bins, (F, 40_000)).astype(np.uint8)
    part = rng.integers(0, parts, 40_000).astype(np.int64)
    resid = rng.normal(size=40_000)
    rows = np.sort(rng.choice(40_000, rows_n, replace=False))
    args = (b, part, resid, rows, parts, bins)
    yield ("histogram (250 features x 20k rows)", args, K._histogram_np,
           lambda *a: K._to_part_major(*K._histogram_nb(*a), parts, bins))

    X = rng.normal(size=(20_000, 250))
    T, p = 200, 6
    feats = rng.integers(0, 250, (T, p)).astype(np.int64)
    thr = rng.normal(size=(T, p))
    ml = rng.random((T, p)) < 0.5
    leaves = rng.normal(size=(T, 2 ** p))
    yield ("predict (200 trees x 20k rows)", (X, feats, thr, ml, leaves, 0.0, 0.01), K._predict_np,
           K._predict_nb)

    V, S, dim = 250, 3000, 64
    lengths = rng.integers(1, 8, S)
    offsets = np.r_[0, np.cumsum(lengths)].astype(np.int64)
    tokens = rng.integers(0, V, offsets[-1]).astype(np.int64)
    neg = rng.integers(0, V, (tokens.size, 5)).astype(np.int64)
    mats = [rng.normal(scale=0.01, size=s) for s in ((V, dim), (V, dim), (S, dim))]

    def dm(fn):
        return lambda: fn(tokens, offsets, *[m.copy() for m in mats], neg, 2, 0.025, 1e-4, 1)
    yield f"dm_train (1 epoch, {tokens.size} tokens)", (), dm(K._dm_train_np), dm(K._dm_train_nb)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not _jit.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<40}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, a, f_np, f_nb in cases(rng):
        f_nb(*a)  # compile
        t_np = min(timeit.repeat(lambda: f_np(*a), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<40}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
