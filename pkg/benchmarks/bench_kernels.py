"""Compare the numba and numpy kernel paths on identical inputs.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 64]

Prints one line per kernel with the median time of each path, the speedup
and the max abs difference between the two outputs, then times one
KNConv forward/backward pass of a small KNResNet-13 step end to end.
"""

import argparse
import time

import numpy as np

from knormlab import _kernels as K


def _median_time(fn, repeat):
    fn()  # warm-up (numba compiles on first call)
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def _both(fn, repeat):
    out = {}
    for flag in (True, False):
        K.use_numba(flag)
        res = fn()
        out[flag] = (_median_time(fn, repeat), res)
    K.use_numba(True)
    return out


def _diff(a, b):
    if isinstance(a, tuple):
        return max(float(np.max(np.abs(u - v))) for u, v in zip(a, b))
    return float(np.max(np.abs(a - b)))


def cases(batch):
    gen = np.random.default_rng(0)
    xp = gen.normal(size=(batch, 16, 34, 34))
    cols = K.im2col(xp, 3, 3, 1, 1)
    rows = cols.reshape(-1, cols.shape[-1])
    mask = (gen.uniform(size=rows.shape) > 0.1).astype(np.float64)
    g = gen.normal(size=rows.shape)
    xhat, mu, inv = K.rows_standardize(rows, mask)
    return {
        "im2col 3x3 s1": lambda: K.im2col(xp, 3, 3, 1, 1),
        "col2im 3x3 s1": lambda: K.col2im(cols, 16, 34, 34, 3, 3, 1, 1),
        "rows_standardize": lambda: K.rows_standardize(rows, mask),
        "rows_standardize_grad": lambda: K.rows_standardize_grad(g, rows, mask, 1.0, mu, inv),
    }


def bench_step(batch, repeat):
    from knormlab import build_knresnet13
    from knormlab.rng import Rng
    from knormlab.training import sgd_step

    model = build_knresnet13(num_classes=10, channel_schedule=(16, 32, 32, 32), image_size=32)
    gen = np.random.default_rng(1)
    x = gen.uniform(size=(batch, 3, 32, 32))
    y = gen.integers(0, 10, size=batch)
    rng = Rng(0)
    ids = np.arange(batch)
    return _both(lambda: sgd_step(model, x, y, 0.0, rng, 0, ids), max(2, repeat // 5))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args(argv)
    if not K.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':24s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, fn in cases(args.batch).items():
        r = _both(fn, args.repeat)
        (tn, a), (tp, b) = r[True], r[False]
        print(f"{name:24s} {tn * 1e3:10.2f} {tp * 1e3:10.2f} {tp / tn:8.2f} {_diff(a, b):10.2e}")
    r = bench_step(args.batch, args.repeat)
    tn, tp = r[True][0], r[False][0]
    print(f"{'sgd step (KNResNet-13)':24s} {tn * 1e3:10.2f} {tp * 1e3:10.2f} {tp / tn:8.2f} {abs(r[True][1] - r[False][1]):10.2e}")


if __name__ == "__main__":
    main()
