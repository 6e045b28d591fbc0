"""Compare the numba kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--events N]

Both paths are timed in one process through the ``use_numba`` switch of the
public functions; the first numba call (compilation) is excluded.  Setting
``PAIRSYNC_DISABLE_NUMBA=1`` makes numba unavailable, in which case only the
numpy column is filled.
"""
import argparse
import timeit

import numpy as np

from pairsync import _kernels
from pairsync.correlation import auto_histogram, cross_histogram
from pairsync.timebase import ClockModel, NoiseState, clock_read


def _streams(rng, n, rate_hz):
    span = int(n / rate_hz * 1e12)
    a = np.unique(rng.integers(0, span, n))
    b = np.unique(np.concatenate([a[: n // 10] + 51_650_000 + rng.integers(-400, 400, n // 10),
                                  rng.integers(0, span, n)]))
    return a, b


def cases(n):
    rng = np.random.default_rng(1)
    a, b = _streams(rng, n, 1e5)
    model = ClockModel(bias=500, freq_offset=5e-11, white_pm=64, resolution=4)
    t = np.sort(rng.integers(0, 10**13, n))
    return {
        "cross_histogram (512 bins)":
            lambda nb: cross_histogram(a, b, 51_634_000, 51_666_000, 62.5, use_numba=nb),
        "cross_histogram (2 us window)":
            lambda nb: cross_histogram(a, b, 50_650_000, 52_650_000, 62.5, use_numba=nb),
        "auto_histogram (512 bins)":
            lambda nb: auto_histogram(a, 103_284_000, 103_316_000, 62.5, use_numba=nb),
        "clock_read (white PM)":
            lambda nb: clock_read(model, t, NoiseState.from_seed(0), use_numba=nb),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--events", type=int, default=1_000_000)
    args = p.parse_args(argv)
    print(f"numba available: {_kernels.HAVE_NUMBA}; {args.events} events per stream")
    print(f"{'case':32s} {'numpy [s]':>10s} {'numba [s]':>10s} {'speed-up':>9s}")
    for name, fn in cases(args.events).items():
        t_np = min(timeit.repeat(lambda: fn(False), number=1, repeat=args.repeat))
        if _kernels.HAVE_NUMBA:
            fn(True)  # compile
            t_nb = min(timeit.repeat(lambda: fn(True), number=1, repeat=args.repeat))
            print(f"{name:32s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f}x")
        else:
            print(f"{name:32s} {t_np:10.4f} {'-':>10s} {'-':>9s}")


if __name__ == "__main__":
    main()
