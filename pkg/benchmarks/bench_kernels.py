"""Time the numba kernels against their numpy fallbacks and check they agree.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 512]
"""

import argparse
import time

import numpy as np

from stainlab import _kernels
from stainlab.core import gaussian_taps
from stainlab.stain import default_matrix


def best_of(fn, args, repeat):
    fn(*args)  # warm-up / JIT compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(size, rng):
    img = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    yield "rgb_to_concentrations", (img, default_matrix().inverse.copy(), 255.0)
    yield "soft_histogram", (rng.uniform(0, 2.4, size=size * size), 20, 2.4)
    yield "correlate_rows", (rng.normal(size=(size, size, 3)), gaussian_taps(11, 1.5))
    small = max(16, size // 8)
    yield "conv2d_valid", (rng.normal(size=(small, small, 8)), rng.normal(size=(3, 3, 8, 8)))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=512)
    args = ap.parse_args()
    if not _kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed")

    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, a in cases(args.size, rng):
        np_fn, nb_fn = _kernels.NUMPY_KERNELS[name], _kernels.NUMBA_KERNELS[name]
        diff = float(np.max(np.abs(np_fn(*a) - nb_fn(*a))))
        t_np = best_of(np_fn, a, args.repeat)
        t_nb = best_of(nb_fn, a, args.repeat)
        print(f"{name:24s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.2f} {diff:10.1e}")


if __name__ == "__main__":
    main()
