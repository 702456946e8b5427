"""Compare the compiled and pure-Python FFT row kernels.

Usage::

    python3 benchmarks/bench_fft_backends.py [--sizes 64,128,256] [--batch 12] [--repeat 5]

Prints one line per (size, backend) with the best-of-``repeat`` time for a
batched forward plus inverse 2D transform, and the speed-up of the compiled
kernel.  Results are checked against ``numpy.fft`` before timing.
"""

import argparse
import time

import numpy as np

from multidev.numerics import fft as fftmod


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="64,128,256", help="comma-separated power-of-two side lengths")
    p.add_argument("--batch", type=int, default=12, help="matrices per batch")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    backends = sorted(fftmod.BACKENDS)
    if "cython" not in backends:
        print("compiled kernel unavailable (build it or unset MULTIDEV_PURE_PYTHON); timing python only")
    print(f"{'size':>6} {'backend':>8} {'seconds':>10} {'speedup':>8}")
    for n in (int(s) for s in args.sizes.split(",")):
        x = (rng.standard_normal((args.batch, n, n)) + 1j * rng.standard_normal((args.batch, n, n)))
        x = x.astype(np.complex64)
        ref = np.fft.fft2(x)
        times = {}
        for b in backends:
            y = fftmod.fft2(x, backend=b)
            err = np.linalg.norm(y - ref) / np.linalg.norm(ref)
            if err > 1e-5:
                raise SystemExit(f"{b} backend disagrees with numpy.fft at n={n}: {err:.2e}")
            times[b] = best_time(lambda: fftmod.ifft2(fftmod.fft2(x, backend=b), backend=b), args.repeat)
        for b in backends:
            speed = times["python"] / times[b] if "python" in times else float("nan")
            print(f"{n:>6} {b:>8} {times[b]:>10.4f} {speed:>7.2f}x")


if __name__ == "__main__":
    main()
