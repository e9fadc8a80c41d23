"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel and shape with the median time of each backend and
the speed-up. Outputs of the two backends are also compared, so a mismatch
shows up here before it shows up as a failing gradient check.
"""

import argparse
import statistics
import time

import numpy as np

from lrnas._kernels import implementations

CONV_SHAPES = [
    # (batch, channels, padded h, padded w, kh, kw, stride)
    (64, 16, 18, 18, 3, 3, 1),
    (64, 32, 10, 10, 3, 3, 2),
    (250, 64, 6, 6, 3, 1, 1),
    (32, 3, 18, 18, 3, 3, 1),
]
SVD_SHAPES = [(16, 144), (64, 192), (192, 192)]


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _cases(rng):
    for n, c, hp, wp, kh, kw, s in CONV_SHAPES:
        oh, ow = (hp - kh) // s + 1, (wp - kw) // s + 1
        xp = rng.standard_normal((n, c, hp, wp)).astype(np.float32)
        cols = rng.standard_normal((c * kh * kw, n * oh * ow)).astype(np.float32)
        label = f"{n}x{c}x{hp}x{wp} k{kh}x{kw} s{s}"
        yield "im2col", label, lambda m, xp=xp, a=(kh, kw, s, s, oh, ow): m.im2col(xp, *a)
        yield "col2im", label, lambda m, cols=cols, a=(n, c, hp, wp, kh, kw, s, s, oh, ow): m.col2im(cols, *a)
    for rows, cols_ in SVD_SHAPES:
        a = rng.standard_normal((rows, cols_))

        def jac(m, a=a):
            at, vt = a.copy(), np.eye(rows)
            m.jacobi_rotate(at, vt, 1e-15, 60)
            return at

        yield "jacobi", f"{rows}x{cols_}", jac


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    impls = implementations()
    rng = np.random.default_rng(0)
    if "cython" not in impls:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'kernel':8s} {'shape':28s} " + " ".join(f"{k:>10s}" for k in impls) + "   speed-up  max|diff|")
    for kernel, label, fn in _cases(rng):
        timings = {name: _median_time(lambda m=m: fn(m), args.repeat) for name, m in impls.items()}
        outs = [np.asarray(fn(m)) for m in impls.values()]
        if kernel == "jacobi":
            # rotations may converge to different (equally valid) orderings; compare column norms
            outs = [np.sort(np.linalg.norm(o, axis=1)) for o in outs]
        diff = max(float(np.max(np.abs(o - outs[0]))) for o in outs) if outs[0].size else 0.0
        speed = timings["python"] / timings["cython"] if "cython" in timings else float("nan")
        cells = " ".join(f"{1e3 * t:8.3f}ms" for t in timings.values())
        print(f"{kernel:8s} {label:28s} {cells}   {speed:7.2f}x  {diff:.2e}")


if __name__ == "__main__":
    main()
