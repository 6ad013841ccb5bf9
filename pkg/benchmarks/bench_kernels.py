"""Throughput of the compiled and numpy path-stepping kernels.

Usage::

    python benchmarks/bench_kernels.py [--paths 8192] [--steps 256] [--repeat 5]

Prints path-steps per second for each backend and the speedup.  Both
backends are fed identical inputs and their outputs are compared.
"""
import argparse
import time

import numpy as np

from qsdiff._backend import get_kernels
from qsdiff.model import logistic_feller_model
from qsdiff.spectral import build_grid, build_spectral_data, discretize_generator


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_killed(k, z, dt, repeat):
    model = logistic_feller_model(1.0, 1.0, 1.0)
    powers = np.array([p for p, _ in model.poly_terms], dtype=float)
    coefs = np.array([c for _, c in model.poly_terms], dtype=float)

    def run():
        x = np.full(z.shape[0], 1.0)
        alive = np.ones(z.shape[0], dtype=np.uint8)
        k.killed_poly(x, alive, z, dt, powers, coefs, 0.0)
        return x, alive
    return _best(run, repeat)


def bench_reflected(k, z, dt, repeat, xs, qs, eps):
    def run():
        x = np.full(z.shape[0], 1.0)
        k.reflected_table(x, z, dt, xs, qs, eps)
        return x
    return _best(run, repeat)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=8192)
    ap.add_argument("--steps", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    dt = 1e-3
    z = np.random.default_rng(0).standard_normal((args.paths, args.steps))
    model = logistic_feller_model(1.0, 1.0, 1.0)
    grid = build_grid(model, 1e-3, 6.0, 2000, "log")
    spec = build_spectral_data(model, grid, discretize_generator(model, grid))
    xs, qs = np.ascontiguousarray(grid.points), np.ascontiguousarray(spec.q_tilde)

    try:
        cy = get_kernels("cython")
    except ImportError:
        cy = None
        print("compiled extension not built; timing the numpy kernels only")
    py = get_kernels("python")
    work = args.paths * args.steps
    print(f"{args.paths} paths x {args.steps} steps, best of {args.repeat}")
    for name, fn in (("killed_poly", lambda k: bench_killed(k, z, dt, args.repeat)),
                     ("reflected_table",
                      lambda k: bench_reflected(k, z, dt, args.repeat, xs, qs, grid.eps))):
        tp, out_py = fn(py)
        line = f"{name:<16} python {work / tp:11.3e} steps/s"
        if cy is not None:
            tc, out_cy = fn(cy)
            a = out_py[0] if isinstance(out_py, tuple) else out_py
            b = out_cy[0] if isinstance(out_cy, tuple) else out_cy
            both = np.isfinite(a) & np.isfinite(b)
            diff = float(np.max(np.abs(a[both] - b[both]))) if both.any() else 0.0
            line += f"   cython {work / tc:11.3e} steps/s   speedup {tp / tc:6.1f}x" \
                    f"   max|diff| {diff:.1e}"
        print(line)


if __name__ == "__main__":
    main()
