"""Compiled kernels vs the NumPy fallback on training- and eval-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20]

Each kernel is checked for agreement before it is timed.
"""

import argparse
import sys
import timeit

import numpy as np

from mitml import _kernels_py

try:
    from mitml import _kernels as compiled
except ImportError:
    compiled = None


def cases(rng):
    # first stem conv of a 16-tracklet x 6-frame batch, then a deep stage
    for n, c, h, w in ((96, 3, 32, 16), (96, 64, 4, 2)):
        x = rng.normal(size=(n, c, h, w))
        cols = _kernels_py.im2col(x, 3, 3, 2, 1)
        yield f"im2col {n}x{c}x{h}x{w}", "im2col", (x, 3, 3, 2, 1)
        yield f"col2im {n}x{c}x{h}x{w}", "col2im", (cols, n, c, h, w, 3, 3, 2, 1)
    rel = np.ascontiguousarray(rng.uniform(size=(400, 500)) < 0.05, dtype=np.uint8)
    yield "ranked_hits 400x500", "ranked_hits", (rel,)


def best_of(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for label, name, inputs in cases(rng):
        py_fn, cy_fn = getattr(_kernels_py, name), getattr(compiled, name)
        a, b = py_fn(*inputs), cy_fn(*inputs)
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_allclose(np.asarray(u), np.asarray(v), rtol=0, atol=1e-12)
        t_py, t_cy = best_of(py_fn, inputs, args.repeat), best_of(cy_fn, inputs, args.repeat)
        print(f"{label:<28} {1e3 * t_py:10.3f} {1e3 * t_cy:10.3f} {t_py / t_cy:7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
