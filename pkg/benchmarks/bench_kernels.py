"""Time the compiled convolution kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--dtype f32|f64]

Both implementations are imported directly, so the comparison does not
depend on which backend the package picked at import time.  The last column is the
largest absolute difference between the two outputs.
"""
import argparse
import timeit

import numpy as np

from rvernet_lab.tensor import _kernels_py

try:
    from rvernet_lab.tensor import _kernels as _compiled
except ImportError:
    _compiled = None

# shapes seen by a width-32 mini_cnn on 64px inputs, batch 50
CASES = [
    ("im2col stem 3x3/2", "im2col", lambda r, dt: (r.random((50, 3, 66, 66)).astype(dt), 3, 3, 2)),
    ("im2col 1x1", "im2col", lambda r, dt: (r.random((50, 16, 16, 16)).astype(dt), 1, 1, 1)),
    ("col2im stem 3x3/2", "col2im", lambda r, dt: (r.random((50, 3, 3, 3, 32, 32)).astype(dt), 66, 66, 2)),
    ("depthwise fwd 3x3/2", "depthwise_forward",
     lambda r, dt: (r.random((50, 16, 34, 34)).astype(dt), r.random((16, 3, 3)).astype(dt), 2)),
    ("depthwise bwd 3x3/2", "depthwise_backward",
     lambda r, dt: (r.random((50, 16, 34, 34)).astype(dt), r.random((16, 3, 3)).astype(dt),
                    r.random((50, 16, 16, 16)).astype(dt), 2)),
]


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    return float(np.abs(a.astype(np.float64) - b).max())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    args = ap.parse_args(argv)
    if _compiled is None:
        print("compiled extension not built; only the numpy fallback is available")
        return 1
    dt = np.float32 if args.dtype == "f32" else np.float64
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'numpy ms':>10s} {'compiled ms':>12s} {'speedup':>8s}  max|diff|")
    for label, name, make in CASES:
        inputs = make(rng, dt)
        py_fn, c_fn = getattr(_kernels_py, name), getattr(_compiled, name)
        diff = _max_diff(py_fn(*inputs), c_fn(*inputs))
        t_py = min(timeit.repeat(lambda: py_fn(*inputs), number=1, repeat=args.repeat))
        t_c = min(timeit.repeat(lambda: c_fn(*inputs), number=1, repeat=args.repeat))
        print(f"{label:24s} {1e3 * t_py:10.2f} {1e3 * t_c:12.2f} {t_py / t_c:8.2f}x  {diff:.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
