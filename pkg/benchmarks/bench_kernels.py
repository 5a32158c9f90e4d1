"""Time each hot kernel under its numba and pure-numpy implementations.

    python3 benchmarks/bench_kernels.py [--repeat N]

Numba timings exclude compilation (each kernel is warmed up once first).
Both implementations are checked for equal output before timing.
"""

import argparse
import timeit

import numpy as np

from xmodal import _kernels as K


def _inputs(rng):
    n = 2048
    depth = rng.uniform(0.5, 3.0, n)
    return {
        "zbuffer_splat": (rng.integers(-2, 34, n), rng.integers(-2, 34, n), depth, 1.0 / (1.0 + depth), 32, 32),
        "knn_indices": (rng.uniform(-1, 1, (256, 3)), 8),
        "col2im": (rng.normal(size=(16, 8, 3, 3, 15, 15)), 32, 32, 2),
        "scatter_add_rows": (rng.normal(size=(256 * 8, 64)), rng.integers(0, 256, 256 * 8), 256),
        "trilinear": (rng.uniform(-1, 1, (n, 3)), rng.normal(size=(4, 4, 4, 3)), -np.ones(3), np.ones(3)),
        "leaky_forward": (rng.normal(size=(4096, 128)), 0.01),
        "leaky_backward": (rng.normal(size=(4096, 128)), rng.normal(size=(4096, 128)), 0.01),
        "fnv1a64": (rng.bytes(1 << 16),),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
    inputs = _inputs(np.random.default_rng(0))
    print(f"{'kernel':<18}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name in K.KERNELS:
        fn_np = getattr(K, f"{name}_numpy")
        fn_nb = getattr(K, f"{name}_numba")
        arg = inputs[name]
        a, b = fn_np(*arg), fn_nb(*arg)
        if not np.array_equal(np.asarray(a), np.asarray(b)):
            raise SystemExit(f"{name}: implementations disagree")
        number = 3
        t_np = min(timeit.repeat(lambda: fn_np(*arg), number=number, repeat=args.repeat)) / number * 1e3
        t_nb = min(timeit.repeat(lambda: fn_nb(*arg), number=number, repeat=args.repeat)) / number * 1e3
        print(f"{name:<18}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
