"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is warmed up once (numba compiles on first call) and then timed
as the best of ``--repeat`` runs.  Outputs are checked for agreement before
timing so a fast-but-wrong kernel cannot win.
"""
import argparse
import time

import numpy as np

from dfshield import _kernels


def cases(rng):
    # conv-tiny second layer on a batch of 8x8 inputs
    x = rng.normal(size=(200, 8, 8, 8))
    w = rng.normal(size=(16, 8, 3, 3))
    gout = rng.normal(size=(200, 16, 8, 8))
    a = rng.normal(size=(2000, 64))
    b = rng.normal(size=(2000, 64))
    c = rng.normal(size=(100, 64))
    g = rng.normal(size=(10, 200_000))
    return {
        "conv2d_forward": (x, w, 1),
        "conv2d_backward_input": (gout, w, 1, 8, 8),
        "conv2d_backward_weight": (gout, x, 1, 3, 3),
        "pairwise_distances": (a, b),
        "nearest_centroid": (a, c),
        "sign_refine": (g, 0.5),
    }


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels.numba_impl is None:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':<26}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, kargs in cases(np.random.default_rng(0)).items():
        f_np = getattr(_kernels.numpy_impl, name)
        f_nb = getattr(_kernels.numba_impl, name)
        out_np, out_nb = f_np(*kargs), f_nb(*kargs)
        for u, v in zip(out_np if isinstance(out_np, tuple) else (out_np,),
                        out_nb if isinstance(out_nb, tuple) else (out_nb,)):
            np.testing.assert_allclose(u, v, rtol=1e-9, atol=1e-9)
        t_np = best_of(f_np, kargs, args.repeat)
        t_nb = best_of(f_nb, kargs, args.repeat)
        print(f"{name:<26}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
