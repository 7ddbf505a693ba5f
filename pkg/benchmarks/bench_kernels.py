"""Benchmark the numba kernels against the pure-numpy fallback.

Run:  python benchmarks/bench_kernels.py [--reps 20]

The same dispatch the package uses at import time is exercised here by
importing both backend modules directly, so the comparison is honest
regardless of the FORGETNOT_NUMBA setting.
"""

import argparse
import time

import numpy as np

from forgetnot.kernels import _numpy as numpy_backend

try:
    from forgetnot.kernels import _numba as numba_backend
except ImportError:
    numba_backend = None

CONV_SHAPES = [
    # (batch, c_in, c_out, side) mirroring the denoiser's hot layers
    (64, 16, 16, 16),
    (64, 32, 32, 8),
    (64, 48, 16, 16),
    (256, 16, 16, 16),
]

KNN_SHAPES = [
    # (n_query, n_ref, dim, k) mirroring the divergence estimator
    (2000, 2000, 1, 5),
    (5000, 5000, 1, 5),
    (512, 512, 70, 5),
]


def timeit(fn, reps):
    fn()                      # warmup / JIT
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps * 1000.0


def bench_conv(backend, reps, rng):
    rows = []
    for b, ci, co, side in CONV_SHAPES:
        x = rng.normal(size=(b, ci, side, side))
        w = rng.normal(size=(co, ci, 3, 3))
        bias = rng.normal(size=co)
        dy = rng.normal(size=(b, co, side, side))
        rows.append((
            f"conv {b}x{ci}->{co}@{side}",
            timeit(lambda: backend.conv2d_forward(x, w, bias, 1), reps),
            timeit(lambda: backend.conv2d_backward_input(dy, w, x.shape, 1), reps),
            timeit(lambda: backend.conv2d_backward_weights(dy, x, w.shape, 1), reps),
        ))
    return rows


def bench_knn(backend, reps, rng):
    rows = []
    for n, m, d, k in KNN_SHAPES:
        q = rng.normal(size=(n, d))
        ref = rng.normal(size=(m, d))
        rows.append((
            f"knn n={n} m={m} d={d} k={k}",
            timeit(lambda: backend.knn_kth_distance(q, ref, k, False), max(1, reps // 4)),
        ))
    return rows


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--reps", type=int, default=10)
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    backends = {"numpy": numpy_backend}
    if numba_backend is not None:
        backends["numba"] = numba_backend
    else:
        print("numba unavailable; benchmarking the numpy fallback only")

    conv = {name: bench_conv(be, args.reps, rng) for name, be in backends.items()}
    knn = {name: bench_knn(be, args.reps, rng) for name, be in backends.items()}

    print(f"\n{'kernel':28s} {'numpy fwd':>10s} {'numba fwd':>10s} "
          f"{'numpy dx':>10s} {'numba dx':>10s} {'numpy dw':>10s} {'numba dw':>10s}")
    for i, (label, *np_times) in enumerate(conv["numpy"]):
        nb_times = conv["numba"][i][1:] if "numba" in conv else ("-",) * 3
        cells = []
        for a, b in zip(np_times, nb_times):
            cells.append(f"{a:9.2f}ms")
            cells.append(f"{b:9.2f}ms" if isinstance(b, float) else f"{b:>11s}")
        print(f"{label:28s} " + " ".join(cells))

    print(f"\n{'kernel':28s} {'numpy':>10s} {'numba':>10s}")
    for i, (label, np_time) in enumerate(knn["numpy"]):
        nb = knn["numba"][i][1] if "numba" in knn else None
        nb_cell = f"{nb:9.2f}ms" if nb is not None else "          -"
        print(f"{label:28s} {np_time:9.2f}ms {nb_cell}")


if __name__ == "__main__":
    main()
