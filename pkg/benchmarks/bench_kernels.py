"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 200]
"""
import argparse
import timeit

import numpy as np

from protofssl import _kernels_py

try:
    from protofssl import _kernels
except ImportError:
    _kernels = None

SHAPES = {
    # (queries, prototypes, dim): one helper's pseudo-labeling at desk scale, then ResNet8-sized embeddings
    "pseudo-label 100x4x16": (100, 4, 16),
    "helpers 100x20x16": (100, 20, 16),
    "cifar 490x10x512": (490, 10, 512),
}


def bench(fn, args, repeat):
    t = timeit.repeat(lambda: fn(*args), number=repeat, repeat=5)
    return min(t) / repeat * 1e6


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [("python", _kernels_py)] + ([("cython", _kernels)] if _kernels else [])
    if _kernels is None:
        print("compiled extension not built; only the fallback is timed")
    print(f"{'kernel':<38}" + "".join(f"{name:>12}" for name, _ in backends) + "   (us/call)")
    for label, (n, m, d) in SHAPES.items():
        a = rng.normal(size=(n, d)).astype(np.float32)
        b = rng.normal(size=(m, d)).astype(np.float32)
        z = -_kernels_py.pairwise_sq_dist(a, b)
        seg = rng.integers(0, m, size=n).astype(np.int64)
        for kname, call in [("pairwise_sq_dist", lambda k: (k.pairwise_sq_dist, (a, b))),
                            ("log_softmax_rows", lambda k: (k.log_softmax_rows, (z,))),
                            ("segment_mean", lambda k: (k.segment_mean, (a, seg, m)))]:
            row = [bench(*call(k), args.repeat) for _, k in backends]
            print(f"{kname + ' ' + label:<38}" + "".join(f"{t:>12.1f}" for t in row))


if __name__ == "__main__":
    main()
