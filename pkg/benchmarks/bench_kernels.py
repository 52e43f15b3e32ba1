"""Compare the compiled kernels against the NumPy fallback.

Times each hot kernel at episode-graph sizes, then a full training
iteration with each backend active. Run after ``pip install -e .``:

    python3 benchmarks/bench_kernels.py [--repeat 20] [--dtype float32]
"""

import argparse
import timeit

import numpy as np

from egnn.numerics import kernels


def kernel_cases(dtype, rng):
    cases = []
    for n, d in ((25, 32), (100, 96)):
        v = rng.normal(size=(n, d)).astype(dtype)
        g = rng.normal(size=(n, n, d)).astype(dtype)
        cases.append((f"pairwise_absdiff n={n} d={d}", "pairwise_absdiff", (v,)))
        cases.append((f"pairwise_absdiff_backward n={n} d={d}", "pairwise_absdiff_backward", (v, g)))
        w1 = rng.uniform(0.01, 0.99, size=(n, n)).astype(dtype)
        w2 = (1 - w1).astype(dtype)
        e = rng.uniform(0.05, 1, size=(n, n, 2)).astype(dtype)
        e /= e.sum(axis=2, keepdims=True)
        ge = rng.normal(size=(n, n, 2)).astype(dtype)
        cases.append((f"edge_renorm_forward n={n}", "edge_renorm_forward", (w1, w2, e, 1e-12)))
        cases.append((f"edge_renorm_backward n={n}", "edge_renorm_backward", (w1, w2, e, ge, 1e-12)))
    for b, c, o, s in ((25, 1, 16, 16), (25, 16, 16, 8)):
        x = rng.normal(size=(b, c, s, s)).astype(dtype)
        w = rng.normal(size=(o, c, 3, 3)).astype(dtype)
        bias = rng.normal(size=o).astype(dtype)
        gy = rng.normal(size=(b, o, s, s)).astype(dtype)
        tag = f"B={b} C={c} O={o} {s}x{s}"
        cases.append((f"conv3x3_forward {tag}", "conv3x3_forward", (x, w, bias)))
        cases.append((f"conv3x3_backward {tag}", "conv3x3_backward", (x, w, gy)))
    return cases


def best_time(fn, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def training_iteration_time(variant, repeat):
    from egnn.episodes import SyntheticSpec, generate_synthetic
    from egnn.training import TrainingConfig, train

    spec = SyntheticSpec(variant=variant, classes=20, per_class=20, dim=16, seed=0)
    ds = generate_synthetic(spec).set_splits(14, 0, 6)
    cfg = TrainingConfig(way=5, shot=5, query=3, task_batch=1, episodes=3, eval_every=0, emb_dim=32,
                         conv_channels=16, split=(14, 0, 6),
                         variant="conv4" if variant == "procedural_images" else "mlp")
    return min(timeit.repeat(lambda: train(cfg, ds), number=1, repeat=max(2, repeat // 5))) / cfg.episodes


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=15)
    parser.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    parser.add_argument("--skip-training", action="store_true")
    args = parser.parse_args()

    if kernels.compiled_backend is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':48s} {'numpy (us)':>12s} {'compiled (us)':>14s} {'speedup':>8s}")
    for label, name, inputs in kernel_cases(np.dtype(args.dtype), rng):
        times = {}
        for backend in ("numpy", "compiled"):
            fn = getattr(kernels.numpy_backend if backend == "numpy" else kernels.compiled_backend, name)
            times[backend] = best_time(lambda: fn(*inputs), args.repeat)
        print(f"{label:48s} {1e6 * times['numpy']:12.1f} {1e6 * times['compiled']:14.1f} "
              f"{times['numpy'] / times['compiled']:7.2f}x")

    if not args.skip_training:
        print()
        print(f"{'training iteration (5-way 5-shot, 3 queries)':48s} {'numpy (ms)':>12s} {'compiled (ms)':>14s} {'speedup':>8s}")
        for variant in ("gaussian_vectors", "procedural_images"):
            times = {}
            for backend in ("numpy", "compiled"):
                kernels.use_backend(backend)
                times[backend] = training_iteration_time(variant, args.repeat)
            print(f"{variant:48s} {1e3 * times['numpy']:12.1f} {1e3 * times['compiled']:14.1f} "
                  f"{times['numpy'] / times['compiled']:7.2f}x")
        kernels.use_backend("compiled")


if __name__ == "__main__":
    main()
