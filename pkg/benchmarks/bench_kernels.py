#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the numpy fallback.

Covers the conv forward/backward kernels at the desk-scale layer shapes and
the affinity product at both desk (radius 5) and full (radius 19) settings,
plus one whole training step through each backend.

Run:  python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np


def timeit(fn, repeats):
    fn()  # warm-up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_conv(backends, repeats):
    shapes = [(8, 4, 16, 64, 64), (8, 16, 32, 32, 32), (8, 32, 64, 16, 16),
              (8, 64, 128, 8, 8), (8, 128, 256, 4, 4)]
    print("\nconv3x3 forward (N,C,K,H,W) -> ms")
    header = f"{'shape':<24}" + "".join(f"{name:>12}" for name, _ in backends)
    print(header)
    totals = {name: 0.0 for name, _ in backends}
    for n, c, k, h, w in shapes:
        rng = np.random.default_rng(0)
        xp = rng.standard_normal((n, c, h + 2, w + 2)).astype(np.float32)
        kern = rng.standard_normal((k, c, 3, 3)).astype(np.float32)
        bias = np.zeros(k, np.float32)
        row = f"{f'{n}x{c}->{k} @{h}x{w}':<24}"
        for name, mod in backends:
            dt = timeit(lambda m=mod: m.conv3x3_forward(xp, kern, bias), repeats)
            totals[name] += dt
            row += f"{dt * 1e3:>12.2f}"
        print(row)
    print(f"{'total':<24}" + "".join(f"{totals[n] * 1e3:>12.2f}" for n, _ in backends))

    print("\nconv3x3 kernel gradient -> ms")
    for n, c, k, h, w in shapes[:3]:
        rng = np.random.default_rng(1)
        xp = rng.standard_normal((n, c, h + 2, w + 2)).astype(np.float32)
        gout = rng.standard_normal((n, k, h, w)).astype(np.float32)
        row = f"{f'{n}x{c}->{k} @{h}x{w}':<24}"
        for name, mod in backends:
            dt = timeit(lambda m=mod: m.conv3x3_kernel_grad(xp, gout), repeats)
            row += f"{dt * 1e3:>12.2f}"
        print(row)


def bench_affinity(backends, repeats):
    from freg.affinity import AffinityParams, build_affinity
    print("\naffinity apply -> ms")
    cases = [("64px r=5", 64, 5.0), ("64px r=19", 64, 19.0)]
    for label, size, radius in cases:
        rng = np.random.default_rng(2)
        img = rng.random((3, size, size), dtype=np.float64).astype(np.float32)
        m = build_affinity(img, AffinityParams(radius=radius))
        s = rng.standard_normal((size, size)).astype(np.float32)
        row = f"{label + f' ({m.offsets.shape[0]} offsets)':<24}"
        for name, mod in backends:
            dt = timeit(lambda mm=mod: mm.affinity_apply(m.planes, m.offsets, s), repeats)
            row += f"{dt * 1e3:>12.2f}"
        print(row)


def bench_train_step(repeats):
    """One full desk-scale training batch through whichever backend is active."""
    from freg import kernels
    from freg.affinity import AffinityParams
    from freg.losses import LossWeights
    from freg.nets import NetConfig, init_parameters
    from freg.trainer import AffinityCache, OptimizerState, train_step
    from freg.synthdata import FootprintDataset, GenSpec, make_triple, _sample_seeds

    spec = GenSpec()
    triples = [make_triple(spec, s) for s in _sample_seeds(0, 8)]
    ds = FootprintDataset(
        x=np.stack([t.x for t in triples]), z=np.stack([t.z for t in triples]),
        y=np.stack([t.y for t in triples]), manifest={},
        train_idx=np.arange(8), val_idx=np.arange(0), test_idx=np.arange(0))
    bundle = init_parameters(NetConfig(image_size=64), seed=0)
    opt = OptimizerState()
    weights = LossWeights(warmup_batches=10)
    weights.batch_index = 10   # regularizers fully on
    cache = AffinityCache(ds, AffinityParams(radius=5.0))
    affs = cache.for_indices(range(8))

    def step():
        train_step(ds.x, ds.z, ds.y, bundle, opt, weights, affs, lr=2e-4)

    dt = timeit(step, repeats)
    print(f"\nfull desk train step [{kernels.BACKEND_NAME}]: {dt * 1e3:.1f} ms/batch "
          f"({5000 * dt / 60:.1f} min per 5k-batch run)")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    from freg.kernels import numpy_backend
    backends = [("numpy", numpy_backend)]
    try:
        from freg.kernels import _compiled
        backends.append(("compiled", _compiled))
    except ImportError:
        print("compiled core not built; benchmarking the fallback only")

    bench_conv(backends, args.repeats)
    bench_affinity(backends, args.repeats)
    bench_train_step(max(3, args.repeats // 4))


if __name__ == "__main__":
    main()
