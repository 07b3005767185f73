#!/usr/bin/env python3
"""Compare the compiled kernel extension against the NumPy fallback.

Times the four hot kernels on the production model's three layer shapes
plus a full loss/gradient evaluation, for both backends:

    python benchmarks/bench_kernels.py [--batch 32] [--repeats 5]

The end-to-end row redirects the model's kernel bindings at runtime, so
it measures exactly what training sees.
"""

import argparse
import time

import numpy as np

from injectguard.cnn import kernels, kernels_numpy
from injectguard.cnn.model import PRESETS, ModelSpec, build_model, loss_and_gradients

try:
    from injectguard.cnn import _kernels
except ImportError:  # extension not built; NumPy numbers only
    _kernels = None

_KERNEL_NAMES = (
    "conv3x3_forward",
    "conv3x3_backward",
    "maxpool2_forward",
    "maxpool2_backward",
)


def best_of(fn, repeats):
    fn()  # warm-up (allocations, cache)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def layer_shapes(spec: ModelSpec, batch: int):
    """(input, weight) shapes of each conv layer at the given batch size.

    Convolutions are same-padded and each stage halves the grid, so the
    desk model walks 32 -> 16 -> 8 spatially.
    """
    shapes = []
    h = w = 32
    c = 1
    for f in spec.filters:
        shapes.append(((batch, h, w, c), (3, 3, c, f)))
        h, w, c = h // 2, w // 2, f
    return shapes


def bench_kernels(impl, spec, batch, repeats, rng):
    """min seconds for each (kernel, layer) on one backend."""
    rows = {}
    for li, (xshape, wshape) in enumerate(layer_shapes(spec, batch)):
        x = rng.standard_normal(xshape)
        w = rng.standard_normal(wshape)
        b = rng.standard_normal(wshape[-1])
        pre = impl.conv3x3_forward(x, w, b)
        dpre = rng.standard_normal(pre.shape)
        pooled, idx = impl.maxpool2_forward(pre)
        dpooled = rng.standard_normal(pooled.shape)
        rows[("conv3x3_forward", li)] = best_of(
            lambda: impl.conv3x3_forward(x, w, b), repeats)
        rows[("conv3x3_backward", li)] = best_of(
            lambda: impl.conv3x3_backward(x, w, dpre), repeats)
        rows[("maxpool2_forward", li)] = best_of(
            lambda: impl.maxpool2_forward(pre), repeats)
        rows[("maxpool2_backward", li)] = best_of(
            lambda: impl.maxpool2_backward(dpooled, idx), repeats)
    return rows


def bench_end_to_end(impl, spec, batch, repeats, rng):
    """Full loss+gradient step with the model temporarily bound to impl."""
    weights = build_model(spec, seed=0)
    x = rng.uniform(0.0, 1.0, size=(batch, 32, 32, 1))
    y = (np.arange(batch) % 2).astype(np.int64)
    saved = {name: getattr(kernels, name) for name in _KERNEL_NAMES}
    for name in _KERNEL_NAMES:
        setattr(kernels, name, getattr(impl, name))
    try:
        return best_of(lambda: loss_and_gradients(spec, weights, x, y), repeats)
    finally:
        for name, fn in saved.items():
            setattr(kernels, name, fn)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    spec = PRESETS["desk"]
    rng = np.random.default_rng(0)
    print(f"model filters {spec.filters}, batch {args.batch}, "
          f"best of {args.repeats} (after warm-up)")
    if _kernels is None:
        print("compiled extension not available; showing NumPy backend only\n")

    numpy_rows = bench_kernels(kernels_numpy, spec, args.batch, args.repeats, rng)
    compiled_rows = (
        bench_kernels(_kernels, spec, args.batch, args.repeats, rng)
        if _kernels else {}
    )
    numpy_e2e = bench_end_to_end(kernels_numpy, spec, args.batch, args.repeats, rng)
    compiled_e2e = (
        bench_end_to_end(_kernels, spec, args.batch, args.repeats, rng)
        if _kernels else None
    )

    header = f"{'kernel':<24} {'layer':>5} {'numpy':>10} {'compiled':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name in _KERNEL_NAMES:
        for li in range(len(spec.filters)):
            t_np = numpy_rows[(name, li)]
            if compiled_rows:
                t_c = compiled_rows[(name, li)]
                print(f"{name:<24} {li:>5} {t_np * 1e3:>8.2f}ms {t_c * 1e3:>8.2f}ms "
                      f"{t_np / t_c:>7.1f}x")
            else:
                print(f"{name:<24} {li:>5} {t_np * 1e3:>8.2f}ms {'-':>10} {'-':>8}")
    print("-" * len(header))
    if compiled_e2e is not None:
        print(f"{'loss_and_gradients':<24} {'all':>5} {numpy_e2e * 1e3:>8.1f}ms "
              f"{compiled_e2e * 1e3:>8.1f}ms {numpy_e2e / compiled_e2e:>7.1f}x")
    else:
        print(f"{'loss_and_gradients':<24} {'all':>5} {numpy_e2e * 1e3:>8.1f}ms")


if __name__ == "__main__":
    main()
