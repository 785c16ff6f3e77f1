"""Compare the compiled kernels with the numpy fallback.

Times each fused kernel on ViT-shaped inputs, then one forward+backward
pass of a small model with each backend swapped in. Also checks that both
backends agree to within float32 roundoff.

    python benchmarks/bench_kernels.py [--repeat 20] [--dtype float32]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from blockvit import _kernels_py, kernels
from blockvit import numerics as nx
from blockvit.vit import ViTConfig, forward, init_model

try:
    from blockvit import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None


def _cases(dtype, rng):
    tokens, d, heads = 64 * 17, 64, 4
    x = rng.standard_normal((tokens, d)).astype(dtype)
    g = rng.standard_normal(d).astype(dtype)
    b = rng.standard_normal(d).astype(dtype)
    scores = rng.standard_normal((64 * heads * 17, 17)).astype(dtype)
    h = rng.standard_normal((tokens, 4 * d)).astype(dtype)
    dh = rng.standard_normal(h.shape).astype(dtype)
    return {
        "softmax_fwd": lambda k: k.softmax_fwd(scores, 1.0),
        "softmax_bwd": lambda k: k.softmax_bwd(scores, scores, 1.0),
        "layer_norm_fwd": lambda k: k.layer_norm_fwd(x, g, b, 1e-6),
        "layer_norm_bwd": lambda k: k.layer_norm_bwd(x, x, np.ones(tokens, dtype), g),
        "gelu_fwd": lambda k: k.gelu_fwd(h),
        "gelu_bwd": lambda k: k.gelu_bwd(h, dh),
    }


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


def _train_step(model, batch, labels):
    model.zero_grad()
    logits = forward(model, batch)["logits"]
    nx.cross_entropy(logits, labels).backward()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = ap.parse_args(argv)
    if _kernels_c is None:
        print("compiled extension not available; only the numpy fallback can run")
        return 1
    dtype = np.dtype(args.dtype)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}{'max |diff|':>12}")
    for name, fn in _cases(dtype, rng).items():
        tp = _best(lambda: fn(_kernels_py), args.repeat)
        tc = _best(lambda: fn(_kernels_c), args.repeat)
        diff = _max_diff(fn(_kernels_py), fn(_kernels_c))
        print(f"{name:<16}{tp * 1e3:>10.3f}{tc * 1e3:>11.3f}{tp / tc:>8.2f}x{diff:>12.2e}")

    with nx.precision(dtype):
        model = init_model(ViTConfig(image_size=32, patch_size=8, dim=64, depth=4, heads=4, num_classes=5), seed=0)
        batch = rng.random((32, 32, 32, 3)).astype(dtype)
        labels = rng.integers(0, 5, 32)
        times = {}
        saved = kernels._impl
        try:
            for label, impl in (("numpy", _kernels_py), ("cython", _kernels_c)):
                kernels._impl = impl
                times[label] = _best(lambda: _train_step(model, batch, labels), max(3, args.repeat // 4))
        finally:
            kernels._impl = saved
    print(f"\nforward+backward, batch 32, D=64, depth 4: numpy {times['numpy'] * 1e3:.1f} ms, "
          f"cython {times['cython'] * 1e3:.1f} ms ({times['numpy'] / times['cython']:.2f}x)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
