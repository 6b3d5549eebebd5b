"""Compare the compiled and numpy kernel backends, and the packed conv against
the dense float conv.

    python benchmarks/bench_kernels.py [--repeat 5]

Reports timings only; nothing here passes or fails.
"""

import argparse
import importlib
import time

import numpy as np

from latentbnn import _fallback, bitpack
from latentbnn.tensor import conv2d


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args()

    backends = {"numpy": _fallback}
    try:
        backends["cython"] = importlib.import_module("latentbnn._kernels")
    except ImportError:
        print("compiled extension not built; numpy only")

    rng = np.random.default_rng(0)
    x = rng.standard_normal((args.batch, 32, 16, 16)).astype(np.float32)
    cols = _fallback.im2col(x, 3, 3, 1, 1)
    pooled, idx = _fallback.maxpool2x2(x)
    a = rng.integers(0, 2**63, size=(args.batch * 256, 5), dtype=np.uint64)
    b = rng.integers(0, 2**63, size=(64, 5), dtype=np.uint64)

    cases = {
        "im2col 3x3": lambda m: m.im2col(x, 3, 3, 1, 1),
        "col2im 3x3": lambda m: m.col2im(cols, x.shape, 3, 3, 1, 1),
        "maxpool2x2": lambda m: m.maxpool2x2(x),
        "maxpool2x2 backward": lambda m: m.maxpool2x2_backward(pooled, idx, x.shape),
        "xnor_gemm": lambda m: m.xnor_gemm(a, b, 288),
    }
    print(f"{'kernel':24s}" + "".join(f"{name:>12s}" for name in backends) + "     speedup")
    for label, fn in cases.items():
        t = {name: best_of(lambda: fn(m), args.repeat) for name, m in backends.items()}
        line = f"{label:24s}" + "".join(f"{t[n] * 1e3:10.2f}ms" for n in backends)
        if "cython" in t:
            line += f"  {t['numpy'] / t['cython']:9.1f}x"
        print(line)

    # packed vs dense binary conv on one 32->64 layer
    w = rng.standard_normal((64, 32, 3, 3)).astype(np.float32)
    bsign = np.where(w >= 0, 1.0, -1.0).astype(np.float32)
    words, n = bitpack.pack(bsign.reshape(64, -1))
    layer = bitpack.PackedLayer(words, n, np.abs(w).reshape(64, -1).mean(1), 3, 3, 1, 1, False, True,
                                *(np.ones(64, np.float32) for _ in range(4)), 1e-5, np.ones(64, np.float32))
    act = bitpack.pack_activations(x, layer)
    s = np.where(x >= 0, 1.0, -1.0).astype(np.float32)
    t_dense = best_of(lambda: conv2d(s, bsign, 1, 1), args.repeat)
    t_packed = best_of(lambda: bitpack.packed_conv2d(layer, act), args.repeat)
    word_ops = act.words.shape[0] * words.shape[0] * words.shape[1]
    print(f"\ndense float conv   {t_dense * 1e3:8.2f}ms  ({2 * act.words.shape[0] * 64 * n / t_dense / 1e9:.2f} GFLOP/s)")
    print(f"packed xnor conv   {t_packed * 1e3:8.2f}ms  ({word_ops / t_packed / 1e9:.3f} G words/s, "
          f"{n}-bit dots in {words.shape[1]} words)")


if __name__ == "__main__":
    main()
