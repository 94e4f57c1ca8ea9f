#!/usr/bin/env python3
"""Side-by-side timing of the two kernel backends.

Every hot kernel ships twice: a numba-jitted implementation and a pure
numpy fallback (selected at import time by SPIKEDEPTH_BACKEND). This
script imports both modules directly — the env flag plays no role here —
warms the JIT, then times each kernel on shapes the 64x64 desk pipeline
actually hits, reporting the best-of-N wall time for each side.

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from spikedepth import _kernels_numpy as knp

try:
    from spikedepth import _kernels_numba as knb
except ImportError:
    knb = None


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(rng):
    """name -> kwargs; every case is a single kernel call on desk-scale
    arrays (64x64 input, 1/4-scale feature grids)."""
    x = rng.standard_normal((64, 16, 16))
    w = rng.standard_normal((32, 64, 3, 3))
    y = knp.conv2d_fwd(x, w, 1, 1)
    gy = rng.standard_normal(y.shape)

    fl = rng.standard_normal((48, 16, 16))
    fr = rng.standard_normal((48, 16, 16))
    gvol = rng.standard_normal((16, 16, 16))

    vol = rng.standard_normal((16, 16, 16))
    disp = np.abs(rng.standard_normal((16, 16))) * 3.0
    glk = rng.standard_normal(knp.lookup_fwd(vol, disp, 1.0, 4).shape)

    flat = rng.standard_normal((256, 16))
    gpool = rng.standard_normal((256, 8))

    up = rng.standard_normal((32, 8, 8))
    gup = rng.standard_normal((32, 16, 16))

    d4 = rng.standard_normal((16, 16))
    logits = rng.standard_normal((9, 16, 16, 16))
    wts = np.exp(logits)
    wts /= wts.sum(axis=0, keepdims=True)
    gcx = rng.standard_normal((64, 64))

    frames = rng.random((50, 64, 64))
    spikes = knp.encode_fwd(frames, 5.0, None)[0]

    return [
        ("conv2d fwd 64->32 @16x16", "conv2d_fwd", (x, w, 1, 1)),
        ("conv2d bwd_w", "conv2d_bwd_w", (gy, x, 3, 3, 1, 1)),
        ("conv2d bwd_x", "conv2d_bwd_x", (gy, w, 1, 1, 16, 16)),
        ("corr volume 48ch @16x16", "corr_fwd", (fl, fr)),
        ("corr volume bwd", "corr_bwd", (gvol, fl, fr)),
        ("pyramid lookup r=4", "lookup_fwd", (vol, disp, 1.0, 4)),
        ("pyramid lookup bwd", "lookup_bwd", (glk, vol, disp, 1.0, 4)),
        ("avg pool last dim", "avgpool_fwd", (flat, 2, 2)),
        ("avg pool bwd", "avgpool_bwd", (gpool, 16, 2, 2)),
        ("bilinear up2", "up2_fwd", (up,)),
        ("bilinear up2 bwd", "up2_bwd", (gup, 8, 8)),
        ("convex 4x upsample", "convex_fwd", (d4, wts)),
        ("convex 4x upsample bwd", "convex_bwd", (gcx, d4, wts)),
        ("spike encode 50x64x64", "encode_fwd", (frames, 5.0, None)),
        ("tfi reconstruct", "tfi_fwd", (spikes, 26, 50)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7,
                        help="timing repeats per kernel (best is kept)")
    args = parser.parse_args()

    if knb is None:
        raise SystemExit("numba backend unavailable — nothing to compare")

    rng = np.random.default_rng(0)
    cases = _cases(rng)

    # first pass compiles the jitted side; run both so caches are warm
    for _, name, call_args in cases:
        getattr(knb, name)(*call_args)
        getattr(knp, name)(*call_args)

    print(f"{'kernel':<26} {'numpy ms':>10} {'numba ms':>10} {'speedup':>9}")
    print("-" * 58)
    totals = [0.0, 0.0]
    for label, name, call_args in cases:
        t_np = _best_of(lambda: getattr(knp, name)(*call_args), args.repeats)
        t_nb = _best_of(lambda: getattr(knb, name)(*call_args), args.repeats)
        totals[0] += t_np
        totals[1] += t_nb
        print(f"{label:<26} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} "
              f"{t_np / t_nb:>8.1f}x")
    print("-" * 58)
    print(f"{'total':<26} {totals[0] * 1e3:>10.3f} {totals[1] * 1e3:>10.3f} "
          f"{totals[0] / totals[1]:>8.1f}x")


if __name__ == "__main__":
    main()
