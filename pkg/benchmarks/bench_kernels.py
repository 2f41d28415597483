#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Times the hot paths at production sizes: detector convolutions (forward,
backward-input, backward-weights), the SSIM blur window, triangle z-buffering
of the person model, the patch paste, and a full detector forward pass.

Run:  python3 benchmarks/bench_kernels.py [--repeat N]
The numpy path is what ADVREAL_NUMBA=0 selects at import time.
"""

import argparse
import time

import numpy as np

from advreal import detect, geometry, kernels, render, scene


def timeit(fn, repeat):
    fn()  # warmup / JIT
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def build_cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 104, 104))
    w = rng.normal(size=(16, 16, 3, 3))
    b = rng.normal(size=16)
    gout = kernels.conv2d_forward(x, w, b, 2, 1)
    img = rng.uniform(0, 1, (208, 128))
    win = scene.gaussian_window()

    model = geometry.build_person(rng)
    params = scene.RenderParams(scale=0.5, distance=2.0, elevation=0.05,
                                azimuth=0.4, orientation=np.array([0.0, 1.0]))
    patch = rng.uniform(0, 1, (300, 300, 3))
    image416 = rng.uniform(0, 1, (416, 416, 3))
    detector = detect.ToyDetector.random_init(0)

    tex = rng.uniform(0, 1, (300, 300, 3))
    aff = np.eye(2) / 0.4
    off = np.array([-100.0, -100.0])

    return {
        "conv fwd 16ch@104px": lambda: kernels.conv2d_forward(x, w, b, 2, 1),
        "conv bwd-input": lambda: kernels.conv2d_backward_input(gout, w, x.shape, 2, 1),
        "conv bwd-weights": lambda: kernels.conv2d_backward_weights(gout, x, 3, 3, 2, 1),
        "ssim blur 208x128": lambda: kernels.blur_valid(img, win),
        "rasterize person": lambda: render.rasterize(model, patch, params, 416),
        "patch paste 120px": lambda: kernels.paste_affine(
            image416.copy(), tex, aff, off, 100, 260, 100, 260),
        "detector forward": lambda: detector.forward_grid(image416)[0],
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    if not kernels.HAS_NUMBA:
        raise SystemExit("numba unavailable; nothing to compare")

    rows = []
    for name, fn in build_cases().items():
        with kernels.use_backend("numba"):
            t_nb = timeit(fn, args.repeat)
        with kernels.use_backend("numpy"):
            t_np = timeit(fn, args.repeat)
        rows.append((name, t_nb * 1e3, t_np * 1e3, t_np / t_nb))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numba ms':>9}  {'numpy ms':>9}  {'speedup':>7}")
    for name, nb, npy, ratio in rows:
        print(f"{name:<{width}}  {nb:9.2f}  {npy:9.2f}  {ratio:6.1f}x")


if __name__ == "__main__":
    main()
