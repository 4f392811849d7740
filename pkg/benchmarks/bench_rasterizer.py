"""Time the jitted and pure-numpy compositing kernels on the same scene.

    python3 benchmarks/bench_rasterizer.py [--repeats 5] [--seed 0]
"""
import argparse
import time

import numpy as np

from emdsplat import synth
from emdsplat.rasterizer import rasterize


def _time(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    scene = synth.generate_scene(args.seed)
    gauss = scene.world_gaussians(0.5)
    cam = scene.cameras[0]
    bg = np.array(synth.BACKGROUND)
    d_image = np.random.default_rng(args.seed).normal(size=(cam.height, cam.width, 3))
    print(f"{gauss.count} Gaussians, {cam.width}x{cam.height}")

    results = {}
    for backend in ("numba", "numpy"):
        r = rasterize(gauss, cam, bg, backend=backend)  # warm-up and jit compile
        r.backward(d_image)
        fwd = _time(lambda: rasterize(gauss, cam, bg, backend=backend), args.repeats)
        bwd = _time(lambda: r.backward(d_image), args.repeats)
        results[backend] = (fwd, bwd, r.image)
        print(f"{backend:6s} forward {fwd * 1e3:8.2f} ms   backward {bwd * 1e3:8.2f} ms")
    diff = np.max(np.abs(results["numba"][2] - results["numpy"][2]))
    print(f"max |numba - numpy| image difference: {diff:.2e}")
    print(f"speedup forward {results['numpy'][0] / results['numba'][0]:.1f}x, "
          f"backward {results['numpy'][1] / results['numba'][1]:.1f}x")


if __name__ == "__main__":
    main()
