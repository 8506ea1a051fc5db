"""Compare the compiled and numpy rasterizer kernels.

Usage: python3 benchmarks/bench_raster.py [--res 64] [--repeat 5]

The workload is the textured-sphere scene reconstructed from four input
views, one Gaussian per foreground pixel, rendered from a held-out view.
"""

import argparse
import time

import numpy as np

from splatmaps import data
from splatmaps.core import DepthMap, depth_to_pointmap
from splatmaps.gsmap import GaussianSet
from splatmaps.splat import backend, rasterize, rasterize_backward


def sphere_workload(res: int):
    b = data.render_bundle(data.textured_sphere_scene(), data.protocol_views("eval16", 16), res, 100)
    pts, cols, sc = [], [], []
    for v in range(4):
        m = b.alpha[v] > 0.5
        pm = depth_to_pointmap(DepthMap(np.where(m, b.depth[v], 0.0), m), b.cameras[v])
        pts.append(pm.values[m])
        cols.append(b.rgb[v][m])
        sc.append(b.depth[v][m] / b.cameras[v].fx)
    pts, cols, s = np.concatenate(pts), np.concatenate(cols), np.concatenate(sc)
    n = len(pts)
    gs = GaussianSet(pts, np.repeat(s[:, None], 3, 1), np.tile([1.0, 0, 0, 0], (n, 1)), np.full(n, 0.8), cols)
    return gs, b.cameras[5]


def timed(fn, repeat):
    fn()
    t = time.perf_counter()
    for _ in range(repeat):
        out = fn()
    return (time.perf_counter() - t) / repeat * 1e3, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--res", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    gs, cam = sphere_workload(args.res)
    g_rgb = np.ones((cam.height, cam.width, 3))
    g_a = np.ones((cam.height, cam.width))
    print(f"{len(gs)} Gaussians at {args.res}x{args.res}")
    print(f"{'backend':8s} {'forward ms':>11s} {'backward ms':>12s}")
    results = {}
    for name in backend.available():
        backend.use(name)
        fwd, (out, state) = timed(lambda: rasterize(gs, cam, return_state=True), args.repeat)
        bwd, grads = timed(lambda: rasterize_backward(gs, cam, g_rgb, g_a, state=state), args.repeat)
        results[name] = (out, grads)
        print(f"{name:8s} {fwd:11.1f} {bwd:12.1f}")
    if len(results) == 2:
        (o1, g1), (o2, g2) = results.values()
        print(f"max |rgb diff| {np.abs(o1.rgb - o2.rgb).max():.2e}, "
              f"max |grad diff| {np.abs(g1.as_array() - g2.as_array()).max():.2e}")


if __name__ == "__main__":
    main()
