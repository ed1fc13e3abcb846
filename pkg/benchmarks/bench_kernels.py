"""Benchmark the compiled blending kernel against the pure-numpy twin.

Run:  python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from incsplat.geometry import Intrinsics, Pose
from incsplat.renderer import kernels_py
from incsplat.renderer.projection import project_gaussians

try:
    from incsplat.renderer import _kernels_c as kernels_c
except ImportError:
    kernels_c = None


def make_inputs(n_gauss: int, width: int, height: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    K = Intrinsics(0.9 * width, 0.9 * width,
                   (width - 1) / 2, (height - 1) / 2, width, height)
    means = rng.uniform(-1, 1, (n_gauss, 3)) * np.array([1.5, 1.1, 0.8])
    means[:, 2] += 4.0
    quats = rng.normal(size=(n_gauss, 4))
    log_scales = np.log(rng.uniform(0.03, 0.12, (n_gauss, 3)))
    pose = Pose(np.array([1.0, 0, 0, 0]), np.zeros(3))
    proj = project_gaussians(means, quats, log_scales, pose, K)
    opac = rng.uniform(0.3, 0.9, n_gauss)
    colors = rng.uniform(0, 1, (n_gauss, 3))
    return K, proj, opac, colors


def run(kernels, K, proj, opac, colors, reps: int):
    args = (proj.order.astype(np.int64), proj.pix, proj.conic,
            opac, colors, proj.depth, proj.radius, K.width, K.height)
    t0 = time.perf_counter()
    for _ in range(reps):
        fwd = kernels.forward_blend(*args)
    t_fwd = (time.perf_counter() - t0) / reps
    color, depth, alpha, n, cidx, calpha = fwd
    h, w = K.height, K.width
    dcol = np.ones((h, w, 3))
    ddep = np.ones((h, w))
    t0 = time.perf_counter()
    for _ in range(reps):
        kernels.backward_blend(n, cidx, calpha, proj.pix, proj.conic,
                               opac, colors, proj.depth, dcol, ddep, None)
    t_bwd = (time.perf_counter() - t0) / reps
    return t_fwd, t_bwd, fwd


def main():
    print(f"{'config':<28}{'kernel':<8}{'forward':>12}{'backward':>12}")
    for n_gauss, w, h, reps in [(500, 64, 48, 20), (2000, 64, 48, 10),
                                (2000, 128, 96, 5), (8000, 128, 96, 3)]:
        K, proj, opac, colors = make_inputs(n_gauss, w, h)
        results = {}
        for name, mod in (("py", kernels_py), ("c", kernels_c)):
            if mod is None:
                continue
            t_fwd, t_bwd, fwd = run(mod, K, proj, opac, colors, reps)
            results[name] = fwd
            print(f"{n_gauss:>5} gauss {w}x{h:<10}{name:<8}"
                  f"{t_fwd * 1e3:>10.2f}ms{t_bwd * 1e3:>10.2f}ms")
        if len(results) == 2:
            diff = max(float(np.max(np.abs(results['py'][i] - results['c'][i])))
                       for i in (0, 1, 2))
            print(f"{'':>28}max |py - c| image diff: {diff:.3g}")


if __name__ == "__main__":
    main()
