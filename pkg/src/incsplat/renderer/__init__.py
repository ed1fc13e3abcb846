"""CPU differentiable rasterizer for decoded anchor Gaussians.

Forward: decode visible anchors for the view, project to 2D, sort
front-to-back by camera depth, and alpha-blend color and depth per pixel
with per-pixel contributor lists retained. Backward: chain upstream image
gradients through the blend, the 2D projection, and the decoder, down to
anchor features, offsets, decoder weights, and the camera pose.

The per-pixel blending kernel has two interchangeable implementations: a
compiled Cython extension and a pure-numpy fallback, selected at import
(override with INCSPLAT_KERNEL=c|py).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import StaleSnapshot
from ..geometry import Intrinsics, Pose
from ..scene import DecodedGaussians, SceneModel
from . import kernels_py
from .projection import (ProjectedGaussians, project_gaussians,
                         project_gaussians_backward)

_choice = os.environ.get("INCSPLAT_KERNEL", "")
if _choice == "py":
    _kernels = kernels_py
else:
    try:
        from . import _kernels_c as _kernels
    except ImportError:
        if _choice == "c":
            raise
        _kernels = kernels_py


def active_kernel() -> str:
    """Name of the blending kernel in use: 'c' (compiled) or 'py'."""
    return "py" if _kernels is kernels_py else "c"


@dataclass
class RenderCache:
    scene_version: int
    pose: Pose
    anchor_idx: np.ndarray
    decoded: DecodedGaussians
    proj: ProjectedGaussians
    n_contrib: np.ndarray
    contrib_idx: np.ndarray
    contrib_alpha: np.ndarray
    depth_blend: np.ndarray = None  # unnormalized blend sum, for backward


@dataclass
class RenderOutput:
    color: np.ndarray      # (H,W,3) in [0,1]
    depth: np.ndarray      # (H,W) alpha-normalized expected depth, 0 empty
    alpha: np.ndarray      # (H,W) accumulated opacity
    cache: RenderCache = None


# any pixel with a contributor has alpha >= 1/255; this gate only skips
# truly empty pixels in the depth normalization
_ALPHA_EPS = 1e-6


def _normalize_depth(depth_blend: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    safe = np.where(alpha > _ALPHA_EPS, alpha, 1.0)
    return np.where(alpha > _ALPHA_EPS, depth_blend / safe, 0.0)


@dataclass
class RenderGrads:
    """Gradients aligned to the scene's parameter layout.

    `features`/`offsets` rows correspond to `anchor_idx`; `pose_q`/`pose_t`
    are with respect to the raw quaternion and translation of the view pose.
    """

    anchor_idx: np.ndarray
    features: np.ndarray
    offsets: np.ndarray
    decoder: dict[str, np.ndarray]
    pose_q: np.ndarray
    pose_t: np.ndarray


def _run_kernel_forward(proj: ProjectedGaussians, dg: DecodedGaussians,
                        K: Intrinsics, n_threads: int, max_contrib: int):
    args = (proj.order.astype(np.int64), proj.pix, proj.conic,
            dg.opacities, dg.colors, proj.depth, proj.radius)
    if n_threads <= 1 or K.height < 2 * n_threads:
        return _kernels.forward_blend(*args, K.width, K.height,
                                      max_contrib=max_contrib)
    bounds = np.linspace(0, K.height, n_threads + 1).astype(int)
    with ThreadPoolExecutor(n_threads) as ex:
        futs = [ex.submit(_kernels.forward_blend, *args, K.width, K.height,
                          int(bounds[i]), int(bounds[i + 1]),
                          max_contrib) for i in range(n_threads)]
        parts = [f.result() for f in futs]
    return tuple(np.concatenate([p[j] for p in parts], axis=0) for j in range(6))


def render(scene: SceneModel, pose: Pose, anchor_idx: np.ndarray = None,
           n_threads: int = 1, max_contrib: int = 64,
           retain_cache: bool = True) -> RenderOutput:
    """Render the scene from `pose` with the scene's intrinsics.

    An empty scene (or empty visible set) renders black with zero depth
    and alpha.
    """
    K = scene.intrinsics
    if anchor_idx is None:
        anchor_idx = scene.gather_visible(pose)
    if len(anchor_idx) == 0:
        out = RenderOutput(color=np.zeros((K.height, K.width, 3)),
                           depth=np.zeros((K.height, K.width)),
                           alpha=np.zeros((K.height, K.width)))
        if retain_cache:
            out.cache = RenderCache(scene.version, pose, np.asarray(anchor_idx),
                                    None, None, None, None, None)
        return out

    dg = scene.decode(anchor_idx, pose.t)
    proj = project_gaussians(dg.means, dg.quats, dg.log_scales, pose, K)
    color, depth_blend, alpha, n, cidx, calpha = _run_kernel_forward(
        proj, dg, K, n_threads, max_contrib)
    out = RenderOutput(color=color, depth=_normalize_depth(depth_blend, alpha),
                       alpha=alpha)
    if retain_cache:
        out.cache = RenderCache(scene.version, pose, np.asarray(anchor_idx),
                                dg, proj, n, cidx, calpha,
                                depth_blend=depth_blend)
    return out


def render_backward(scene: SceneModel, out: RenderOutput,
                    dL_dcolor: np.ndarray, dL_ddepth: np.ndarray = None,
                    dL_dalpha: np.ndarray = None) -> RenderGrads:
    """Backward pass for a forward render with a retained cache."""
    cache = out.cache
    if cache is None:
        raise ValueError("render was called without retain_cache")
    if cache.scene_version != scene.version:
        raise StaleSnapshot("scene mutated since the forward pass")
    K = scene.intrinsics
    if dL_ddepth is None:
        dL_ddepth = np.zeros((K.height, K.width))
    if cache.decoded is None:  # empty render
        F = scene.decoder.feature_dim
        return RenderGrads(cache.anchor_idx,
                           np.zeros((0, F)), np.zeros((0, scene.k, 3)),
                           scene.decoder.zero_grads(),
                           np.zeros(4), np.zeros(3))

    dg, proj = cache.decoded, cache.proj
    # out.depth = S / A with S the blend sum and A the accumulated alpha:
    # route the normalized-depth gradient to both kernel outputs
    live = out.alpha > _ALPHA_EPS
    A = np.where(live, out.alpha, 1.0)
    d_blend = np.where(live, dL_ddepth / A, 0.0)
    d_alpha_n = np.where(live, -dL_ddepth * cache.depth_blend / (A * A), 0.0)
    if dL_dalpha is not None:
        d_alpha_n = d_alpha_n + dL_dalpha
    d_mean2d, d_conic, d_opac, d_color, d_depth = _kernels.backward_blend(
        cache.n_contrib, cache.contrib_idx, cache.contrib_alpha,
        proj.pix, proj.conic, dg.opacities, dg.colors, proj.depth,
        np.ascontiguousarray(dL_dcolor, dtype=np.float64),
        np.ascontiguousarray(d_blend, dtype=np.float64),
        np.ascontiguousarray(d_alpha_n, dtype=np.float64))

    pg = project_gaussians_backward(proj, dg.means, dg.quats, dg.log_scales,
                                    cache.pose, K, d_mean2d, d_conic, d_depth)
    dec = scene.decode_backward(dg, pg.d_means, d_opac, d_color,
                                pg.d_quats, pg.d_log_scales)
    # camera center is the pose translation: add the decoder-input path
    pose_t = pg.d_pose_t + dec.camera_center
    return RenderGrads(anchor_idx=cache.anchor_idx,
                       features=dec.features, offsets=dec.offsets,
                       decoder=dec.decoder,
                       pose_q=pg.d_pose_q, pose_t=pose_t)


def render_raw_gaussians(means, quats, log_scales, opacities, colors,
                         pose: Pose, K: Intrinsics,
                         max_contrib: int = 64) -> RenderOutput:
    """Forward-only render of an explicit Gaussian list (no anchors).

    Used by the synthetic prior generator and by oracle tests.
    """
    proj = project_gaussians(np.asarray(means, dtype=np.float64),
                             np.asarray(quats, dtype=np.float64),
                             np.asarray(log_scales, dtype=np.float64),
                             pose, K)
    color, depth_blend, alpha, *_ = _kernels.forward_blend(
        proj.order.astype(np.int64), proj.pix, proj.conic,
        np.asarray(opacities, dtype=np.float64),
        np.asarray(colors, dtype=np.float64),
        proj.depth, proj.radius, K.width, K.height, max_contrib=max_contrib)
    return RenderOutput(color=color, depth=_normalize_depth(depth_blend, alpha),
                        alpha=alpha)
