"""Vectorized Gaussian projection for the rasterizer: 3D means/covariances
to pixel means, 2D conics and splat radii, with the matching backward pass
(gradients to 3D Gaussian parameters and the camera pose)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import (COV2D_REGULARIZER, NEAR_PLANE, Intrinsics, Pose,
                        quat_rotmat_backward, quats_rotmats_backward,
                        quats_to_rotmats)


@dataclass
class ProjectedGaussians:
    pix: np.ndarray        # (M,2) projected means
    depth: np.ndarray      # (M,) camera-frame z
    conic: np.ndarray      # (M,3) packed inverse 2D covariance (a,b,c)
    radius: np.ndarray     # (M,) 3-sigma splat radius in pixels
    valid: np.ndarray      # (M,) bool
    order: np.ndarray      # indices of valid Gaussians, front-to-back
    # caches for the backward pass
    p_cam: np.ndarray = None
    R3: np.ndarray = None
    s2: np.ndarray = None
    cov_cam: np.ndarray = None
    cov2: np.ndarray = None
    J: np.ndarray = None
    Wr: np.ndarray = None


@dataclass
class ProjectionGrads:
    d_means: np.ndarray
    d_quats: np.ndarray
    d_log_scales: np.ndarray
    d_pose_q: np.ndarray
    d_pose_t: np.ndarray


def project_gaussians(means: np.ndarray, quats: np.ndarray,
                      log_scales: np.ndarray, pose: Pose, K: Intrinsics,
                      near: float = NEAR_PLANE,
                      regularizer: float = COV2D_REGULARIZER) -> ProjectedGaussians:
    M = len(means)
    Wr = pose.R.T
    p_cam = (means - pose.t) @ Wr.T
    z = np.ascontiguousarray(p_cam[:, 2])  # kernel needs a contiguous view
    valid = z > near
    zs = np.where(valid, z, 1.0)

    pix = np.empty((M, 2))
    pix[:, 0] = K.fx * p_cam[:, 0] / zs + K.cx
    pix[:, 1] = K.fy * p_cam[:, 1] / zs + K.cy

    R3 = quats_to_rotmats(quats)
    s2 = np.exp(2.0 * log_scales)
    cov3 = (R3 * s2[:, None, :]) @ R3.transpose(0, 2, 1)
    cov_cam = (Wr @ cov3) @ Wr.T

    J = np.zeros((M, 2, 3))
    J[:, 0, 0] = K.fx / zs
    J[:, 0, 2] = -K.fx * p_cam[:, 0] / (zs * zs)
    J[:, 1, 1] = K.fy / zs
    J[:, 1, 2] = -K.fy * p_cam[:, 1] / (zs * zs)
    cov2 = (J @ cov_cam) @ J.transpose(0, 2, 1)
    cov2 = 0.5 * (cov2 + cov2.transpose(0, 2, 1))
    cov2[:, 0, 0] += regularizer
    cov2[:, 1, 1] += regularizer

    A, B, C = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = A * C - B * B
    valid &= det > 1e-24
    det_s = np.where(det > 1e-24, det, 1.0)
    conic = np.stack([C / det_s, -B / det_s, A / det_s], axis=1)

    mid = 0.5 * (A + C)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det_s, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))

    # cull splats that cannot touch the image
    valid &= (pix[:, 0] + radius >= 0) & (pix[:, 0] - radius <= K.width - 1)
    valid &= (pix[:, 1] + radius >= 0) & (pix[:, 1] - radius <= K.height - 1)

    idx = np.nonzero(valid)[0]
    order = idx[np.lexsort((idx, z[idx]))]

    return ProjectedGaussians(pix=pix, depth=z, conic=conic, radius=radius,
                              valid=valid, order=order,
                              p_cam=p_cam, R3=R3, s2=s2, cov_cam=cov_cam,
                              cov2=cov2, J=J, Wr=Wr)


def project_gaussians_backward(proj: ProjectedGaussians, means: np.ndarray,
                               quats: np.ndarray, log_scales: np.ndarray,
                               pose: Pose, K: Intrinsics,
                               d_pix: np.ndarray, d_conic: np.ndarray,
                               d_depth: np.ndarray) -> ProjectionGrads:
    """Chain kernel gradients (pixel mean, conic, blend depth) back to 3D
    Gaussian parameters and the pose. Invalid Gaussians receive zeros."""
    M = len(means)
    v = proj.valid
    Wr = proj.Wr
    p_cam = proj.p_cam
    z = np.where(v, proj.depth, 1.0)

    # conic = inv(cov2): dL/dcov2 = -P G P with G the full-matrix gradient
    G = np.zeros((M, 2, 2))
    G[:, 0, 0] = d_conic[:, 0]
    G[:, 0, 1] = 0.5 * d_conic[:, 1]
    G[:, 1, 0] = 0.5 * d_conic[:, 1]
    G[:, 1, 1] = d_conic[:, 2]
    P = np.zeros((M, 2, 2))
    det = proj.cov2[:, 0, 0] * proj.cov2[:, 1, 1] - proj.cov2[:, 0, 1] ** 2
    det_s = np.where(np.abs(det) > 1e-24, det, 1.0)
    P[:, 0, 0] = proj.cov2[:, 1, 1] / det_s
    P[:, 0, 1] = -proj.cov2[:, 0, 1] / det_s
    P[:, 1, 0] = P[:, 0, 1]
    P[:, 1, 1] = proj.cov2[:, 0, 0] / det_s
    d_cov2 = -(P @ G @ P)
    d_cov2 *= v[:, None, None]

    J = proj.J
    cov_cam = proj.cov_cam
    d_J = 2.0 * ((d_cov2 @ J) @ cov_cam.transpose(0, 2, 1))
    d_cov_cam = J.transpose(0, 2, 1) @ d_cov2 @ J
    d_cov3 = (Wr.T @ d_cov_cam) @ Wr

    # cov3 = R diag(s^2) R^T
    R3 = proj.R3
    d_R3 = 2.0 * (d_cov3 @ R3) * proj.s2[:, None, :]
    d_s2 = np.sum(R3 * (d_cov3 @ R3), axis=1)
    d_log_scales = 2.0 * proj.s2 * d_s2
    d_quats = quats_rotmats_backward(quats, d_R3)

    # pixel projection: rows of J are du/dp_cam, dv/dp_cam
    d_pix_v = d_pix * v[:, None]
    d_pcam = (d_pix_v[:, None, :] @ J)[:, 0, :]
    d_pcam[:, 2] += d_depth * v
    # J itself depends on p_cam
    fx, fy = K.fx, K.fy
    d_pcam[:, 0] += d_J[:, 0, 2] * (-fx / (z * z))
    d_pcam[:, 1] += d_J[:, 1, 2] * (-fy / (z * z))
    d_pcam[:, 2] += (d_J[:, 0, 0] * (-fx / (z * z))
                     + d_J[:, 0, 2] * (2.0 * fx * p_cam[:, 0] / (z ** 3))
                     + d_J[:, 1, 1] * (-fy / (z * z))
                     + d_J[:, 1, 2] * (2.0 * fy * p_cam[:, 1] / (z ** 3)))
    d_pcam *= v[:, None]

    # p_cam = Wr (mu - t)
    d_means = d_pcam @ Wr
    d_t = -d_means.sum(axis=0)
    d_Wr = d_pcam.T @ (means - pose.t)
    d_Wr += 2.0 * ((d_cov_cam @ Wr) @ _cov3(proj)).sum(axis=0)
    d_pose_q = quat_rotmat_backward(pose.q, d_Wr.T)

    return ProjectionGrads(d_means=d_means, d_quats=d_quats,
                           d_log_scales=d_log_scales,
                           d_pose_q=d_pose_q, d_pose_t=d_t)


def _cov3(proj: ProjectedGaussians) -> np.ndarray:
    return (proj.R3 * proj.s2[:, None, :]) @ proj.R3.transpose(0, 2, 1)
