"""Per-frame camera tracking: correspondence lifting, PnP with RANSAC,
photometric pose refinement, depth-scale alignment, occlusion-mask
computation, and new-region unprojection.

Matches are (n,5) arrays with columns x_prev, y_prev, x_cur, y_cur, conf
(pixel units), as stored in the per-frame correspondence CSV files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoOverlap, PnPFailure
from .geometry import (Intrinsics, Pose, rotmat_to_quat, unproject_pixels)


# ---------------------------------------------------------------------------
# correspondence lifting
# ---------------------------------------------------------------------------

def lift_correspondences(matches: np.ndarray, depth_prev: np.ndarray,
                         alpha_prev: np.ndarray, pose_prev: Pose,
                         K: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Back-project matched pixels of the previous frame through its
    rendered depth. Matches without valid rendered depth are dropped.

    Returns (world points (m,3), current-frame pixels (m,2)).
    """
    matches = np.asarray(matches, dtype=np.float64).reshape(-1, 5)
    if len(matches) == 0:
        return np.zeros((0, 3)), np.zeros((0, 2))
    xp = matches[:, 0:2]
    xc = matches[:, 2:4]
    col = np.round(xp[:, 0]).astype(int)
    row = np.round(xp[:, 1]).astype(int)
    ok = (col >= 0) & (col < K.width) & (row >= 0) & (row < K.height)
    col_s, row_s = np.clip(col, 0, K.width - 1), np.clip(row, 0, K.height - 1)
    d = depth_prev[row_s, col_s]
    a = alpha_prev[row_s, col_s]
    ok &= (d > 0) & (a > 0.5)
    X = unproject_pixels(xp[ok], d[ok], K, pose_prev)
    return X, xc[ok]


# ---------------------------------------------------------------------------
# PnP + RANSAC
# ---------------------------------------------------------------------------

@dataclass
class PnPConfig:
    threshold_px: float = 2.0
    max_iters: int = 1000
    confidence: float = 0.999
    min_inliers: int = 12
    seed: int = 0


@dataclass
class PnPResult:
    pose: Pose                # camera-to-world
    inliers: np.ndarray       # bool mask over input correspondences


MIN_PNP_POINTS = 6  # minimal sample for the DLT solver


def _dlt_pose(X: np.ndarray, xn: np.ndarray):
    """DLT estimate of a world-to-camera (R, t) from >= 6 points given
    normalized image coordinates. Returns None on degeneracy."""
    n = len(X)
    A = np.zeros((2 * n, 12))
    Xh = np.concatenate([X, np.ones((n, 1))], axis=1)
    A[0::2, 0:4] = -Xh
    A[0::2, 8:12] = xn[:, 0:1] * Xh
    A[1::2, 4:8] = -Xh
    A[1::2, 8:12] = xn[:, 1:2] * Xh
    try:
        _, _, Vt = np.linalg.svd(A)
    except np.linalg.LinAlgError:
        return None
    P = Vt[-1].reshape(3, 4)
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    U, D, Vt2 = np.linalg.svd(M)
    scale = D.mean()
    if scale < 1e-12:
        return None
    R = U @ Vt2
    if np.linalg.det(R) < 0:
        return None
    t = P[:, 3] / scale
    # cheirality: most points must land in front of the camera
    z = X @ R[2] + t[2]
    if np.mean(z > 0) < 0.5:
        return None
    return R, t


def _reproj_errors(R: np.ndarray, t: np.ndarray, X: np.ndarray,
                   u: np.ndarray, K: Intrinsics) -> np.ndarray:
    pc = X @ R.T + t
    z = pc[:, 2]
    bad = z <= 1e-8
    zs = np.where(bad, 1.0, z)
    du = K.fx * pc[:, 0] / zs + K.cx - u[:, 0]
    dv = K.fy * pc[:, 1] / zs + K.cy - u[:, 1]
    err = np.hypot(du, dv)
    return np.where(bad, np.inf, err)


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0.0]])


def _gauss_newton_refine(R, t, X, u, K, iters=10):
    """Minimize squared pixel reprojection error over (R, t), left
    perturbation on the rotation."""
    for _ in range(iters):
        pc = X @ R.T + t
        z = np.maximum(pc[:, 2], 1e-8)
        pred = np.stack([K.fx * pc[:, 0] / z + K.cx,
                         K.fy * pc[:, 1] / z + K.cy], axis=1)
        r = (pred - u).reshape(-1)
        n = len(X)
        Jp = np.zeros((n, 2, 3))
        Jp[:, 0, 0] = K.fx / z
        Jp[:, 0, 2] = -K.fx * pc[:, 0] / z ** 2
        Jp[:, 1, 1] = K.fy / z
        Jp[:, 1, 2] = -K.fy * pc[:, 1] / z ** 2
        # p_c = R X + t; left perturbation: dp/dw = -[R X]_x
        RX = pc - t
        J = np.zeros((n, 2, 6))
        for i in range(n):
            J[i, :, :3] = -Jp[i] @ _skew(RX[i])
            J[i, :, 3:] = Jp[i]
        Jf = J.reshape(-1, 6)
        H = Jf.T @ Jf + 1e-9 * np.eye(6)
        g = Jf.T @ r
        try:
            delta = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        w, dt = delta[:3], delta[3:]
        theta = np.linalg.norm(w)
        if theta > 1e-14:
            ax = w / theta
            Kx = _skew(ax)
            dR = np.eye(3) + np.sin(theta) * Kx + (1 - np.cos(theta)) * Kx @ Kx
        else:
            dR = np.eye(3) + _skew(w)
        R = dR @ R
        t = t + dt
        if np.linalg.norm(delta) < 1e-14:
            break
    return R, t


def solve_pnp_ransac(X: np.ndarray, u: np.ndarray, K: Intrinsics,
                     config: PnPConfig = None) -> PnPResult:
    """Robust pose from 2D-3D correspondences: RANSAC over minimal DLT
    samples, then Gauss-Newton refinement on the inlier set.

    Raises PnPFailure('TooFewMatches' | 'TooFewInliers' | 'Degenerate').
    """
    config = config or PnPConfig()
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    u = np.asarray(u, dtype=np.float64).reshape(-1, 2)
    n = len(X)
    if n < MIN_PNP_POINTS:
        raise PnPFailure("TooFewMatches")
    xn = np.stack([(u[:, 0] - K.cx) / K.fx, (u[:, 1] - K.cy) / K.fy], axis=1)
    rng = np.random.default_rng(config.seed)

    best = None
    best_count = 0
    needed = config.max_iters
    it = 0
    any_solution = False
    while it < min(needed, config.max_iters):
        sample = rng.choice(n, MIN_PNP_POINTS, replace=False)
        sol = _dlt_pose(X[sample], xn[sample])
        it += 1
        if sol is None:
            continue
        any_solution = True
        errs = _reproj_errors(sol[0], sol[1], X, u, K)
        count = int(np.sum(errs < config.threshold_px))
        if count > best_count:
            best_count = count
            best = sol
            w = max(count / n, 1e-3)
            denom = np.log(max(1e-12, 1.0 - w ** MIN_PNP_POINTS))
            needed = int(np.ceil(np.log(1.0 - config.confidence) / denom))
    if best is None:
        raise PnPFailure("Degenerate" if not any_solution else "TooFewInliers")
    if best_count < config.min_inliers:
        raise PnPFailure("TooFewInliers")

    inliers = _reproj_errors(best[0], best[1], X, u, K) < config.threshold_px
    R, t = _gauss_newton_refine(best[0], best[1], X[inliers], u[inliers], K)
    inliers = _reproj_errors(R, t, X, u, K) < config.threshold_px
    if int(inliers.sum()) < config.min_inliers:
        raise PnPFailure("TooFewInliers")
    # convert world-to-camera -> camera-to-world
    pose = Pose(rotmat_to_quat(R.T), -R.T @ t)
    return PnPResult(pose=pose, inliers=inliers)


def refine_pose_depth_weighted(pose: Pose, X: np.ndarray, u: np.ndarray,
                               K: Intrinsics, cam_lift: np.ndarray,
                               sigma_ratio: float = 0.01,
                               eps_px: float = 0.05,
                               iters: int = 15) -> Pose:
    """Gauss-Newton pose refinement weighting each residual by the inverse
    of its expected noise covariance.

    The 3D points come from lifting pixels through a noisy depth map, so
    their error lies along the ray from the lifting camera at cam_lift,
    with standard deviation sigma_ratio relative to the ray length. Each
    residual gets the 2x2 covariance e e^T + eps_px^2 I, where e is that
    ray error pushed through the projection Jacobian; inverting it
    downweights the depth-noise direction while keeping the transverse
    direction, which depth noise cannot corrupt, at full strength.
    """
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    u = np.asarray(u, dtype=np.float64).reshape(-1, 2)
    n = len(X)
    if n < MIN_PNP_POINTS:
        return pose
    R = pose.R.T
    t = -R @ pose.t
    ray = X - np.asarray(cam_lift, dtype=np.float64)
    eye2 = (eps_px * eps_px) * np.eye(2)
    for _ in range(iters):
        pc = X @ R.T + t
        z = np.maximum(pc[:, 2], 1e-8)
        pred = np.stack([K.fx * pc[:, 0] / z + K.cx,
                         K.fy * pc[:, 1] / z + K.cy], axis=1)
        r = pred - u
        Jp = np.zeros((n, 2, 3))
        Jp[:, 0, 0] = K.fx / z
        Jp[:, 0, 2] = -K.fx * pc[:, 0] / z ** 2
        Jp[:, 1, 1] = K.fy / z
        Jp[:, 1, 2] = -K.fy * pc[:, 1] / z ** 2
        e = (Jp @ (ray @ R.T)[:, :, None])[:, :, 0] * sigma_ratio
        C = e[:, :, None] * e[:, None, :] + eye2
        W = np.linalg.inv(C)
        # p_c = R X + t; left perturbation: dp/dw = -[R X]_x
        RX = pc - t
        J = np.empty((n, 2, 6))
        J[:, :, 3:] = Jp
        J[:, :, 0] = Jp[:, :, 2] * RX[:, None, 1] - Jp[:, :, 1] * RX[:, None, 2]
        J[:, :, 1] = Jp[:, :, 0] * RX[:, None, 2] - Jp[:, :, 2] * RX[:, None, 0]
        J[:, :, 2] = Jp[:, :, 1] * RX[:, None, 0] - Jp[:, :, 0] * RX[:, None, 1]
        WJ = W @ J
        H = np.tensordot(J, WJ, axes=([0, 1], [0, 1])) + 1e-9 * np.eye(6)
        g = np.tensordot(WJ, r, axes=([0, 1], [0, 1]))
        try:
            delta = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        w, dt = delta[:3], delta[3:]
        theta = np.linalg.norm(w)
        if theta > 1e-14:
            ax = w / theta
            Kx = _skew(ax)
            dR = np.eye(3) + np.sin(theta) * Kx + (1 - np.cos(theta)) * Kx @ Kx
        else:
            dR = np.eye(3) + _skew(w)
        R = dR @ R
        t = t + dt
        if np.linalg.norm(delta) < 1e-14:
            break
    return Pose(rotmat_to_quat(R.T), -R.T @ t)


# ---------------------------------------------------------------------------
# photometric refinement
# ---------------------------------------------------------------------------

def refine_pose_photometric(scene, init_pose: Pose, image: np.ndarray,
                            iters: int = 100, lr: float = 2e-3,
                            diverge_patience: int = 10) -> Pose:
    """Gradient descent on the pose only, minimizing masked squared color
    error between the render and the observation. Never returns a pose
    with a higher masked loss than the input."""
    from . import renderer  # deferred: renderer imports scene types
    from .optim import Adam

    params = {"pose": init_pose.to_array().copy()}
    opt = Adam(params, {"pose": lr})

    def masked_loss_and_grad(pose):
        out = renderer.render(scene, pose)
        mask = out.alpha > 0.5
        diff = (out.color - image) * mask[:, :, None]
        loss = float(np.sum(diff * diff))
        return loss, out, 2.0 * diff

    best_pose = init_pose
    best_loss, _, _ = masked_loss_and_grad(init_pose)
    bad_streak = 0
    prev_loss = best_loss
    for _ in range(iters):
        pose = Pose.from_array(params["pose"])
        loss, out, dcol = masked_loss_and_grad(pose)
        if loss < best_loss:
            best_loss = loss
            best_pose = pose
        bad_streak = bad_streak + 1 if loss > prev_loss else 0
        prev_loss = loss
        if bad_streak >= diverge_patience:
            break
        g = renderer.render_backward(scene, out, dcol)
        opt.step({"pose": np.concatenate([g.pose_q, g.pose_t])})
        params["pose"][:4] /= np.linalg.norm(params["pose"][:4])
    final = Pose.from_array(params["pose"])
    loss, _, _ = masked_loss_and_grad(final)
    if loss < best_loss:
        best_pose = final
    return best_pose


# ---------------------------------------------------------------------------
# depth-scale alignment and occlusion masking
# ---------------------------------------------------------------------------

def align_depth_scale(d_rendered: np.ndarray, d_align: np.ndarray,
                      valid: np.ndarray = None,
                      min_valid: int = 100) -> float:
    """Least-squares scale s minimizing ||d_rendered - s * d_align|| over
    jointly valid pixels."""
    if d_rendered.shape != d_align.shape:
        raise ValueError("depth maps must have the same shape")
    mask = (d_rendered > 0) & (d_align > 0)
    if valid is not None:
        mask &= valid
    if int(mask.sum()) < min_valid:
        raise NoOverlap(f"only {int(mask.sum())} jointly valid pixels")
    a = d_align[mask]
    return float(np.dot(d_rendered[mask], a) / np.dot(a, a))


def forward_warp_depth(depth_prev: np.ndarray, pose_prev: Pose, pose_t: Pose,
                       K: Intrinsics) -> np.ndarray:
    """Point-splat z-buffer warp of depth_prev into frame t; 0 where no
    point lands."""
    h, w = depth_prev.shape
    warped = np.full((h, w), np.inf)
    rr, cc = np.nonzero(depth_prev > 0)
    if len(rr):
        pix = np.stack([cc, rr], axis=1).astype(np.float64)
        X = unproject_pixels(pix, depth_prev[rr, cc], K, pose_prev)
        pc = (X - pose_t.t) @ pose_t.R
        z = pc[:, 2]
        front = z > 1e-8
        pc, z = pc[front], z[front]
        u = np.round(K.fx * pc[:, 0] / z + K.cx).astype(int)
        v = np.round(K.fy * pc[:, 1] / z + K.cy).astype(int)
        inb = (u >= 0) & (u < w) & (v >= 0) & (v < h)
        np.minimum.at(warped, (v[inb], u[inb]), z[inb])
    warped[~np.isfinite(warped)] = 0.0
    return warped


def detect_new_regions(depth_prev: np.ndarray, pose_prev: Pose, pose_t: Pose,
                       depth_scaled_t: np.ndarray, K: Intrinsics,
                       rel_tol: float = 0.05) -> np.ndarray:
    """Occlusion mask over frame t: true where nothing warps in from the
    previous frame, or where the warped depth lies behind the new depth
    by more than rel_tol relative difference (disocclusion)."""
    warped = forward_warp_depth(depth_prev, pose_prev, pose_t, K)
    mask = warped <= 0
    both = (warped > 0) & (depth_scaled_t > 0)
    rel = np.zeros_like(warped)
    rel[both] = (warped[both] - depth_scaled_t[both]) / depth_scaled_t[both]
    mask |= both & (rel > rel_tol)
    return mask


def unproject_new_anchors(depth_scaled_t: np.ndarray, mask: np.ndarray,
                          pose_t: Pose, K: Intrinsics) -> np.ndarray:
    """World points for every masked pixel with positive depth."""
    rr, cc = np.nonzero(mask & (depth_scaled_t > 0))
    if len(rr) == 0:
        return np.zeros((0, 3))
    pix = np.stack([cc, rr], axis=1).astype(np.float64)
    return unproject_pixels(pix, depth_scaled_t[rr, cc], K, pose_t)
