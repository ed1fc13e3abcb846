"""Image quality (PSNR, SSIM) and trajectory (ATE, RPE) metrics.

ATE aligns with a closed-form 7-DoF similarity (monocular reconstructions
are scale-free); RPE is reported per consecutive-frame step, translation
in aligned-reference units and rotation in degrees.
"""

from __future__ import annotations

import numpy as np

from .errors import LengthMismatch, ShapeMismatch, TooSmall
from .geometry import Pose

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0,1]; identical images report 99.0."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with a 1D window applied on both axes."""
    size = len(w)
    h, we = img.shape
    out = np.zeros((h - size + 1, we - size + 1))
    tmp = np.zeros((h, we - size + 1))
    for i in range(size):
        tmp += w[i] * img[:, i:we - size + 1 + i]
    for i in range(size):
        out += w[i] * tmp[i:h - size + 1 + i, :]
    return out


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 1.0) -> float:
    """Mean local SSIM over valid 11x11 Gaussian windows, averaged across
    channels."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < window or a.shape[1] < window:
        raise TooSmall(f"image smaller than the {window}x{window} window")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    w = _gaussian_window(window, sigma)
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx = _filter_valid(x, w)
        my = _filter_valid(y, w)
        mxx = _filter_valid(x * x, w)
        myy = _filter_valid(y * y, w)
        mxy = _filter_valid(x * y, w)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)
             / ((mx * mx + my * my + c1) * (vx + vy + c2)))
        vals.append(np.mean(s))
    return float(np.mean(vals))


def umeyama_alignment(src: np.ndarray, dst: np.ndarray):
    """Closed-form similarity (s, R, t) minimizing ||dst - (s R src + t)||^2."""
    src, dst = np.asarray(src, dtype=np.float64), np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    var_s = np.mean(np.sum(xs * xs, axis=1))
    scale = np.trace(np.diag(D) @ S) / var_s if var_s > 0 else 1.0
    t = mu_d - scale * R @ mu_s
    return scale, R, t


def ate(est: list[Pose], ref: list[Pose]) -> float:
    """RMSE of position residuals after 7-DoF alignment of est onto ref."""
    if len(est) != len(ref):
        raise LengthMismatch(f"{len(est)} vs {len(ref)} poses")
    if len(est) < 3:
        raise LengthMismatch("need at least 3 poses")
    p_est = np.array([p.t for p in est])
    p_ref = np.array([p.t for p in ref])
    s, R, t = umeyama_alignment(p_est, p_ref)
    resid = p_ref - (s * (p_est @ R.T) + t)
    return float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))


def rpe(est: list[Pose], ref: list[Pose], delta: int = 1) -> tuple[float, float]:
    """Relative pose error at step `delta`: (translation RMSE, rotation
    RMSE in degrees)."""
    if len(est) != len(ref):
        raise LengthMismatch(f"{len(est)} vs {len(ref)} poses")
    if len(est) < delta + 1:
        raise LengthMismatch("trajectory shorter than delta + 1")
    terrs, rerrs = [], []
    for i in range(len(est) - delta):
        rel_ref = ref[i].inverse().compose(ref[i + delta])
        rel_est = est[i].inverse().compose(est[i + delta])
        e = rel_ref.inverse().compose(rel_est)
        terrs.append(np.linalg.norm(e.t))
        w = min(1.0, abs(float(e.q[0])))
        rerrs.append(np.degrees(2.0 * np.arccos(w)))
    return (float(np.sqrt(np.mean(np.square(terrs)))),
            float(np.sqrt(np.mean(np.square(rerrs)))))


def metrics_report(per_frame: list[tuple[int, float, float]],
                   summary: dict) -> str:
    """CSV of per-frame image metrics plus a fixed-key-order summary block."""
    lines = ["frame,psnr,ssim"]
    for frame, p, s in per_frame:
        lines.append(f"{frame},{p:.6f},{s:.6f}")
    keys = ["psnr_mean", "ssim_mean", "ate", "rpe_t", "rpe_r"]
    body = ", ".join(
        f"{k}: " + (f"{summary[k]:.6f}" if summary.get(k) is not None else "n/a")
        for k in keys)
    lines.append("{" + body + "}")
    return "\n".join(lines) + "\n"
