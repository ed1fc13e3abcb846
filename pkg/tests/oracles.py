"""Independent scalar reference implementations used as test oracles.

Everything here is deliberately written as plain per-element loops with no
code shared with the package, so agreement is meaningful evidence.
"""

import numpy as np


# ---------------------------------------------------------------------------
# alpha blending (per-pixel scalar walk in depth order)
# ---------------------------------------------------------------------------

def blend_pixel(px, py, order, means2d, conics, opacities, colors, depths,
                max_contrib=64, stop_t=1e-4, alpha_min=1.0 / 255.0,
                radii=None):
    """Front-to-back composite of one pixel; mirrors the kernel contract."""
    color = np.zeros(3)
    depth = 0.0
    T = 1.0
    n = 0
    for g in order:
        if radii is not None:
            r = radii[g]
            mx, my = means2d[g]
            if not (np.ceil(mx - r) <= px <= np.floor(mx + r)
                    and np.ceil(my - r) <= py <= np.floor(my + r)):
                continue
        a, b, c = conics[g]
        dx = px - means2d[g][0]
        dy = py - means2d[g][1]
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        a_eff = min(opacities[g] * np.exp(power), 1.0)
        if a_eff < alpha_min:
            continue
        if T <= stop_t or n >= max_contrib:
            continue
        w = a_eff * T
        color = color + w * colors[g]
        depth = depth + w * depths[g]
        T = T * (1.0 - a_eff)
        n += 1
    return color, depth, 1.0 - T


# ---------------------------------------------------------------------------
# image metrics
# ---------------------------------------------------------------------------

def psnr_ref(a, b):
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    mse = 0.0
    for v in diff.ravel():
        mse += v * v
    mse /= diff.size
    if mse <= 0:
        return 99.0
    return min(99.0, 10.0 * np.log10(1.0 / mse))


def ssim_ref(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, drange=1.0):
    """Direct per-window SSIM with an explicit 2D Gaussian weight loop."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    x = np.arange(window) - (window - 1) / 2
    w1 = np.exp(-x * x / (2 * sigma * sigma))
    w1 /= w1.sum()
    W = np.outer(w1, w1)
    c1 = (k1 * drange) ** 2
    c2 = (k2 * drange) ** 2
    h, wid, ch = a.shape
    vals = []
    for c in range(ch):
        acc = []
        for i in range(h - window + 1):
            for j in range(wid - window + 1):
                pa = a[i:i + window, j:j + window, c]
                pb = b[i:i + window, j:j + window, c]
                mx = np.sum(W * pa)
                my = np.sum(W * pb)
                vx = np.sum(W * pa * pa) - mx * mx
                vy = np.sum(W * pb * pb) - my * my
                cxy = np.sum(W * pa * pb) - mx * my
                acc.append((2 * mx * my + c1) * (2 * cxy + c2)
                           / ((mx * mx + my * my + c1) * (vx + vy + c2)))
        vals.append(np.mean(acc))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# trajectory metrics (Horn's quaternion absolute orientation)
# ---------------------------------------------------------------------------

def horn_alignment(src, dst):
    """Similarity (s, R, t) by Horn's closed-form quaternion method."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    ms, md = src.mean(0), dst.mean(0)
    a = src - ms
    b = dst - md
    M = a.T @ b
    Sxx, Sxy, Sxz = M[0]
    Syx, Syy, Syz = M[1]
    Szx, Szy, Szz = M[2]
    N = np.array([
        [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
        [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
        [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
        [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz]])
    vals, vecs = np.linalg.eigh(N)
    w, x, y, z = vecs[:, np.argmax(vals)]
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])
    denom = np.sum(a * a)
    s = float(np.sum(b * (a @ R.T)) / denom) if denom > 0 else 1.0
    t = md - s * R @ ms
    return s, R, t


def ate_ref(est_pos, ref_pos):
    s, R, t = horn_alignment(est_pos, ref_pos)
    total = 0.0
    for p, q in zip(est_pos, ref_pos):
        r = q - (s * R @ p + t)
        total += float(r @ r)
    return np.sqrt(total / len(est_pos))


def rpe_ref(est, ref, delta=1):
    """est/ref as lists of (R, t) camera-to-world tuples."""
    terrs, rerrs = [], []
    for i in range(len(est) - delta):
        def rel(traj):
            Ra, ta = traj[i]
            Rb, tb = traj[i + delta]
            # a^-1 * b
            return Ra.T @ Rb, Ra.T @ (tb - ta)
        Rr, tr = rel(ref)
        Re, te = rel(est)
        E_R = Rr.T @ Re
        E_t = Rr.T @ (te - tr)
        terrs.append(np.linalg.norm(E_t))
        cosang = min(1.0, max(-1.0, (np.trace(E_R) - 1.0) / 2.0))
        rerrs.append(np.degrees(np.arccos(cosang)))
    return (np.sqrt(np.mean(np.square(terrs))),
            np.sqrt(np.mean(np.square(rerrs))))


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def central_diff(f, param, h=1e-4):
    """Central finite differences of scalar f() over every entry of `param`.

    The parameter is perturbed in place; the applied step is read back so
    low-precision storage (float32 parameters) keeps the quotient exact.
    """
    grad = np.zeros(param.shape, dtype=float)
    flat = param.reshape(-1)
    for i in range(flat.size):
        orig = flat[i].copy()
        flat[i] = orig + h
        hi = float(flat[i])
        f_hi = f()
        flat[i] = orig - h
        lo = float(flat[i])
        f_lo = f()
        flat[i] = orig
        denom = hi - lo
        grad.reshape(-1)[i] = (f_hi - f_lo) / denom if denom != 0 else 0.0
    return grad
