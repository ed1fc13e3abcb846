"""Pure-numpy alpha-blending kernels (fallback for the compiled extension).

The forward kernel walks Gaussians front-to-back and composites them into
every pixel of their 3-sigma bounding box; per-pixel blending is strictly
sequential in the global depth order, so results are identical to a
per-pixel loop. Contributors are recorded per pixel (capped) for the
backward pass, which replays the blend in closed form.

Conventions shared with the compiled kernel:
  * contributions with effective alpha below `alpha_min` are skipped
  * a pixel accepts contributors only while its transmittance > `stop_T`
    and fewer than `max_contrib` Gaussians have been recorded
"""

from __future__ import annotations

import numpy as np

ALPHA_MIN = 1.0 / 255.0
STOP_T = 1e-4
MAX_CONTRIB = 64


def forward_blend(order, means2d, conics, opacities, colors, depths, radii,
                  width, height, y0=0, y1=None,
                  max_contrib=MAX_CONTRIB, stop_t=STOP_T, alpha_min=ALPHA_MIN):
    """Composite Gaussians into image rows [y0, y1).

    Returns (color (h,W,3), depth (h,W), alpha (h,W), n_contrib (h,W),
    contrib_idx (h,W,C), contrib_alpha (h,W,C)) where h = y1 - y0.
    """
    if y1 is None:
        y1 = height
    h = y1 - y0
    color = np.zeros((h, width, 3))
    depth = np.zeros((h, width))
    T = np.ones((h, width))
    n = np.zeros((h, width), dtype=np.int32)
    cidx = np.zeros((h, width, max_contrib), dtype=np.int32)
    calpha = np.zeros((h, width, max_contrib))

    for g in order:
        r = radii[g]
        mx, my = means2d[g]
        gx0 = max(0, int(np.ceil(mx - r)))
        gx1 = min(width - 1, int(np.floor(mx + r)))
        gy0 = max(y0, int(np.ceil(my - r)))
        gy1 = min(y1 - 1, int(np.floor(my + r)))
        if gx0 > gx1 or gy0 > gy1:
            continue
        a, b, c = conics[g]
        dx = np.arange(gx0, gx1 + 1) - mx
        dy = np.arange(gy0, gy1 + 1) - my
        power = (-0.5 * (a * dx * dx)[None, :]
                 - 0.5 * (c * dy * dy)[:, None]
                 - b * dy[:, None] * dx[None, :])
        a_eff = np.minimum(opacities[g] * np.exp(power), 1.0)

        sy0, sy1 = gy0 - y0, gy1 - y0 + 1
        subT = T[sy0:sy1, gx0:gx1 + 1]
        subn = n[sy0:sy1, gx0:gx1 + 1]
        mask = (a_eff >= alpha_min) & (subT > stop_t) & (subn < max_contrib)
        if not mask.any():
            continue
        rows, cols = np.nonzero(mask)
        a_sel = a_eff[rows, cols]
        t_sel = subT[rows, cols]
        w_sel = a_sel * t_sel
        color[sy0 + rows, gx0 + cols] += w_sel[:, None] * colors[g]
        depth[sy0 + rows, gx0 + cols] += w_sel * depths[g]
        slot = subn[rows, cols]
        cidx[sy0 + rows, gx0 + cols, slot] = g
        calpha[sy0 + rows, gx0 + cols, slot] = a_sel
        subT[rows, cols] = t_sel * (1.0 - a_sel)
        subn[rows, cols] = slot + 1

    return color, depth, 1.0 - T, n, cidx, calpha


def backward_blend(n_contrib, contrib_idx, contrib_alpha,
                   means2d, conics, opacities, colors, depths,
                   dL_dcolor, dL_ddepth, dL_dalpha, y0=0):
    """Gradients of the blend w.r.t. per-Gaussian 2D attributes.

    Returns (d_mean2d (N,2), d_conic (N,3), d_opac (N,), d_color (N,3),
    d_depth (N,)).
    """
    h, w, C = contrib_idx.shape
    N = len(opacities)
    slot = np.arange(C)
    valid = slot[None, None, :] < n_contrib[:, :, None]
    a = np.where(valid, contrib_alpha, 0.0)
    idx = np.where(valid, contrib_idx, 0)

    one_minus = 1.0 - a
    T_incl = np.cumprod(one_minus, axis=2)
    T = np.concatenate([np.ones((h, w, 1)), T_incl[:, :, :-1]], axis=2)
    T_final = T_incl[:, :, -1]
    weight = a * T

    col = colors[idx]                      # (h,w,C,3)
    dep = depths[idx]                      # (h,w,C)
    wc = weight[..., None] * col
    wd = weight * dep
    # exclusive suffix sums over contributors
    S_c = np.flip(np.cumsum(np.flip(wc, 2), axis=2), 2) - wc
    S_d = np.flip(np.cumsum(np.flip(wd, 2), axis=2), 2) - wd

    safe = np.maximum(one_minus, 1e-12)
    dLc = dL_dcolor[:, :, None, :]
    dLd = dL_ddepth[:, :, None]
    da = np.sum(dLc * (col * T[..., None] - S_c / safe[..., None]), axis=3)
    da += dLd * (dep * T - S_d / safe)
    if dL_dalpha is not None:
        da += dL_dalpha[:, :, None] * (T_final[:, :, None] / safe)
    da = np.where(valid, da, 0.0)

    # a = opacity * g; recover g from the stored effective alpha
    op = opacities[idx]
    g = np.where(valid, a / np.maximum(op, 1e-30), 0.0)
    d_op_contrib = g * da
    dg = op * da
    dp = dg * g                            # g = exp(p)

    ys, xs = np.meshgrid(np.arange(h) + y0, np.arange(w), indexing="ij")
    dx = xs[:, :, None] - means2d[idx, 0]
    dy = ys[:, :, None] - means2d[idx, 1]
    ca = conics[idx, 0]
    cb = conics[idx, 1]
    cc = conics[idx, 2]
    d_conic_a = dp * (-0.5 * dx * dx)
    d_conic_b = dp * (-dx * dy)
    d_conic_c = dp * (-0.5 * dy * dy)
    d_dx = dp * (-(ca * dx + cb * dy))
    d_dy = dp * (-(cb * dx + cc * dy))

    d_mean2d = np.zeros((N, 2))
    d_conic = np.zeros((N, 3))
    d_opac = np.zeros(N)
    d_color = np.zeros((N, 3))
    d_depth = np.zeros(N)

    flat_idx = idx[valid]
    np.add.at(d_mean2d[:, 0], flat_idx, -d_dx[valid])
    np.add.at(d_mean2d[:, 1], flat_idx, -d_dy[valid])
    np.add.at(d_conic[:, 0], flat_idx, d_conic_a[valid])
    np.add.at(d_conic[:, 1], flat_idx, d_conic_b[valid])
    np.add.at(d_conic[:, 2], flat_idx, d_conic_c[valid])
    np.add.at(d_opac, flat_idx, d_op_contrib[valid])
    d_col_contrib = weight[..., None] * dL_dcolor[:, :, None, :]
    np.add.at(d_color, flat_idx, d_col_contrib[valid])
    np.add.at(d_depth, flat_idx, (weight * dL_ddepth[:, :, None])[valid])

    return d_mean2d, d_conic, d_opac, d_color, d_depth
