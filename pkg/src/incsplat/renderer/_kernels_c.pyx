# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled alpha-blending kernels; semantics match kernels_py exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, exp, floor

cnp.import_array()


def forward_blend(long[::1] order,
                  double[:, ::1] means2d, double[:, ::1] conics,
                  double[::1] opacities, double[:, ::1] colors,
                  double[::1] depths, double[::1] radii,
                  int width, int height, int y0=0, y1=None,
                  int max_contrib=64, double stop_t=1e-4,
                  double alpha_min=1.0 / 255.0):
    cdef int y1i = height if y1 is None else <int> y1
    cdef int h = y1i - y0
    color_arr = np.zeros((h, width, 3))
    depth_arr = np.zeros((h, width))
    T_arr = np.ones((h, width))
    n_arr = np.zeros((h, width), dtype=np.int32)
    cidx_arr = np.zeros((h, width, max_contrib), dtype=np.int32)
    calpha_arr = np.zeros((h, width, max_contrib))

    cdef double[:, :, ::1] color = color_arr
    cdef double[:, ::1] depth = depth_arr
    cdef double[:, ::1] T = T_arr
    cdef int[:, ::1] n = n_arr
    cdef int[:, :, ::1] cidx = cidx_arr
    cdef double[:, :, ::1] calpha = calpha_arr

    cdef Py_ssize_t oi, g
    cdef int gx0, gx1, gy0, gy1, px, py, row, col, slot
    cdef double r, mx, my, ca, cb, cc, op, dx, dy, power, a_eff, t, w, d

    for oi in range(order.shape[0]):
        g = order[oi]
        r = radii[g]
        mx = means2d[g, 0]
        my = means2d[g, 1]
        gx0 = <int> ceil(mx - r)
        gx1 = <int> floor(mx + r)
        gy0 = <int> ceil(my - r)
        gy1 = <int> floor(my + r)
        if gx0 < 0: gx0 = 0
        if gx1 > width - 1: gx1 = width - 1
        if gy0 < y0: gy0 = y0
        if gy1 > y1i - 1: gy1 = y1i - 1
        if gx0 > gx1 or gy0 > gy1:
            continue
        ca = conics[g, 0]
        cb = conics[g, 1]
        cc = conics[g, 2]
        op = opacities[g]
        d = depths[g]
        for py in range(gy0, gy1 + 1):
            row = py - y0
            dy = py - my
            for px in range(gx0, gx1 + 1):
                col = px
                t = T[row, col]
                slot = n[row, col]
                if t <= stop_t or slot >= max_contrib:
                    continue
                dx = px - mx
                power = -0.5 * (ca * dx * dx) - 0.5 * (cc * dy * dy) - cb * dy * dx
                a_eff = op * exp(power)
                if a_eff > 1.0:
                    a_eff = 1.0
                if a_eff < alpha_min:
                    continue
                w = a_eff * t
                color[row, col, 0] += w * colors[g, 0]
                color[row, col, 1] += w * colors[g, 1]
                color[row, col, 2] += w * colors[g, 2]
                depth[row, col] += w * d
                cidx[row, col, slot] = <int> g
                calpha[row, col, slot] = a_eff
                T[row, col] = t * (1.0 - a_eff)
                n[row, col] = slot + 1

    return color_arr, depth_arr, 1.0 - T_arr, n_arr, cidx_arr, calpha_arr


def backward_blend(int[:, ::1] n_contrib, int[:, :, ::1] contrib_idx,
                   double[:, :, ::1] contrib_alpha,
                   double[:, ::1] means2d, double[:, ::1] conics,
                   double[::1] opacities, double[:, ::1] colors,
                   double[::1] depths,
                   double[:, :, ::1] dL_dcolor, double[:, ::1] dL_ddepth,
                   dL_dalpha_obj, int y0=0):
    cdef int h = contrib_idx.shape[0]
    cdef int w = contrib_idx.shape[1]
    cdef int C = contrib_idx.shape[2]
    cdef Py_ssize_t N = opacities.shape[0]

    d_mean2d_arr = np.zeros((N, 2))
    d_conic_arr = np.zeros((N, 3))
    d_opac_arr = np.zeros(N)
    d_color_arr = np.zeros((N, 3))
    d_depth_arr = np.zeros(N)
    cdef double[:, ::1] d_mean2d = d_mean2d_arr
    cdef double[:, ::1] d_conic = d_conic_arr
    cdef double[::1] d_opac = d_opac_arr
    cdef double[:, ::1] d_color = d_color_arr
    cdef double[::1] d_depth = d_depth_arr

    cdef bint has_alpha = dL_dalpha_obj is not None
    cdef double[:, ::1] dL_dalpha
    if has_alpha:
        dL_dalpha = dL_dalpha_obj

    T_buf_arr = np.empty(C)
    cdef double[::1] T_buf = T_buf_arr

    cdef int row, col, i, nloc, g
    cdef double t, a, safe, Sr, Sg, Sb, Sd, da, gval, op, dgv, dp
    cdef double dx, dy, ca, cb, cc, weight, T_final
    cdef double dLr, dLg, dLb, dLd, dLa

    for row in range(h):
        for col in range(w):
            nloc = n_contrib[row, col]
            if nloc == 0:
                continue
            dLr = dL_dcolor[row, col, 0]
            dLg = dL_dcolor[row, col, 1]
            dLb = dL_dcolor[row, col, 2]
            dLd = dL_ddepth[row, col]
            dLa = dL_dalpha[row, col] if has_alpha else 0.0
            t = 1.0
            for i in range(nloc):
                T_buf[i] = t
                t = t * (1.0 - contrib_alpha[row, col, i])
            T_final = t
            # reverse pass accumulating exclusive suffix sums
            Sr = 0.0; Sg = 0.0; Sb = 0.0; Sd = 0.0
            for i in range(nloc - 1, -1, -1):
                g = contrib_idx[row, col, i]
                a = contrib_alpha[row, col, i]
                safe = 1.0 - a
                if safe < 1e-12:
                    safe = 1e-12
                weight = a * T_buf[i]
                da = (dLr * (colors[g, 0] * T_buf[i] - Sr / safe)
                      + dLg * (colors[g, 1] * T_buf[i] - Sg / safe)
                      + dLb * (colors[g, 2] * T_buf[i] - Sb / safe)
                      + dLd * (depths[g] * T_buf[i] - Sd / safe))
                if has_alpha:
                    da += dLa * (T_final / safe)
                op = opacities[g]
                gval = a / (op if op > 1e-30 else 1e-30)
                d_opac[g] += gval * da
                dgv = op * da
                dp = dgv * gval
                dx = col - means2d[g, 0]
                dy = (row + y0) - means2d[g, 1]
                ca = conics[g, 0]
                cb = conics[g, 1]
                cc = conics[g, 2]
                d_conic[g, 0] += dp * (-0.5 * dx * dx)
                d_conic[g, 1] += dp * (-dx * dy)
                d_conic[g, 2] += dp * (-0.5 * dy * dy)
                d_mean2d[g, 0] += dp * (ca * dx + cb * dy)
                d_mean2d[g, 1] += dp * (cb * dx + cc * dy)
                d_color[g, 0] += weight * dLr
                d_color[g, 1] += weight * dLg
                d_color[g, 2] += weight * dLb
                d_depth[g] += weight * dLd
                Sr += weight * colors[g, 0]
                Sg += weight * colors[g, 1]
                Sb += weight * colors[g, 2]
                Sd += weight * depths[g]

    return d_mean2d_arr, d_conic_arr, d_opac_arr, d_color_arr, d_depth_arr
