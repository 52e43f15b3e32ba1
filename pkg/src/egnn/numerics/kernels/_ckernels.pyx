# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in _numpy_kernels.py (same signatures, same math)."""

import numpy as np
cimport cython
from cython cimport floating


cdef void _im2col(floating[:, :, :, ::1] x, floating[:, :, ::1] cols) noexcept nogil:
    # cols[n, (c*3 + p)*3 + q, h*W + w] = x[n, c, h+p-1, w+q-1], zero outside the image
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n, c, p, q, h, ww, hh, wc, r
    for n in range(B):
        for c in range(C):
            for p in range(3):
                for q in range(3):
                    r = (c * 3 + p) * 3 + q
                    for h in range(H):
                        hh = h + p - 1
                        for ww in range(W):
                            wc = ww + q - 1
                            if hh < 0 or hh >= H or wc < 0 or wc >= W:
                                cols[n, r, h * W + ww] = 0
                            else:
                                cols[n, r, h * W + ww] = x[n, c, hh, wc]


cdef void _col2im(floating[:, :, ::1] cols, floating[:, :, :, ::1] x) noexcept nogil:
    # adjoint of _im2col: scatter-add every column entry back onto its pixel
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n, c, p, q, h, ww, hh, wc, r
    for n in range(B):
        for c in range(C):
            for p in range(3):
                for q in range(3):
                    r = (c * 3 + p) * 3 + q
                    for h in range(H):
                        hh = h + p - 1
                        if hh < 0 or hh >= H:
                            continue
                        for ww in range(W):
                            wc = ww + q - 1
                            if wc >= 0 and wc < W:
                                x[n, c, hh, wc] += cols[n, r, h * W + ww]


def conv3x3_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, floating[::1] b):
    """Compiled patch extraction followed by one batched GEMM."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0]
    dtype = np.float32 if floating is float else np.float64
    cols_arr = np.empty((B, C * 9, H * W), dtype=dtype)
    cdef floating[:, :, ::1] cols = cols_arr
    with nogil:
        _im2col(x, cols)
    y = np.matmul(np.asarray(w).reshape(O, C * 9), cols_arr)
    y += np.asarray(b)[:, None]
    return y.reshape(B, O, H, W)


def conv3x3_backward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, floating[:, :, :, ::1] gy):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0]
    dtype = np.float32 if floating is float else np.float64
    cols_arr = np.empty((B, C * 9, H * W), dtype=dtype)
    cdef floating[:, :, ::1] cols = cols_arr
    with nogil:
        _im2col(x, cols)
    g = np.asarray(gy).reshape(B, O, H * W)
    gw_arr = np.tensordot(g, cols_arr, axes=([0, 2], [0, 2])).reshape(O, C, 3, 3)
    gb_arr = g.sum(axis=(0, 2))
    gcols_arr = np.ascontiguousarray(np.matmul(np.asarray(w).reshape(O, C * 9).T, g))
    gx_arr = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, ::1] gcols = gcols_arr
    cdef floating[:, :, :, ::1] gx = gx_arr
    with nogil:
        _col2im(gcols, gx)
    return gx_arr, gw_arr.astype(dtype, copy=False), gb_arr.astype(dtype, copy=False)


def pairwise_absdiff(floating[:, ::1] v):
    cdef Py_ssize_t n = v.shape[0], d = v.shape[1]
    cdef Py_ssize_t i, j, k
    cdef floating t
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, n, d), dtype=dtype)
    cdef floating[:, :, ::1] o = out
    with nogil:
        for i in range(n):
            for k in range(d):
                o[i, i, k] = 0
            for j in range(i + 1, n):
                for k in range(d):
                    t = v[i, k] - v[j, k]
                    if t < 0:
                        t = -t
                    o[i, j, k] = t
                    o[j, i, k] = t
    return out


def pairwise_absdiff_backward(floating[:, ::1] v, floating[:, :, ::1] g):
    cdef Py_ssize_t n = v.shape[0], d = v.shape[1]
    cdef Py_ssize_t i, j, k
    cdef floating t, s
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, d), dtype=dtype)
    cdef floating[:, ::1] gv = out
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                for k in range(d):
                    # branchless sign(v_i - v_j), zero on ties
                    t = v[i, k] - v[j, k]
                    s = (<floating>(t > 0) - <floating>(t < 0)) * (g[i, j, k] + g[j, i, k])
                    gv[i, k] += s
                    gv[j, k] -= s
    return out


def edge_renorm_forward(floating[:, ::1] w1, floating[:, ::1] w2, floating[:, :, ::1] e, double eps):
    cdef Py_ssize_t n = e.shape[0], m = e.shape[1]
    cdef Py_ssize_t i, j
    cdef floating A1, A2, B1, B2, r1, r2, b1, b2, z
    cdef floating feps = <floating>eps
    cdef double zmin = 1.0e300
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, m, 2), dtype=dtype)
    cdef floating[:, :, ::1] o = out
    with nogil:
        for i in range(n):
            A1 = 0
            A2 = 0
            B1 = 0
            B2 = 0
            for j in range(m):
                A1 = A1 + w1[i, j] * e[i, j, 0]
                A2 = A2 + w2[i, j] * e[i, j, 1]
                B1 = B1 + e[i, j, 0]
                B2 = B2 + e[i, j, 1]
            if A1 < feps:
                A1 = feps
            if A2 < feps:
                A2 = feps
            r1 = B1 / A1
            r2 = B2 / A2
            for j in range(m):
                b1 = (w1[i, j] * e[i, j, 0]) * r1
                b2 = (w2[i, j] * e[i, j, 1]) * r2
                z = b1 + b2
                if z < zmin:
                    zmin = z
                if z < feps:
                    z = feps
                o[i, j, 0] = b1 / z
                o[i, j, 1] = b2 / z
    if n == 0:
        zmin = 1.0
    return out, zmin


def edge_renorm_backward(floating[:, ::1] w1, floating[:, ::1] w2, floating[:, :, ::1] e,
                         floating[:, :, ::1] g, double eps):
    cdef Py_ssize_t n = e.shape[0], m = e.shape[1]
    cdef Py_ssize_t i, j
    cdef floating A1, A2, B1, B2, r1, r2, a1, a2, b1, b2, z, gz, gb1, gb2, s1, s2, gA1, gA2, gB1, gB2, ga1, ga2
    cdef floating feps = <floating>eps
    dtype = np.float32 if floating is float else np.float64
    gw1_arr = np.empty((n, m), dtype=dtype)
    gw2_arr = np.empty((n, m), dtype=dtype)
    ge_arr = np.empty((n, m, 2), dtype=dtype)
    gb1_buf = np.empty(m, dtype=dtype)
    gb2_buf = np.empty(m, dtype=dtype)
    cdef floating[:, ::1] gw1 = gw1_arr
    cdef floating[:, ::1] gw2 = gw2_arr
    cdef floating[:, :, ::1] ge = ge_arr
    cdef floating[::1] tb1 = gb1_buf
    cdef floating[::1] tb2 = gb2_buf
    with nogil:
        for i in range(n):
            A1 = 0
            A2 = 0
            B1 = 0
            B2 = 0
            for j in range(m):
                A1 = A1 + w1[i, j] * e[i, j, 0]
                A2 = A2 + w2[i, j] * e[i, j, 1]
                B1 = B1 + e[i, j, 0]
                B2 = B2 + e[i, j, 1]
            if A1 < feps:
                A1 = feps
            if A2 < feps:
                A2 = feps
            r1 = B1 / A1
            r2 = B2 / A2
            s1 = 0
            s2 = 0
            for j in range(m):
                a1 = w1[i, j] * e[i, j, 0]
                a2 = w2[i, j] * e[i, j, 1]
                b1 = a1 * r1
                b2 = a2 * r2
                z = b1 + b2
                if z < feps:
                    z = feps
                gz = -(g[i, j, 0] * b1 + g[i, j, 1] * b2) / (z * z)
                gb1 = g[i, j, 0] / z + gz
                gb2 = g[i, j, 1] / z + gz
                tb1[j] = gb1
                tb2[j] = gb2
                s1 = s1 + gb1 * a1
                s2 = s2 + gb2 * a2
            gB1 = s1 / A1
            gB2 = s2 / A2
            gA1 = -s1 * B1 / (A1 * A1)
            gA2 = -s2 * B2 / (A2 * A2)
            for j in range(m):
                ga1 = tb1[j] * r1 + gA1
                ga2 = tb2[j] * r2 + gA2
                ge[i, j, 0] = ga1 * w1[i, j] + gB1
                ge[i, j, 1] = ga2 * w2[i, j] + gB2
                gw1[i, j] = ga1 * e[i, j, 0]
                gw2[i, j] = ga2 * e[i, j, 1]
    return gw1_arr, gw2_arr, ge_arr
