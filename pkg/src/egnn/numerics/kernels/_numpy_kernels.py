"""Pure NumPy implementations of the hot kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature; ``egnn.numerics.kernels`` picks one at import.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x):
    # (B, C, H, W) -> (B, H, W, C, 3, 3)
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(padded, (3, 3), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)


def conv3x3_forward(x, w, b):
    """3x3 convolution, stride 1, zero padding 1. x: (B,C,H,W), w: (O,C,3,3), b: (O,)."""
    cols = _im2col(x)
    y = np.tensordot(cols, w, axes=([3, 4, 5], [1, 2, 3]))  # (B, H, W, O)
    y += b
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv3x3_backward(x, w, gy):
    cols = _im2col(x)
    gw = np.tensordot(gy, cols, axes=([0, 2, 3], [0, 1, 2]))  # (O, C, 3, 3)
    gb = gy.sum(axis=(0, 2, 3))
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx = conv3x3_forward(gy, w_flip, np.zeros(w.shape[1], dtype=gy.dtype))
    return gx, gw.astype(w.dtype, copy=False), gb


def pairwise_absdiff(v):
    """out[i, j, :] = |v[i] - v[j]| for a (n, d) matrix."""
    return np.abs(v[:, None, :] - v[None, :, :])


def pairwise_absdiff_backward(v, g):
    s = np.sign(v[:, None, :] - v[None, :, :]) * g
    return s.sum(axis=1) - s.sum(axis=0)


def edge_renorm_forward(w1, w2, e, eps):
    """Similarity-weighted edge re-normalization followed by per-pair L1 normalization.

    For each channel d with weights w_d:
        a = w_d * e_d,  A_i = sum_j a_ij,  B_i = sum_j e_ijd
        ebar_ijd = a_ij * B_i / A_i
    then out_ij = ebar_ij / (ebar_ij1 + ebar_ij2).

    Returns the (n, n, 2) result and the smallest pair normalizer seen.
    """
    e1 = e[:, :, 0]
    e2 = e[:, :, 1]
    a1 = w1 * e1
    a2 = w2 * e2
    r1 = e1.sum(axis=1) / np.maximum(a1.sum(axis=1), eps)
    r2 = e2.sum(axis=1) / np.maximum(a2.sum(axis=1), eps)
    b1 = a1 * r1[:, None]
    b2 = a2 * r2[:, None]
    z = b1 + b2
    zmin = z.min() if z.size else 1.0
    z = np.maximum(z, eps)
    out = np.empty_like(e)
    out[:, :, 0] = b1 / z
    out[:, :, 1] = b2 / z
    return out, float(zmin)


def edge_renorm_backward(w1, w2, e, g, eps):
    e1 = e[:, :, 0]
    e2 = e[:, :, 1]
    a1 = w1 * e1
    a2 = w2 * e2
    A1 = np.maximum(a1.sum(axis=1), eps)
    A2 = np.maximum(a2.sum(axis=1), eps)
    B1 = e1.sum(axis=1)
    B2 = e2.sum(axis=1)
    b1 = a1 * (B1 / A1)[:, None]
    b2 = a2 * (B2 / A2)[:, None]
    z = np.maximum(b1 + b2, eps)
    g1 = g[:, :, 0]
    g2 = g[:, :, 1]
    gz = -(g1 * b1 + g2 * b2) / (z * z)
    gb1 = g1 / z + gz
    gb2 = g2 / z + gz

    ge = np.empty_like(e)
    grads = []
    for gb, a, A, B, w, ed, d in ((gb1, a1, A1, B1, w1, e1, 0), (gb2, a2, A2, B2, w2, e2, 1)):
        s = (gb * a).sum(axis=1)
        gB = s / A
        gA = -s * B / (A * A)
        ga = gb * (B / A)[:, None] + gA[:, None]
        ge[:, :, d] = ga * w + gB[:, None]
        grads.append(ga * ed)
    return grads[0], grads[1], ge
