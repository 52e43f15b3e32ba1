"""Differentiable operations on :class:`Tensor`.

Each op computes its forward value with NumPy and, when any input requires
grad, records a backward rule on the current tape. Backward rules return one
gradient (or ``None``) per input, already reduced to that input's shape.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import NumericalError, Tensor, as_tensor, get_default_dtype, make_result

BCE_CLAMP = 1e-7


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype.type if like is not None else get_default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = as_tensor(b)
    return _lift(a, b), b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("div", out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def abs(a) -> Tensor:
    a = as_tensor(a)
    return make_result("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("matmul", a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- shape manipulation -------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_result("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=a.dtype)

    def backward(g):
        full = np.zeros_like(a.data)
        if _is_basic_index(index):
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result("getitem", out, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ValueError(f"concat: shape {t.shape} does not match {ref.shape} off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return make_result("concat", out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ValueError(f"stack: shape {t.shape} does not match {tensors[0].shape}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    return make_result("stack", out, tuple(tensors),
                       lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))))


# -- reductions ---------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result("reduce_sum", out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- activations and normalizers ----------------------------------------------

def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    if not 0 <= slope <= 1:
        raise ValueError("leaky_relu slope must be in [0, 1]")
    s = a.dtype.type(slope)
    out = np.maximum(a.data, a.data * s)
    deriv = np.where(a.data > 0, a.dtype.type(1), s)
    return make_result("leaky_relu", out, (a,), lambda g: (g * deriv,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", out, (a,), backward)


def l1_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / max(sum |x| along axis, eps)."""
    a = as_tensor(a)
    norm = np.abs(a.data).sum(axis=axis, keepdims=True)
    denom = np.maximum(norm, eps)
    out = a.data / denom

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        live = norm >= eps
        return ((g - np.where(live, inner, 0.0) * np.sign(a.data)) / denom,)

    return make_result("l1_normalize", out, (a,), backward)


def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
              mode: str = "batch", update_running: bool = True,
              momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    ``mode="batch"`` normalizes with the statistics of ``x`` and, when
    ``update_running`` is set, folds them into the running buffers in place
    (unbiased variance). ``mode="running"`` uses the stored buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2:
        raise ValueError(f"batchnorm: input needs a batch and channel axis, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batchnorm: affine params must have shape ({C},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    count = x.size // C

    if mode == "batch":
        if count < 2:
            raise ValueError("batchnorm: batch statistics need at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        centered = x.data - mu.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * (count / (count - 1))
    elif mode == "running":
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    else:
        raise ValueError(f"batchnorm: unknown mode {mode!r}")

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    if mode != "batch":
        centered = x.data - mu.reshape(bshape)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if mode == "batch":
                s1 = gxhat.sum(axis=axes).reshape(bshape)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (inv_std.reshape(bshape) / count) * (count * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return make_result("batchnorm", out, (x, gamma, beta), backward)


# -- convolution and pooling --------------------------------------------------

def conv2d(x, weight, bias) -> Tensor:
    """3x3 convolution, stride 1, same padding. x: (B, C, H, W), weight: (O, C, 3, 3)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ValueError(f"conv2d: expected (B,C,H,W) input and (O,C,3,3) kernel, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = kernels.conv3x3_forward(x.data, weight.data, bias.data)

    def backward(g):
        gx, gw, gb = kernels.conv3x3_backward(x.data, weight.data, np.ascontiguousarray(g))
        return gx, gw, gb

    return make_result("conv2d", out, (x, weight, bias), backward)


def maxpool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"maxpool2d: expected (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    H2, W2 = H // 2, W // 2
    if H2 == 0 or W2 == 0:
        raise ValueError(f"maxpool2d: spatial size {H}x{W} too small")
    blocks = x.data[:, :, :2 * H2, :2 * W2].reshape(B, C, H2, 2, W2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(B, C, H2, W2, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros((B, C, H2, W2, 4), dtype=g.dtype)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :2 * H2, :2 * W2] = (
            gflat.reshape(B, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * H2, 2 * W2))
        return (gx,)

    return make_result("maxpool2d", np.ascontiguousarray(out), (x,), backward)


# -- graph-specific fused ops -------------------------------------------------

def pairwise_absdiff(v) -> Tensor:
    """(n, d) -> (n, n, d) with out[i, j] = |v_i - v_j|."""
    v = as_tensor(v)
    if v.ndim != 2:
        raise ValueError(f"pairwise_absdiff: expected (n, d), got {v.shape}")
    out = kernels.pairwise_absdiff(v.data)
    return make_result("pairwise_absdiff", out, (v,),
                       lambda g: (kernels.pairwise_absdiff_backward(v.data, np.ascontiguousarray(g)),))


def edge_renorm(sim, dsim, edges, eps: float = 1e-12, ignore_diagonal: bool = False) -> Tensor:
    """Re-weight previous edges by (dis)similarity scores, then L1-normalize each pair.

    ``sim`` and ``dsim`` are (n, n) score matrices; ``edges`` is (n, n, 2).
    Raises :class:`NumericalError` if some pair ends up with no mass in
    either channel (diagonal pairs are exempt with ``ignore_diagonal``).
    """
    sim, dsim, edges = as_tensor(sim), as_tensor(dsim), as_tensor(edges)
    n = edges.shape[0]
    if edges.shape != (n, n, 2) or sim.shape != (n, n) or dsim.shape != (n, n):
        raise ValueError(f"edge_renorm: bad shapes {sim.shape}, {dsim.shape}, {edges.shape}")
    dtype = edges.dtype
    w1 = np.ascontiguousarray(sim.data, dtype=dtype)
    w2 = np.ascontiguousarray(dsim.data, dtype=dtype)
    e = edges.data
    out, zmin = kernels.edge_renorm_forward(w1, w2, e, eps)
    if not zmin >= eps and ignore_diagonal:
        zmin = _off_diagonal_zmin(w1, w2, e, eps)
    if not zmin >= eps:
        raise NumericalError(f"edge normalizer underflow (min {zmin:.3g} < {eps:g})")

    def backward(g):
        gw1, gw2, ge = kernels.edge_renorm_backward(w1, w2, e, np.ascontiguousarray(g, dtype=dtype), eps)
        return gw1, gw2, ge

    return make_result("edge_renorm", out, (sim, dsim, edges), backward)


def _off_diagonal_zmin(w1, w2, e, eps):
    """Smallest pair normalizer over i != j (slow path, only after a guard trip)."""
    a1, a2 = w1 * e[:, :, 0], w2 * e[:, :, 1]
    r1 = e[:, :, 0].sum(1) / np.maximum(a1.sum(1), eps)
    r2 = e[:, :, 1].sum(1) / np.maximum(a2.sum(1), eps)
    z = a1 * r1[:, None] + a2 * r2[:, None]
    np.fill_diagonal(z, np.inf)
    return float(z.min()) if z.size > 1 else 1.0


# -- losses -------------------------------------------------------------------

def bce_with_logits(logits, target, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on logits: max(z, 0) - z*t + log(1 + exp(-|z|))."""
    z = as_tensor(logits)
    t = np.asarray(target, dtype=z.dtype)
    if t.shape != z.shape:
        raise ValueError(f"bce: target shape {t.shape} != prediction shape {z.shape}")
    per = np.maximum(z.data, 0) - z.data * t + np.log1p(np.exp(-np.abs(z.data)))
    scale = 1.0 / per.size if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise ValueError(f"bce: unknown reduction {reduction!r}")
    out = np.asarray(per.sum() * scale, dtype=z.dtype)
    return make_result("bce_with_logits", out, (z,),
                       lambda g: ((_sigmoid(z.data) - t) * (g * scale),))


def bce_loss(pred, target, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on probabilities, clamped to [1e-7, 1 - 1e-7].

    The clamped probability is mapped to a logit and evaluated with the
    stable logit form.
    """
    p = as_tensor(pred)
    t = np.asarray(target, dtype=p.dtype)
    if t.shape != p.shape:
        raise ValueError(f"bce: target shape {t.shape} != prediction shape {p.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"bce: unknown reduction {reduction!r}")
    pc = np.clip(p.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    z = np.log(pc) - np.log1p(-pc)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    scale = 1.0 / per.size if reduction == "mean" else 1.0
    out = np.asarray(per.sum() * scale, dtype=p.dtype)
    inside = (p.data >= BCE_CLAMP) & (p.data <= 1.0 - BCE_CLAMP)

    def backward(g):
        return (np.where(inside, (pc - t) / (pc * (1.0 - pc)), 0.0).astype(p.dtype) * (g * scale),)

    return make_result("bce_loss", out, (p,), backward)

