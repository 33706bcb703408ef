"""Neural-network ops on :class:`Tensor`: activations, normalization,
convolution, pooling, attention and losses."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import ShapeError, Tensor, add, broadcast_to, concat, matmul, mul, unbroadcast

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return Tensor._from_op(xd * cdf, (x,), backward, "gelu")


def _check_last_axis(op: str, x: Tensor) -> None:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(op, x.shape, detail="empty last axis")


def softmax(x: Tensor) -> Tensor:
    _check_last_axis("softmax", x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    _check_last_axis("log_softmax", x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return Tensor._from_op(y, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [B, K]."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0 or logits.shape[1] == 0:
        raise ShapeError("cross_entropy", logits.shape, detail="expected non-empty [B, K] logits")
    if labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape, detail="one label per row")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"cross_entropy: labels must lie in [0, {logits.shape[1]})")
    b = logits.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    loss = -logp[rows, labels].sum() / b

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / b),)

    return Tensor._from_op(np.asarray(loss), (logits,), backward, "cross_entropy")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", x.shape, weight.shape)
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def standardize(x: Tensor, axes: tuple[int, ...], eps: float = 1e-5):
    """Zero-mean, unit-variance over ``axes`` (biased variance).

    Returns the normalized tensor plus the batch mean and variance arrays
    (shapes keep the reduced axes as size 1).
    """
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return ((g - gm - y * gym) * inv,)

    return Tensor._from_op(y, (x,), backward, "standardize"), mu, var


def _channel_view(p: Tensor, ndim: int) -> Tensor:
    shape = (1, p.shape[0]) + (1,) * (ndim - 2)
    return p.reshape(shape)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if weight.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layer_norm", x.shape, weight.shape, bias.shape)
    y, _, _ = standardize(x, (x.ndim - 1,), eps)
    return add(mul(y, weight), bias)


def batch_norm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over batch (and spatial) axes.

    In training mode the batch statistics normalize the input and the
    running buffers are updated in place (``new = (1-m)*old + m*batch``,
    unbiased variance). In eval mode the running buffers are used and left
    untouched.
    """
    if x.ndim < 2 or weight.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError("batch_norm", x.shape, weight.shape, bias.shape)
    if running_mean.shape != (x.shape[1],) or running_var.shape != (x.shape[1],):
        raise ShapeError("batch_norm", x.shape, running_mean.shape, running_var.shape, detail="running stats")
    axes = (0,) + tuple(range(2, x.ndim))
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm: training mode needs a batch of at least 2 samples")
        y, mu, var = standardize(x, axes, eps)
        n = x.size // x.shape[1]
        unbiased = var.reshape(-1) * (n / max(n - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1).astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        shift = (-running_mean * inv).astype(x.dtype)
        y = add(mul(x, Tensor(inv.reshape(shape), dtype=x.dtype)), Tensor(shift.reshape(shape), dtype=x.dtype))
    return add(mul(y, _channel_view(weight, x.ndim)), _channel_view(bias, x.ndim))


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over channel groups; independent of batch size."""
    b, c = x.shape[:2]
    if c % groups != 0:
        raise ShapeError("group_norm", x.shape, detail=f"{c} channels not divisible into {groups} groups")
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError("group_norm", x.shape, weight.shape, bias.shape)
    y, _, _ = standardize(x.reshape(b, groups, -1), (2,), eps)
    y = y.reshape(x.shape)
    return add(mul(y, _channel_view(weight, x.ndim)), _channel_view(bias, x.ndim))


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _windows(xd: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (B, C, Ho, Wo, kh, kw) view
    return sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x`` [B, C, H, W], ``weight`` [O, C, kh, kw]."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    b, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, kh, kw, stride)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)
    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gcols = (gmat @ wmat).reshape(b, ho, wo, c, kh, kw)
        gxp = np.zeros((b, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, backward, "conv2d")


def _pool_setup(op: str, x: Tensor, kernel: int, stride: int | None):
    if x.ndim != 4:
        raise ShapeError(op, x.shape, detail="expected [B, C, H, W]")
    stride = stride or kernel
    if x.shape[2] < kernel or x.shape[3] < kernel:
        raise ShapeError(op, x.shape, detail=f"kernel {kernel} larger than input")
    return stride


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    stride = _pool_setup("max_pool2d", x, kernel, stride)
    win = _windows(x.data, kernel, kernel, stride)
    b, c, ho, wo = win.shape[:4]
    flat = win.reshape(b, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                mask = arg == i * kernel + j
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * mask
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    stride = _pool_setup("avg_pool2d", x, kernel, stride)
    win = _windows(x.data, kernel, kernel, stride)
    ho, wo = win.shape[2], win.shape[3]
    out = win.mean(axis=(-1, -2))
    shape = x.shape
    scale = 1.0 / (kernel * kernel)

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gs = g * scale
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gs
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "avg_pool2d")


# ---------------------------------------------------------------------------
# embeddings and attention
# ---------------------------------------------------------------------------

def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; repeated indices accumulate gradient."""
    idx = np.asarray(indices)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, detail="table must be [V, D]")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, idx.shape, detail="index out of range")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(table.data[idx], (table,), backward, "embedding")


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    scores = mul(matmul(q, k.swapaxes(-1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores), v)


def multi_head_attention(
    x: Tensor, qkv_weight: Tensor, qkv_bias: Tensor, proj_weight: Tensor, proj_bias: Tensor, heads: int
) -> Tensor:
    """Self-attention over tokens ``x`` [B, N, D] with ``heads`` heads."""
    b, n, d = x.shape
    if d % heads != 0:
        raise ShapeError("multi_head_attention", x.shape, detail=f"dim {d} not divisible by {heads} heads")
    if qkv_weight.shape != (d, 3 * d):
        raise ShapeError("multi_head_attention", x.shape, qkv_weight.shape)
    dh = d // heads
    qkv = linear(x, qkv_weight, qkv_bias).reshape(b, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    ctx = scaled_dot_product_attention(q, k, v)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, n, d)
    return linear(ctx, proj_weight, proj_bias)


__all__ = [
    "relu",
    "gelu",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "linear",
    "standardize",
    "layer_norm",
    "batch_norm",
    "group_norm",
    "conv2d",
    "max_pool2d",
    "avg_pool2d",
    "embedding",
    "scaled_dot_product_attention",
    "multi_head_attention",
    "concat",
    "broadcast_to",
    "unbroadcast",
]
