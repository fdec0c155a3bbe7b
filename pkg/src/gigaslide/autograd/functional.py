"""Differentiable NN operators on BCHW tensors.

Convolutions lower to a single GEMM through an im2col view; pooling and
resampling keep their own hand-written backward rules.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _sigmoid, as_tensor

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, padding: int, groups_ok: bool = False):
    if x.ndim != 4:
        raise ShapeError(f"expected BCHW input, got shape {x.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    k = w.shape[-1]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError(
            f"kernel {k} larger than padded input {x.shape[2] + 2 * padding}x{x.shape[3] + 2 * padding}"
        )


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Return (B*Ho*Wo, C*k*k) patch matrix for ``x`` (B, C, H, W)."""
    xp = _pad(x, padding)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * k * k)


def col2im(cols: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of ``im2col``: scatter-add patch rows back onto the input grid."""
    b, c, h, w = x_shape
    ho = _out_extent(h, k, stride, padding)
    wo = _out_extent(w, k, stride, padding)
    cols = np.ascontiguousarray(cols.reshape(b, ho, wo, c, k, k).transpose(4, 5, 0, 3, 1, 2))
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B,C,H,W) with ``weight`` (O,C,k,k)."""
    xd, wd = x.data, weight.data
    _check_conv(xd, wd, stride, padding)
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise ShapeError(f"expected square (O,C,k,k) weight, got {wd.shape}")
    if wd.shape[1] != xd.shape[1]:
        raise ShapeError(
            f"input has {xd.shape[1]} channels but weight expects {wd.shape[1]} (weight shape {wd.shape})"
        )
    b, _, h, w = xd.shape
    o, c, k, _ = wd.shape
    ho, wo = _out_extent(h, k, stride, padding), _out_extent(w, k, stride, padding)
    cols = im2col(xd, k, stride, padding)
    wmat = wd.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = col2im(g2 @ wmat, xd.shape, k, stride, padding) if x.requires_grad else None
        gw = (g2.T @ cols).reshape(wd.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor.make(np.ascontiguousarray(out), parents, backward)


def pad_edge(x: Tensor, p: int) -> Tensor:
    """Replicate-pad the two spatial axes by ``p``."""
    if p == 0:
        return x
    h, w = x.shape[2], x.shape[3]
    out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")

    def backward(g):
        rows = g[:, :, p : p + h, :].copy()
        rows[:, :, 0, :] += g[:, :, :p, :].sum(axis=2)
        rows[:, :, -1, :] += g[:, :, p + h :, :].sum(axis=2)
        gi = rows[:, :, :, p : p + w].copy()
        gi[:, :, :, 0] += rows[:, :, :, :p].sum(axis=3)
        gi[:, :, :, -1] += rows[:, :, :, p + w :].sum(axis=3)
        return (gi,)

    return Tensor.make(out, (x,), backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution; ``weight`` has shape (C, k, k)."""
    xd, wd = x.data, weight.data
    _check_conv(xd, wd, stride, padding)
    if wd.ndim != 3 or wd.shape[0] != xd.shape[1]:
        raise ShapeError(
            f"depthwise weight must be (C={xd.shape[1]}, k, k), got {wd.shape}"
        )
    b, c, h, w = xd.shape
    k = wd.shape[-1]
    ho, wo = _out_extent(h, k, stride, padding), _out_extent(w, k, stride, padding)
    xp = _pad(xd, padding)
    out = np.zeros((b, c, ho, wo), dtype=np.result_type(xd, wd))
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] * wd[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                if gxp is not None:
                    gxp[sl] += g * wd[None, :, i, j, None, None]
                gw[:, i, j] = np.einsum("bchw,bchw->c", g, xp[sl])
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor.make(out, parents, backward)


def separable_conv2d(
    x: Tensor,
    depthwise_weight: Tensor,
    pointwise_weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Depthwise k x k convolution followed by a 1 x 1 pointwise convolution."""
    return conv2d(depthwise_conv2d(x, depthwise_weight, None, stride, padding), pointwise_weight, bias)


# ---------------------------------------------------------------------- pooling
def _window_check(x: np.ndarray, k: int, stride: int):
    if x.ndim != 4:
        raise ShapeError(f"expected BCHW input, got shape {x.shape}")
    if k > x.shape[2] or k > x.shape[3]:
        raise ShapeError(f"pool window {k} exceeds spatial extent {x.shape[2:]}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")


def max_pool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    stride = k if stride is None else stride
    xd = x.data
    _window_check(xd, k, stride)
    win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    flat = win.reshape(b, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(xd)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            sel = arg == idx
            if sel.any():
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * sel
        return (gx,)

    return Tensor.make(np.ascontiguousarray(out), (x,), backward)


def avg_pool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    stride = k if stride is None else stride
    xd = x.data
    _window_check(xd, k, stride)
    win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    out = win.mean(axis=(-2, -1))
    scale = 1.0 / (k * k)

    def backward(g):
        gx = np.zeros_like(xd)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * scale
        return (gx,)

    return Tensor.make(out.astype(xd.dtype, copy=False), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,C)."""
    return x.mean(axis=(2, 3))


def global_max_pool(x: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,C)."""
    b, c = x.shape[:2]
    return x.reshape(b, c, -1).max(axis=2)


# ------------------------------------------------------------------- resampling
def _bilinear_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    # half-pixel centres, no corner alignment
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.floor(src).astype(int)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    mat = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - lam)
    np.add.at(mat, (rows, i1), lam)
    return mat


def upsample(x: Tensor, factor: int, mode: str = "nearest") -> Tensor:
    """Integer-factor spatial upsampling (nearest or bilinear)."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor!r}")
    xd = x.data
    if factor == 1:
        return x
    b, c, h, w = xd.shape
    if mode == "nearest":
        out = xd.repeat(factor, axis=2).repeat(factor, axis=3)

        def backward(g):
            return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

        return Tensor.make(out, (x,), backward)
    if mode == "bilinear":
        ah = _bilinear_matrix(h, factor, xd.dtype)
        aw = _bilinear_matrix(w, factor, xd.dtype)
        out = np.einsum("oh,bchw,pw->bcop", ah, xd, aw, optimize=True)

        def backward(g):
            return (np.einsum("oh,bcop,pw->bchw", ah, g, aw, optimize=True),)

        return Tensor.make(out, (x,), backward)
    raise ValueError(f"unknown upsample mode {mode!r}")


# ------------------------------------------------------------ activations, etc.
def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    return x.leaky_relu(slope)


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def relu(x: Tensor) -> Tensor:
    return x.relu()


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully-connected layer; ``weight`` is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = x @ weight.transpose(1, 0)
    if bias is not None:
        out = out + bias
    return out


fully_connected = linear


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of (B,C,H,W) or (B,C) input.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    xd = x.data
    if xd.shape[0] == 0 or xd.size == 0:
        raise ShapeError("batch_norm received an empty batch")
    axes = (0,) if xd.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if xd.ndim == 2 else (1, -1, 1, 1)
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)
    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(bshape)) * inv.reshape(bshape)
    out = (g_ * xhat + b_).astype(xd.dtype, copy=False)
    n = xd.size // xd.shape[1]

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        if training:
            dxhat = g * g_
            dx = inv.reshape(bshape) * (
                dxhat
                - dxhat.sum(axis=axes, keepdims=True) / n
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True) / n
            )
        else:
            dx = g * (g_ * inv.reshape(bshape))
        return dx, dgamma, dbeta

    return Tensor.make(out, (x, gamma, beta), backward)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of (N, K) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    ld = logits.data
    if ld.ndim == 1:
        ld = ld[None]
    n, k = ld.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels.tolist()}")
    lsm = log_softmax(ld)
    loss = -lsm[np.arange(n), labels].mean()
    shape = logits.shape

    def backward(g):
        p = np.exp(lsm)
        p[np.arange(n), labels] -= 1.0
        return ((g * p / n).astype(logits.dtype, copy=False).reshape(shape),)

    return Tensor.make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def mse(a: Tensor, b) -> Tensor:
    """Mean squared error; ``b`` may be a plain array target."""
    b = as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        gd = g * 2.0 * diff / n
        return gd, (-gd if b.requires_grad else None)

    return Tensor.make(np.asarray((diff * diff).mean(), dtype=a.dtype), (a, b), backward)


__all__ = [
    "ShapeError",
    "conv2d",
    "depthwise_conv2d",
    "separable_conv2d",
    "max_pool2d",
    "avg_pool2d",
    "global_avg_pool",
    "global_max_pool",
    "upsample",
    "leaky_relu",
    "sigmoid",
    "relu",
    "linear",
    "fully_connected",
    "batch_norm",
    "softmax",
    "softmax_cross_entropy",
    "mse",
    "im2col",
    "col2im",
    "_sigmoid",
]
