"""Operators on feature maps paired with a binary observation mask.

Unobserved sites carry exact zeros and are excluded from every statistic.
With an all-ones mask each operator reduces to its dense counterpart.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .autograd import functional as F

log = logging.getLogger(__name__)

SPARSE_EPS = 1e-8


class EmptyObservationError(ValueError):
    """Every mask entry is zero, so no statistic is defined."""


@dataclass
class MaskedTensor:
    """Features (B,C,H,W) plus a float 0/1 mask (B,1,H,W).

    The mask is plain data and never carries gradient.
    """

    features: Tensor
    mask: np.ndarray

    def __post_init__(self):
        f, m = self.features.shape, self.mask.shape
        if len(f) != 4 or len(m) != 4 or m[1] != 1 or f[0] != m[0] or f[2:] != m[2:]:
            raise F.ShapeError(f"mask {m} does not match features {f}")

    @property
    def shape(self):
        return self.features.shape

    def validate(self) -> None:
        """Assert the mask invariants (binary, zeros where unobserved)."""
        m = self.mask
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask must contain only 0 and 1")
        if np.any(self.features.data * (1 - m) != 0):
            raise ValueError("features must be exactly 0 where the mask is 0")

    @classmethod
    def from_dense(cls, features: Tensor, mask=None) -> "MaskedTensor":
        """Wrap ``features``, zeroing unobserved sites; ``mask=None`` means fully observed."""
        b, _, h, w = features.shape
        if mask is None:
            return cls(features, np.ones((b, 1, h, w), dtype=features.dtype))
        mask = np.asarray(mask, dtype=features.dtype)
        if mask.ndim == 3:
            mask = mask[:, None]
        return cls(features * mask, mask)


def _observed_count(mask: np.ndarray, axes) -> np.ndarray:
    return mask.sum(axis=axes)


def sparse_mean(x: MaskedTensor, allow_empty: bool = False) -> Tensor:
    """Per (sample, channel) mean over observed sites: sum(F*O) / sum(O)."""
    count = x.mask.sum(axis=(2, 3))  # (B,1)
    if np.any(count == 0):
        if not allow_empty:
            raise EmptyObservationError("observation mask is empty for at least one sample")
    safe = np.where(count == 0, 1.0, count).astype(x.features.dtype)
    return (x.features * x.mask).sum(axis=(2, 3)) / safe


def sparse_var(x: MaskedTensor, allow_empty: bool = False) -> Tensor:
    """Population variance of observed sites with the zero-entry correction.

    ``(sum_ij (F - mean)^2 - beta) / sum(O)`` where
    ``beta = sum_ij (1 - O) * mean^2`` removes the contribution of the
    zero-filled unobserved entries.
    """
    mean = sparse_mean(x, allow_empty=allow_empty)  # (B,C)
    count = x.mask.sum(axis=(2, 3))
    safe = np.where(count == 0, 1.0, count).astype(x.features.dtype)
    feats = x.features * x.mask
    centred = feats - mean.reshape(mean.shape + (1, 1))
    total = (centred * centred).sum(axis=(2, 3))
    unobserved = (1.0 - x.mask).sum(axis=(2, 3)).astype(x.features.dtype)
    beta = mean * mean * unobserved
    return (total - beta) / safe


def sparse_global_pool(x: MaskedTensor, allow_empty: bool = False) -> Tensor:
    """(B,C,H,W) masked -> (B,C) mean over observed sites."""
    return sparse_mean(x, allow_empty=allow_empty)


def sparse_batch_norm(
    x: MaskedTensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> MaskedTensor:
    """Batch normalization using statistics of observed sites only.

    Unobserved sites stay exactly zero and the mask passes through.
    """
    xd = x.features.data
    m = x.mask
    n = float(m.sum()) * 1.0
    if xd.shape[0] == 0:
        raise F.ShapeError("sparse_batch_norm received an empty batch")
    if training and n == 0:
        log.warning("sparse_batch_norm: empty observation, passing input through")
        return x
    bshape = (1, -1, 1, 1)
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)
    if training:
        mean = (xd * m).sum(axis=(0, 2, 3)) / n
        var = (((xd - mean.reshape(bshape)) ** 2) * m).sum(axis=(0, 2, 3)) / n
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).reshape(bshape)
    xhat = (xd - mean.reshape(bshape)) * inv * m
    out = ((g_ * xhat + b_) * m).astype(xd.dtype, copy=False)

    def backward(g):
        gm = g * m
        dgamma = (gm * xhat).sum(axis=(0, 2, 3))
        dbeta = gm.sum(axis=(0, 2, 3))
        if training:
            dxhat = gm * g_
            dx = inv * m * (
                dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True) / n
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True) / n
            )
        else:
            dx = gm * g_ * inv
        return dx, dgamma, dbeta

    return MaskedTensor(Tensor.make(out, (x.features, gamma, beta), backward), m)


def mask_downsample(mask: np.ndarray, k: int = 2, stride: int | None = None, padding: int = 0) -> np.ndarray:
    """A coarse cell is observed iff any fine cell under its window is observed."""
    stride = k if stride is None else stride
    mp = np.pad(mask, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else mask
    win = np.lib.stride_tricks.sliding_window_view(mp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.max(axis=(-2, -1)).astype(mask.dtype)


def _footprint_count(mask: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    mp = np.pad(mask, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else mask
    win = np.lib.stride_tricks.sliding_window_view(mp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.sum(axis=(-2, -1))


def sparse_conv2d(
    x: MaskedTensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    eps: float = SPARSE_EPS,
) -> MaskedTensor:
    """Normalized convolution.

    ``conv(F*O, w) / (conv(O, ones) + eps) + bias`` at output sites whose
    footprint holds at least one observed input; all other sites are 0
    with mask 0.
    """
    k = weight.shape[-1]
    numer = F.conv2d(x.features * x.mask, weight, None, stride, padding)
    count = _footprint_count(x.mask, k, stride, padding)
    out_mask = (count > 0).astype(x.mask.dtype)
    scale = (out_mask / (count + eps)).astype(numer.dtype)
    out = numer * scale
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1) * out_mask
    return MaskedTensor(out, out_mask)


def sparse_max_pool(x: MaskedTensor, k: int = 2) -> MaskedTensor:
    """Max over observed sites of each window; empty windows give 0 with mask 0."""
    big = np.asarray(np.finfo(x.features.dtype).max / 4, dtype=x.features.dtype)
    shifted = x.features + (x.mask - 1.0).astype(x.features.dtype) * big
    pooled = F.max_pool2d(shifted, k, k)
    out_mask = mask_downsample(x.mask, k)
    # empty windows hold ~-big; multiplying by 0 restores an exact 0 and kills the gradient
    return MaskedTensor(where_mask(pooled, out_mask), out_mask)


def sparse_avg_pool(x: MaskedTensor, k: int = 2) -> MaskedTensor:
    """Mean over observed sites of each k x k window (stride k)."""
    summed = F.avg_pool2d(x.features * x.mask, k, k) * float(k * k)
    count = _footprint_count(x.mask, k, k, 0)
    out_mask = (count > 0).astype(x.mask.dtype)
    scale = (out_mask / np.where(count == 0, 1.0, count)).astype(summed.dtype)
    return MaskedTensor(summed * scale, out_mask)


def sparse_upsample(x: MaskedTensor, factor: int = 2) -> MaskedTensor:
    """Nearest-neighbour upsampling of features and mask together."""
    feats = F.upsample(x.features, factor, "nearest")
    mask = x.mask.repeat(factor, axis=2).repeat(factor, axis=3)
    return MaskedTensor(feats, mask)


def sparse_leaky_relu(x: MaskedTensor, slope: float = F.LEAKY_SLOPE) -> MaskedTensor:
    return MaskedTensor(F.leaky_relu(x.features, slope), x.mask)


def where_mask(t: Tensor, mask: np.ndarray) -> Tensor:
    """Zero ``t`` where ``mask`` is 0 without propagating non-finite values."""
    keep = np.broadcast_to(mask > 0, t.shape)
    data = np.where(keep, t.data, 0).astype(t.dtype, copy=False)
    return Tensor.make(data, (t,), lambda g: (np.where(keep, g, 0),))


def masked_add(a: MaskedTensor, b: MaskedTensor) -> MaskedTensor:
    """Residual sum restricted to sites observed in the union of both masks."""
    mask = np.maximum(a.mask, b.mask)
    return MaskedTensor((a.features + b.features) * mask, mask)
