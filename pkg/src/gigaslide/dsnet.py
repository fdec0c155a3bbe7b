"""Dual-stream slide classifier.

The thumbnail stream runs dense multi-scale separable blocks over the
thumbnail matrix T; the embedding stream runs concurrent bottleneck blocks
over the masked embedding matrix V. Both reach the same grid (T is twice
the resolution of V and is downsampled 8x, V 4x). A sigmoid stream gate
mixes them, channel attention re-weights the mix, and a point-wise conv,
global pooling and two fully-connected layers produce class logits.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import COMPACT, BatchNorm2d, Conv2d, Linear, Module, SeparableConv2d, Tensor, concat
from .autograd import functional as F
from .autograd.nn import kaiming_normal, parameter
from .sparse import (
    MaskedTensor,
    mask_downsample,
    masked_add,
    sparse_avg_pool,
    sparse_batch_norm,
    sparse_conv2d,
    sparse_global_pool,
    sparse_leaky_relu,
    sparse_max_pool,
    sparse_upsample,
)

log = logging.getLogger(__name__)

THUMB_BLOCKS = ((32, 64, 1), (64, 144, 2), (144, 256, 2), (256, 320, 1))
EMBED_BLOCKS = ((128, 144, 2), (144, 224, 1), (224, 256, 2), (256, 320, 1))


@dataclass
class DsnetConfig:
    """Architecture plus ablation switches; serializable to JSON."""

    levels: int = 3
    embed_channels: int = 128
    stem_channels: int = 32
    stem_kernel: int = 7
    thumb_blocks: tuple = THUMB_BLOCKS
    embed_blocks: tuple = EMBED_BLOCKS
    ms_kernels: tuple = (3, 5, 7)
    cb_kernel: int = 5
    cb_reduction: int = 4
    se_reduction: int = 4
    head_channels: int = 640
    hidden: int = 160
    classes: int = 2
    # ablation switches
    use_thumbnail: bool = True
    use_embedding: bool = True
    sparse: bool = True
    multi_scale: bool = True
    concurrent_bottleneck: bool = True
    spatial_bottleneck: bool = True
    stream_attention: bool = True
    channel_attention: bool = True
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DsnetConfig":
        d = json.loads(text)
        for key in ("thumb_blocks", "embed_blocks"):
            if key in d:
                d[key] = tuple(tuple(b) for b in d[key])
        if "ms_kernels" in d:
            d["ms_kernels"] = tuple(d["ms_kernels"])
        return cls(**d)

    def with_embedding_channels(self, c: int) -> "DsnetConfig":
        blocks = ((c,) + tuple(self.embed_blocks[0][1:]),) + tuple(self.embed_blocks[1:])
        return DsnetConfig(**{**asdict(self), "embed_channels": c, "embed_blocks": blocks})


# ------------------------------------------------------------------ operators
class MaskOps:
    """Sparse operators, or their dense counterparts when ``sparse`` is False.

    In dense mode masks are ignored and treated as all ones; the convolution
    keeps the same footprint normalization so the two modes agree exactly
    on fully observed inputs.
    """

    def __init__(self, sparse: bool = True):
        self.sparse = sparse

    def wrap(self, features: Tensor, mask: np.ndarray) -> MaskedTensor:
        if self.sparse:
            return MaskedTensor.from_dense(features, mask)
        b, _, h, w = features.shape
        return MaskedTensor(features, np.ones((b, 1, h, w), dtype=features.dtype))

    def conv(self, x: MaskedTensor, w: Tensor, b, stride=1, padding=0) -> MaskedTensor:
        if self.sparse:
            return sparse_conv2d(x, w, b, stride, padding)
        k = w.shape[-1]
        out = F.conv2d(x.features, w, None, stride, padding)
        ones = np.ones((1, 1) + x.shape[2:], dtype=out.dtype)
        count = F.conv2d(Tensor(ones), Tensor(np.ones((1, 1, k, k), out.dtype)), None, stride, padding).data
        out = out * (1.0 / (count + 1e-8)).astype(out.dtype)
        if b is not None:
            out = out + b.reshape(1, -1, 1, 1)
        return MaskedTensor(out, np.ones((out.shape[0], 1) + out.shape[2:], dtype=out.dtype))

    def bn(self, x: MaskedTensor, m: "BatchNorm2d") -> MaskedTensor:
        if self.sparse:
            return sparse_batch_norm(x, m.gamma, m.beta, m.running_mean, m.running_var, m.training, m.momentum, m.eps)
        return MaskedTensor(m(x.features), x.mask)

    def act(self, x: MaskedTensor) -> MaskedTensor:
        return sparse_leaky_relu(x)

    def max_pool(self, x: MaskedTensor, k=2) -> MaskedTensor:
        if self.sparse:
            return sparse_max_pool(x, k)
        out = F.max_pool2d(x.features, k, k)
        return MaskedTensor(out, mask_downsample(x.mask, k))

    def avg_pool(self, x: MaskedTensor, k=2) -> MaskedTensor:
        if self.sparse:
            return sparse_avg_pool(x, k)
        return MaskedTensor(F.avg_pool2d(x.features, k, k), mask_downsample(x.mask, k))

    def upsample(self, x: MaskedTensor, f=2) -> MaskedTensor:
        return sparse_upsample(x, f)

    def add(self, a: MaskedTensor, b: MaskedTensor) -> MaskedTensor:
        if self.sparse:
            return masked_add(a, b)
        return MaskedTensor(a.features + b.features, np.maximum(a.mask, b.mask))

    def global_pool(self, x: MaskedTensor) -> Tensor:
        if self.sparse:
            return sparse_global_pool(x, allow_empty=True)
        return F.global_avg_pool(x.features)


def _crop(x: MaskedTensor, h: int, w: int) -> MaskedTensor:
    return MaskedTensor(x.features[:, :, :h, :w], x.mask[:, :, :h, :w])


def _pad_even(x: MaskedTensor) -> MaskedTensor:
    """Zero-pad (mask 0) bottom/right so both spatial extents are even."""
    _, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    if not (ph or pw):
        return x
    b = x.shape[0]
    f = x.features
    if ph:
        f = concat([f, Tensor(np.zeros((b, c, 1, w), f.dtype))], axis=2)
    if pw:
        f = concat([f, Tensor(np.zeros((b, c, h + ph, 1), f.dtype))], axis=3)
    m = np.pad(x.mask, ((0, 0), (0, 0), (0, ph), (0, pw)))
    return MaskedTensor(f, m)


# -------------------------------------------------------------- thumbnail
class MultiScaleBlock(Module):
    """Parallel separable convs (k = 3, 5, 7), concatenated, BN, Leaky ReLU.

    Output channels are split in equal thirds; the remainder goes to the
    first (k = 3) path.
    """

    def __init__(self, cin, cout, stride, kernels=(3, 5, 7), rng=None, dtype=COMPACT):
        n = len(kernels)
        if cout < n:
            raise ValueError(f"multi-scale block needs at least {n} output channels, got {cout}")
        base = cout // n
        split = [base] * n
        split[0] += cout - base * n
        self.split = tuple(split)
        self.kernels = tuple(kernels)
        self.stride = stride
        self.cin, self.cout = cin, cout
        self.paths = [SeparableConv2d(cin, c, k, stride, rng=rng, dtype=dtype) for c, k in zip(split, kernels)]
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.leaky_relu(self.bn(concat([p(x) for p in self.paths], axis=1)))


class PlainSeparableBlock(Module):
    """Single 3x3 separable conv block (multi-scale ablation)."""

    def __init__(self, cin, cout, stride, rng=None, dtype=COMPACT):
        self.cin, self.cout, self.stride = cin, cout, stride
        self.conv = SeparableConv2d(cin, cout, 3, stride, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x):
        return F.leaky_relu(self.bn(self.conv(x)))


class ThumbnailStream(Module):
    def __init__(self, cfg: DsnetConfig, rng):
        self.stem = Conv2d(3 * cfg.levels, cfg.stem_channels, cfg.stem_kernel, 2, rng=rng)
        self.stem_bn = BatchNorm2d(cfg.stem_channels)
        if cfg.multi_scale:
            self.blocks = [MultiScaleBlock(i, o, s, cfg.ms_kernels, rng) for i, o, s in cfg.thumb_blocks]
        else:
            self.blocks = [PlainSeparableBlock(i, o, s, rng) for i, o, s in cfg.thumb_blocks]

    def forward(self, t: Tensor) -> Tensor:
        h = F.leaky_relu(self.stem_bn(self.stem(t)))
        for blk in self.blocks:
            h = blk(h)
        return h


# -------------------------------------------------------------- embedding
class SparseConv(Module):
    def __init__(self, cin, cout, k, rng, bias=True, dtype=COMPACT):
        self.k = k
        self.weight = parameter(kaiming_normal(rng, (cout, cin, k, k), cin * k * k, dtype=dtype))
        self.bias = parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: MaskedTensor, ops: MaskOps, stride: int = 1) -> MaskedTensor:
        return ops.conv(x, self.weight, self.bias, stride, self.k // 2)


class SparseUnit(Module):
    """Sparse conv, sparse BN, optional Leaky ReLU."""

    def __init__(self, cin, cout, k, rng, act=True):
        self.conv = SparseConv(cin, cout, k, rng, bias=False)
        self.bn = BatchNorm2d(cout)
        self.act = act

    def forward(self, x, ops):
        y = ops.bn(self.conv(x, ops), self.bn)
        return ops.act(y) if self.act else y


def _channel_pad(x: MaskedTensor, cout: int) -> MaskedTensor:
    b, c, h, w = x.shape
    if c == cout:
        return x
    zeros = Tensor(np.zeros((b, cout - c, h, w), dtype=x.features.dtype))
    return MaskedTensor(concat([x.features, zeros], axis=1), x.mask)


class ConcurrentBottleneck(Module):
    """Channel bottleneck wrapped around a spatial (pool, conv, upsample, conv) bottleneck.

    reduce (1x1, ``cin // reduction`` channels) -> max-pool x2 -> kxk ->
    nearest x2 -> kxk -> expand (1x1) + shortcut. Stride 2 is applied by a
    2x2 sparse average pool in front of the reduce conv and on the shortcut.
    The shortcut zero-pads channels when ``cin != cout``. The expand BN
    gamma starts at zero so the block is the identity map at init.
    """

    def __init__(self, cin, cout, stride, k=5, reduction=4, spatial=True, rng=None):
        mid = max(cin // reduction, 1)
        if cout < cin:
            raise ValueError("concurrent bottleneck cannot shrink channels with a padded shortcut")
        self.cin, self.cout, self.stride, self.mid, self.k = cin, cout, stride, mid, k
        self.spatial = spatial
        self.reduce = SparseUnit(cin, mid, 1, rng)
        self.inner = SparseUnit(mid, mid, k, rng)
        self.outer = SparseUnit(mid, mid, k, rng)
        self.expand = SparseUnit(mid, cout, 1, rng, act=False)
        self.expand.bn.gamma.data[:] = 0.0

    def forward(self, x: MaskedTensor, ops: MaskOps) -> MaskedTensor:
        if self.stride == 2:
            x = ops.avg_pool(x, 2)
        h = self.reduce(x, ops)
        _, _, hh, ww = h.shape
        if self.spatial and min(hh, ww) >= 2:
            p = ops.max_pool(_pad_even(h), 2)
            p = self.inner(p, ops)
            u = _crop(ops.upsample(p, 2), hh, ww)
            h = self.outer(u, ops)
        else:
            h = self.outer(self.inner(h, ops), ops)
        y = self.expand(h, ops)
        return ops.add(y, _channel_pad(x, self.cout))


class SparseConvBlock(Module):
    """kxk sparse conv + BN + Leaky ReLU (concurrent-bottleneck ablation)."""

    def __init__(self, cin, cout, stride, k=3, rng=None):
        self.cin, self.cout, self.stride = cin, cout, stride
        self.unit = SparseUnit(cin, cout, k, rng)

    def forward(self, x, ops):
        if self.stride == 2:
            x = ops.avg_pool(x, 2)
        return self.unit(x, ops)


class EmbeddingStream(Module):
    def __init__(self, cfg: DsnetConfig, rng):
        if cfg.concurrent_bottleneck:
            self.blocks = [
                ConcurrentBottleneck(i, o, s, cfg.cb_kernel, cfg.cb_reduction, cfg.spatial_bottleneck, rng)
                for i, o, s in cfg.embed_blocks
            ]
        else:
            self.blocks = [SparseConvBlock(i, o, s, 3, rng) for i, o, s in cfg.embed_blocks]

    def forward(self, v: MaskedTensor, ops: MaskOps) -> MaskedTensor:
        for blk in self.blocks:
            v = blk(v, ops)
        return v


# ------------------------------------------------------------- aggregation
class AdaptiveAggregation(Module):
    """Stream gate s (one scalar per sample) then squeeze-excitation."""

    def __init__(self, channels, reduction=4, stream=True, channel=True, rng=None):
        self.stream = stream
        self.channel = channel
        if stream:
            self.gate = Linear(2 * channels, 1, rng=rng)
        if channel:
            self.squeeze = Linear(channels, channels // reduction, rng=rng)
            self.excite = Linear(channels // reduction, channels, rng=rng)

    def forward(self, t: Tensor, v: MaskedTensor, ops: MaskOps, force_s=None, force_channel=None):
        """Returns (mixed features, s of shape (B,), channel weights)."""
        if t.shape != v.shape:
            raise F.ShapeError(f"stream extents differ: thumbnail {t.shape} vs embedding {v.shape}")
        b = t.shape[0]
        if force_s is not None:
            s = Tensor(np.full((b, 1), force_s, dtype=t.dtype))
        elif self.stream:
            desc = concat([F.global_avg_pool(t), ops.global_pool(v)], axis=1)
            s = F.sigmoid(self.gate(desc))
        else:
            s = Tensor(np.full((b, 1), 0.5, dtype=t.dtype))
        s4 = s.reshape(b, 1, 1, 1)
        mixed = v.features * s4 + t * (1.0 - s4)
        if force_channel is not None:
            cw = Tensor(np.full((b, t.shape[1]), force_channel, dtype=t.dtype))
        elif self.channel:
            z = F.global_avg_pool(mixed)
            cw = F.sigmoid(self.excite(F.relu(self.squeeze(z))))
        else:
            cw = None
        if cw is not None:
            mixed = mixed * cw.reshape(b, -1, 1, 1)
        return mixed, s.reshape(b), cw


# ------------------------------------------------------------------- model
@dataclass
class DsnetOutput:
    logits: Tensor
    stream_score: np.ndarray | None  # s per sample, weight of the embedding stream
    cam_features: Tensor  # output of the head's point-wise conv
    mask: np.ndarray  # observation mask at head resolution
    extras: dict = field(default_factory=dict)


class DSNet(Module):
    def __init__(self, config: DsnetConfig | None = None):
        cfg = config or DsnetConfig()
        if not (cfg.use_thumbnail or cfg.use_embedding):
            raise ValueError("at least one stream is required")
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.ops = MaskOps(cfg.sparse)
        width = (cfg.thumb_blocks[-1][1] if cfg.use_thumbnail else cfg.embed_blocks[-1][1])
        if cfg.use_thumbnail:
            self.thumbnail = ThumbnailStream(cfg, rng)
        if cfg.use_embedding:
            self.embedding = EmbeddingStream(cfg, rng)
        if cfg.use_thumbnail and cfg.use_embedding:
            if cfg.thumb_blocks[-1][1] != cfg.embed_blocks[-1][1]:
                raise ValueError("the two streams must end with the same channel count")
            self.aggregate = AdaptiveAggregation(width, cfg.se_reduction, cfg.stream_attention,
                                                 cfg.channel_attention, rng)
        self.head_conv = Conv2d(width, cfg.head_channels, 1, rng=rng)
        self.head_bn = BatchNorm2d(cfg.head_channels)
        self.fc1 = Linear(2 * cfg.head_channels, cfg.hidden, rng=rng)
        self.fc2 = Linear(cfg.hidden, cfg.classes, rng=rng)

    def forward(self, t: Tensor | None, v: Tensor | None, mask: np.ndarray | None = None,
                force_s=None, force_channel=None) -> DsnetOutput:
        cfg = self.config
        ops = self.ops
        if cfg.use_thumbnail and cfg.use_embedding:
            if t.shape[2] != 2 * v.shape[2] or t.shape[3] != 2 * v.shape[3]:
                raise F.ShapeError(f"thumbnail extent {t.shape[2:]} must be twice the embedding extent {v.shape[2:]}")
        tf = self.thumbnail(t) if cfg.use_thumbnail else None
        vf = None
        if cfg.use_embedding:
            if mask is None:
                mask = np.ones((v.shape[0], 1) + v.shape[2:], dtype=v.dtype)
            mask = np.asarray(mask, dtype=v.dtype)
            if mask.ndim == 3:
                mask = mask[:, None]
            vf = self.embedding(ops.wrap(v, mask), ops)
        s = None
        if tf is not None and vf is not None:
            if tf.shape != vf.shape:
                raise F.ShapeError(
                    f"stream outputs disagree: thumbnail {tf.shape} vs embedding {vf.shape}; "
                    f"inputs T {t.shape}, V {v.shape}"
                )
            fused, s_t, _ = self.aggregate(tf, vf, ops, force_s, force_channel)
            s = s_t.data.copy()
            head_mask = vf.mask
        elif tf is not None:
            fused = tf
            head_mask = np.ones((tf.shape[0], 1) + tf.shape[2:], dtype=tf.dtype)
        else:
            fused = vf.features
            head_mask = vf.mask
        cam = F.leaky_relu(self.head_bn(self.head_conv(fused)))
        pooled = concat([ops.global_pool(ops.wrap(cam, head_mask)), F.global_max_pool(cam)], axis=1)
        hidden = F.leaky_relu(self.fc1(pooled))
        return DsnetOutput(self.fc2(hidden), s, cam, head_mask)


# ------------------------------------------------------------ accounting
def count_params(model: Module) -> dict:
    """Trainable scalar count per top-level block, plus ``total``."""
    out = {}
    if isinstance(model, DSNet):
        groups = []
        if model.config.use_thumbnail:
            groups.append(("thumbnail.stem", [model.thumbnail.stem, model.thumbnail.stem_bn]))
            groups += [(f"thumbnail.block{i}", [b]) for i, b in enumerate(model.thumbnail.blocks)]
        if model.config.use_embedding:
            groups += [(f"embedding.block{i}", [b]) for i, b in enumerate(model.embedding.blocks)]
        if hasattr(model, "aggregate"):
            groups.append(("aggregation", [model.aggregate]))
        groups.append(("head", [model.head_conv, model.head_bn, model.fc1, model.fc2]))
        for name, mods in groups:
            out[name] = int(sum(m.num_parameters() for m in mods))
    else:
        for name, p in model.named_parameters():
            top = name.split(".")[0]
            out[top] = out.get(top, 0) + p.size
    out["total"] = int(model.num_parameters())
    if sum(v for k, v in out.items() if k != "total") != out["total"]:
        raise AssertionError("per-block counts do not add up to the total")
    return out


def architecture_table(model: DSNet) -> list[dict]:
    """Rows of (stream, block, in, out, kernel, stride) as constructed."""
    rows = []
    cfg = model.config
    if cfg.use_thumbnail:
        st = model.thumbnail.stem
        rows.append(dict(stream="Thumbnail", block="Conv", cin=st.weight.shape[1], cout=st.weight.shape[0],
                         kernel=str(st.weight.shape[-1]), stride=st.stride))
        for b in model.thumbnail.blocks:
            kern = ",".join(str(k) for k in b.kernels) if isinstance(b, MultiScaleBlock) else "3"
            rows.append(dict(stream="Thumbnail", block="MS" if isinstance(b, MultiScaleBlock) else "SepConv",
                             cin=b.cin, cout=b.cout, kernel=kern, stride=b.stride))
    if cfg.use_embedding:
        for b in model.embedding.blocks:
            is_cb = isinstance(b, ConcurrentBottleneck)
            rows.append(dict(stream="Embedding", block="CB" if is_cb else "SparseConv", cin=b.cin, cout=b.cout,
                             kernel=str(b.k if is_cb else 3), stride=b.stride))
    return rows


# ---------------------------------------------------------------- grad-cam
def cam_from_gradients(features: np.ndarray, grads: np.ndarray, factor: int) -> np.ndarray:
    """(B, C, h, w) features and gradients -> (B, h * factor, w * factor) map in [0, 1].

    Channel weights are the spatial mean of the gradients; the positive part
    of the weighted sum is upsampled bilinearly and min-max normalized per
    sample. A map with no spread (including all-negative evidence) is zeros.
    """
    weights = grads.mean(axis=(2, 3), keepdims=True)
    cam = np.maximum((weights * features).sum(axis=1, keepdims=True), 0.0)
    up = F.upsample(Tensor(cam), int(factor), "bilinear").data[:, 0] if factor > 1 else cam[:, 0]
    lo = up.min(axis=(1, 2), keepdims=True)
    span = up.max(axis=(1, 2), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (up - lo) / safe, 0.0).astype(np.float64)


def grad_cam(model, t: Tensor | None, v: Tensor | None, mask=None, target_class: int = 1) -> np.ndarray:
    """Class activation maps (B, H_T, W_T) in [0, 1] at thumbnail resolution.

    Gradients of the target logit are taken at the head's point-wise conv
    output (``cam_features``). Works for any model returning
    :class:`DsnetOutput`; without a thumbnail input the map is returned at
    twice the embedding extent.
    """
    was = model.training
    model.eval()
    out = model(t, v, mask)
    feats = out.cam_features
    model.zero_grad()
    out.logits[:, target_class].sum().backward()
    if t is not None:
        factor = t.shape[2] // feats.shape[2]
    else:
        factor = 2 * v.shape[2] // feats.shape[2]
    cam = cam_from_gradients(feats.data, feats.grad, factor)
    model.zero_grad()
    model.train(was)
    return cam
