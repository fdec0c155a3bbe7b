"""Sparse convolutional autoencoder for patch embedding.

Each patch is encoded by a shared residual trunk into two sets of maps: a
dense background map ``B`` and foreground candidates that are sparsified
per spatial site by a quantile mask ``M`` so only the strongest sites
survive in ``F``. Both are squashed into (0, 1). Two decoders reconstruct
the patch from ``F`` and ``B`` and their outputs are summed. A patch is
summarized by a C-vector: the sparse mean of ``F`` over ``M`` followed by
the dense mean of ``B``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .autograd import COMPACT, SGD, BatchNorm2d, Conv2d, Module, Tensor, no_grad
from .autograd import functional as F
from .sparse import MaskedTensor, sparse_global_pool

log = logging.getLogger(__name__)

GATE_EPS = 1e-6
TIE_RTOL = 1e-5
ENCODING_MODES = ("separated", "foreground", "background", "mixed")


class ScaeDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------- primitives
def gate(x: Tensor) -> Tensor:
    """Sigmoid squeezed into the open interval (0, 1) even in float32."""
    return F.sigmoid(x) * (1.0 - 2 * GATE_EPS) + GATE_EPS


def site_scores(candidates: np.ndarray) -> np.ndarray:
    """Per-site channel-max magnitude, (B, C, H, W) -> (B, H*W)."""
    return np.abs(candidates).max(axis=1).reshape(candidates.shape[0], -1)


def crosswise_mask(candidates: np.ndarray, rho: float) -> np.ndarray:
    """Binary (B, 1, H, W) mask keeping the top ``1 - rho`` fraction of sites.

    A site is active iff its score is strictly above the ``rho``-quantile of
    the patch's scores (and above 0). Ties at the cut, including scores
    that agree to within a relative 1e-5, are all excluded.
    """
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    cand = np.asarray(candidates)
    b, _, h, w = cand.shape
    scores = site_scores(cand)
    n = h * w
    k = min(n, max(0, math.ceil((1.0 - rho) * n - 1e-9)))
    if k == 0:
        return np.zeros((b, 1, h, w), dtype=cand.dtype)
    ordered = np.sort(scores, axis=1)
    cut = ordered[:, n - k - 1] if k < n else np.zeros(b, dtype=scores.dtype)
    cut = np.maximum(cut, 0.0)
    tol = TIE_RTOL * ordered[:, -1]
    active = scores > (cut + tol)[:, None]
    return active.reshape(b, 1, h, w).astype(cand.dtype)


def update_sparsity_rate(rho: float, batch_activation_rate: float, momentum: float) -> float:
    """Running-average update toward ``1 - rate``, clamped to (0.01, 0.99)."""
    new = momentum * rho + (1.0 - momentum) * (1.0 - batch_activation_rate)
    return float(min(max(new, 0.01), 0.99))


def pool_to_vector(f: Tensor, b: Tensor, m: np.ndarray) -> Tensor:
    """(B, Cf, h, w) sparse F, (B, Cb, h, w) dense B, mask -> (B, Cf + Cb).

    Samples with an empty mask get a zero foreground part.
    """
    fg = sparse_global_pool(MaskedTensor(f, m), allow_empty=True)
    bg = F.global_avg_pool(b)
    from .autograd import concat

    return concat([fg, bg], axis=1)


def prepare_patch(rgb: np.ndarray, size: int = 112) -> np.ndarray:
    """(S, S, 3) uint8 -> (3, size, size) float32 inverted intensities."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise F.ShapeError(f"expected an (S, S, 3) patch, got {rgb.shape}")
    if rgb.shape[:2] != (size, size):
        rgb = np.asarray(Image.fromarray(rgb).resize((size, size), Image.BOX))
    return (1.0 - rgb.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def nucleus_rich(rgb: np.ndarray, min_fraction: float = 0.05) -> bool:
    """True if enough pixels have all three channels below 70% of full scale."""
    dark = (rgb < 0.7 * 255).all(axis=-1)
    return bool(dark.mean() >= min_fraction)


# -------------------------------------------------------------------- model
class ConvBNAct(Module):
    def __init__(self, cin, cout, k, stride, rng, pad_mode="zeros", act=True):
        self.conv = Conv2d(cin, cout, k, stride, bias=False, rng=rng, pad_mode=pad_mode)
        self.bn = BatchNorm2d(cout)
        self.act = act

    def forward(self, x):
        y = self.bn(self.conv(x))
        return F.leaky_relu(y) if self.act else y


class ResidualStage(Module):
    """3x3 conv-BN plus a strided 1x1 projection, summed, then Leaky ReLU."""

    def __init__(self, cin, cout, stride, rng):
        self.main = ConvBNAct(cin, cout, 3, stride, rng, pad_mode="edge", act=False)
        self.skip = ConvBNAct(cin, cout, 1, stride, rng, act=False)

    def forward(self, x):
        return F.leaky_relu(self.main(x) + self.skip(x))


class Decoder(Module):
    """Conv at 14x14, then three (bilinear x2, conv) steps up to 112x112."""

    def __init__(self, cin, widths, rng):
        chans = [cin] + list(widths)
        self.blocks = [ConvBNAct(chans[i], chans[i + 1], 3, 1, rng) for i in range(len(widths))]
        self.out = Conv2d(chans[-1], 3, 3, 1, rng=rng)
        self.out.weight.data[:] = 0.0  # zero image at initialization

    def forward(self, x):
        y = self.blocks[0](x)
        for blk in self.blocks[1:]:
            y = blk(F.upsample(y, 2, "bilinear"))
        return self.out(F.upsample(y, 2, "bilinear"))


@dataclass
class ScaeConfig:
    input_size: int = 112
    widths: tuple = (32, 64, 96, 128)
    strides: tuple = (2, 2, 2, 1)
    fg_channels: int = 96
    bg_channels: int = 32
    fg_decoder: tuple = (48, 32, 16)
    bg_decoder: tuple = (32, 16, 8)
    rho: float = 0.9
    rho_momentum: float = 0.9
    seed: int = 0

    @property
    def embed_channels(self) -> int:
        return self.fg_channels + self.bg_channels


@dataclass
class Encoding:
    candidates: Tensor  # foreground logits before masking
    fg: Tensor  # sparse F, exact zeros where mask is 0
    bg: Tensor  # dense B
    mask: np.ndarray  # (B, 1, h, w)


class Scae(Module):
    def __init__(self, config: ScaeConfig | None = None):
        cfg = config or ScaeConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        chans = (3,) + tuple(cfg.widths)
        self.trunk = [ResidualStage(chans[i], chans[i + 1], cfg.strides[i], rng) for i in range(len(cfg.widths))]
        self.fg_head = Conv2d(cfg.widths[-1], cfg.fg_channels, 1, rng=rng)
        self.bg_head = Conv2d(cfg.widths[-1], cfg.bg_channels, 1, rng=rng)
        self.fg_decoder = Decoder(cfg.fg_channels, cfg.fg_decoder, rng)
        self.bg_decoder = Decoder(cfg.bg_channels, cfg.bg_decoder, rng)
        self.register_buffer("rho_state", np.array([cfg.rho], dtype=np.float64))

    @property
    def rho(self) -> float:
        return float(self.rho_state[0])

    @rho.setter
    def rho(self, value: float) -> None:
        self.rho_state[0] = value

    def encode(self, x: Tensor) -> Encoding:
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (s, s):
            raise F.ShapeError(f"encoder expects (B, 3, {s}, {s}), got {x.shape}")
        h = x
        for stage in self.trunk:
            h = stage(h)
        cand = self.fg_head(h)
        mask = crosswise_mask(cand.data, self.rho)
        fg = gate(cand) * mask  # mask carries no gradient
        bg = gate(self.bg_head(h))
        return Encoding(cand, fg, bg, mask)

    def decode(self, fg: Tensor, bg: Tensor) -> Tensor:
        return self.fg_decoder(fg) + self.bg_decoder(bg)

    def forward(self, x: Tensor):
        enc = self.encode(x)
        return self.decode(enc.fg, enc.bg), enc

    def embed(self, x: Tensor, mode: str = "separated") -> np.ndarray:
        """Patch batch -> (B, C) embedding vectors (no gradient)."""
        with no_grad():
            enc = self.encode(x)
            return _pool_mode(enc, mode)


def _pool_mode(enc: Encoding, mode: str) -> np.ndarray:
    if mode not in ENCODING_MODES:
        raise ValueError(f"unknown encoding mode {mode!r}; choose from {ENCODING_MODES}")
    if mode == "separated":
        return pool_to_vector(enc.fg, enc.bg, enc.mask).data
    bg = F.global_avg_pool(enc.bg).data
    if mode == "background":
        return bg
    fg = sparse_global_pool(MaskedTensor(enc.fg, enc.mask), allow_empty=True).data
    if mode == "foreground":
        return fg
    dense_fg = F.global_avg_pool(gate(enc.candidates)).data  # no foreground/background split
    return np.concatenate([dense_fg, bg], axis=1)


def mode_channels(config: ScaeConfig, mode: str) -> int:
    return {
        "separated": config.embed_channels,
        "foreground": config.fg_channels,
        "background": config.bg_channels,
        "mixed": config.embed_channels,
    }[mode]


# ---------------------------------------------------------------- training
@dataclass
class ScaeTrainConfig:
    lr: float = 0.03
    momentum: float = 0.8
    weight_decay: float = 1e-5
    batch: int = 8
    epochs: int = 6
    seed: int = 0


@dataclass
class ScaeHistory:
    initial_val_mse: float = float("nan")
    blind_val_mse: float = float("nan")
    train_loss: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    activation_rate: list = field(default_factory=list)


def reconstruction_mse(model: Scae, patches: np.ndarray, batch: int = 32) -> float:
    """Mean squared reconstruction error over ``patches`` in eval mode."""
    was = model.training
    model.eval()
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(patches), batch):
            x = Tensor(patches[i : i + batch])
            recon, _ = model(x)
            total += float(((recon.data - x.data) ** 2).sum(dtype=np.float64))
            count += x.data.size
    model.train(was)
    return total / max(count, 1)


def blind_mse(train: np.ndarray, val: np.ndarray) -> float:
    """MSE of always predicting the mean training image."""
    mean = train.astype(np.float64).mean(axis=0)
    return float(((val - mean) ** 2).mean())


def train_scae(train: np.ndarray, val: np.ndarray, config: ScaeTrainConfig | None = None,
               model: Scae | None = None, scae_config: ScaeConfig | None = None, on_emit=None):
    """Minimize reconstruction MSE with Nesterov SGD.

    ``train``/``val`` are (N, 3, s, s) float32 arrays from ``prepare_patch``.
    ``on_emit(fg, mask, rho)`` is called for every encoded training batch.
    Returns (model, history).
    """
    cfg = config or ScaeTrainConfig()
    model = model or Scae(scae_config)
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, nesterov=True, weight_decay=cfg.weight_decay)
    hist = ScaeHistory()
    hist.initial_val_mse = reconstruction_mse(model, val)
    hist.blind_val_mse = blind_mse(train, val)
    log.info("scae epoch 0: val mse %.6f (blind %.6f)", hist.initial_val_mse, hist.blind_val_mse)
    m = model.config.rho_momentum
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train))
        losses, rates = [], []
        for i in range(0, len(order), cfg.batch):
            x = Tensor(train[order[i : i + cfg.batch]])
            recon, enc = model(x)
            if on_emit is not None:
                on_emit(enc.fg.data, enc.mask, model.rho)
            loss = F.mse(recon, x)
            if not np.isfinite(loss.data):
                raise ScaeDivergedError(
                    f"non-finite reconstruction loss at epoch {epoch + 1}, batch {i // cfg.batch}; "
                    f"rho={model.rho:.4f}, last finite losses {losses[-3:]}"
                )
            model.zero_grad()
            loss.backward()
            opt.step()
            rate = float(enc.mask.mean())
            model.rho = update_sparsity_rate(model.rho, rate, m)
            losses.append(float(loss.data))
            rates.append(rate)
        hist.train_loss.append(float(np.mean(losses)))
        hist.activation_rate.append(float(np.mean(rates)))
        hist.rho.append(model.rho)
        hist.val_mse.append(reconstruction_mse(model, val))
        log.info("scae epoch %d: train %.6f val %.6f rho %.4f", epoch + 1, hist.train_loss[-1], hist.val_mse[-1], model.rho)
    model.eval()
    return model, hist


@dataclass
class RhoProbe:
    rho: float
    val_mse: float


def search_sparsity_rate(train: np.ndarray, val: np.ndarray, lo: float = 0.6, hi: float = 0.98,
                         max_probes: int = 6, probe_config: ScaeTrainConfig | None = None,
                         scae_config: ScaeConfig | None = None):
    """Bisect ``[lo, hi]`` for the rho with the lowest validation MSE.

    Each probe trains a fresh model from the same seed. Both endpoints are
    probed first; each further probe bisects the half next to the better
    endpoint. Returns (best rho, list of probes in evaluation order).
    """
    if not (0 < lo <= hi < 1):
        raise ValueError("search range must satisfy 0 < lo <= hi < 1")
    pcfg = probe_config or ScaeTrainConfig(epochs=1)
    base = scae_config or ScaeConfig()
    probes: list[RhoProbe] = []

    def probe(rho):
        cfg = ScaeConfig(**{**base.__dict__, "rho": rho})
        model, hist = train_scae(train, val, pcfg, scae_config=cfg)
        p = RhoProbe(float(rho), hist.val_mse[-1])
        probes.append(p)
        log.info("rho probe %d: rho=%.4f val mse=%.6f", len(probes), p.rho, p.val_mse)
        return p

    a = probe(lo)
    if hi == lo:
        return lo, probes
    b = probe(hi)
    while len(probes) < max_probes:
        mid = probe((a.rho + b.rho) / 2)
        if a.val_mse <= b.val_mse:
            b = mid
        else:
            a = mid
    best = min(probes, key=lambda p: (p.val_mse, p.rho))
    if best in probes[:2] and len(probes) > 2 and all(p.val_mse >= best.val_mse for p in probes[2:]):
        log.warning("rho search did not improve on the range endpoints; returning best probe %.4f", best.rho)
    return best.rho, probes


def sample_training_patches(slides, grids, patch_size: int, per_slide: int, rng, size: int = 112,
                            rich_fraction: float = 0.9) -> np.ndarray:
    """Draw kept patches so that at least ``rich_fraction`` are nucleus-rich."""
    rich, plain = [], []
    for slide, grid in zip(slides, grids):
        r0, c0 = grid.offset
        cells = np.argwhere(grid.kept) + np.array([r0, c0])
        if len(cells) == 0:
            continue
        picks = cells[rng.permutation(len(cells))[: per_slide * 2]]
        got = 0
        for r, c in picks:
            rgb = slide.read_region(int(r) * patch_size, int(c) * patch_size, patch_size, patch_size)
            x = prepare_patch(rgb, size)
            (rich if nucleus_rich(rgb) else plain).append(x)
            got += 1
            if got >= per_slide:
                break
    n_total = len(rich) + len(plain)
    n_plain = min(len(plain), int(math.floor((1 - rich_fraction) * n_total)))
    out = rich + plain[:n_plain]
    order = rng.permutation(len(out))
    return np.stack([out[i] for i in order]).astype(COMPACT) if out else np.zeros((0, 3, size, size), COMPACT)


# ----------------------------------------------------------------- slides
@dataclass
class EmbeddingMatrix:
    data: np.ndarray  # (C, H, W)
    mask: np.ndarray  # (H, W), 1 = kept patch
    slide_id: str
    patch_size: int
    mode: str = "separated"

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def encode_slide_modes(slide, model: Scae, grid, patch_size: int = 256, modes=("separated",),
                       batch: int = 32) -> "dict[str, EmbeddingMatrix]":
    """Embed every kept cell of a (cropped) patch grid once per encoding mode.

    The encoder runs a single time per batch; each mode pools its own
    vector from the shared encoding. Sifted cells stay zero.
    ``grid.offset`` locates the grid on the slide in patch units.
    """
    for mode in modes:
        if mode not in ENCODING_MODES:
            raise ValueError(f"unknown encoding mode {mode!r}; choose from {ENCODING_MODES}")
    model.eval()
    r0, c0 = grid.offset
    cells = np.argwhere(grid.kept)
    size = model.config.input_size
    vecs = {m: [] for m in modes}
    for i in range(0, len(cells), batch):
        chunk = cells[i : i + batch]
        xs = [
            prepare_patch(slide.read_region((r0 + r) * patch_size, (c0 + c) * patch_size, patch_size, patch_size), size)
            for r, c in chunk
        ]
        with no_grad():
            enc = model.encode(Tensor(np.stack(xs)))
            for m in modes:
                vecs[m].append(_pool_mode(enc, m))
    h, w = grid.shape
    mask = grid.kept.astype(COMPACT)
    out = {}
    for m in modes:
        data = np.zeros((mode_channels(model.config, m), h, w), dtype=COMPACT)
        if vecs[m]:
            v = np.concatenate(vecs[m], axis=0)
            data[:, cells[:, 0], cells[:, 1]] = v.T
        out[m] = EmbeddingMatrix(data, mask.copy(), slide.manifest.slide_id, patch_size, m)
    return out


def encode_slide(slide, model: Scae, grid, patch_size: int = 256, mode: str = "separated",
                 batch: int = 32) -> EmbeddingMatrix:
    """Embed every kept cell of a (cropped) patch grid; sifted cells stay zero.

    ``grid.offset`` locates the grid on the slide in patch units.
    """
    return encode_slide_modes(slide, model, grid, patch_size, (mode,), batch)[mode]
