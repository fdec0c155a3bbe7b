"""Naive baseline: a small dense CNN on the level-0 thumbnail alone."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autograd import BatchNorm2d, Conv2d, Linear, Module, Tensor, concat
from ..autograd import functional as F
from ..dsnet import DsnetOutput


@dataclass
class NaiveConfig:
    widths: tuple = (16, 32, 64, 128)
    hidden: int = 64
    classes: int = 2
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)


class NaiveCNN(Module):
    """Strided 3x3 conv stack over RGB level-0 thumbnails, global pooling, two FCs.

    Takes the same (T, V, mask) arguments as the dual-stream model and
    ignores everything but the first three thumbnail channels.
    """

    def __init__(self, config: NaiveConfig | None = None):
        cfg = config or NaiveConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        chans = (3,) + cfg.widths
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, 2 if i < 3 else 1, rng=rng) for i in range(len(cfg.widths))]
        self.bns = [BatchNorm2d(c) for c in cfg.widths]
        self.fc1 = Linear(2 * cfg.widths[-1], cfg.hidden, rng=rng)
        self.fc2 = Linear(cfg.hidden, cfg.classes, rng=rng)

    def forward(self, t: Tensor, v=None, mask=None) -> DsnetOutput:
        h = t[:, :3]
        for conv, bn in zip(self.convs, self.bns):
            h = F.leaky_relu(bn(conv(h)))
        pooled = concat([F.global_avg_pool(h), F.global_max_pool(h)], axis=1)
        logits = self.fc2(F.leaky_relu(self.fc1(pooled)))
        ones = np.ones((h.shape[0], 1) + h.shape[2:], dtype=h.dtype)
        return DsnetOutput(logits, None, h, ones)
