"""AdamW and Nesterov SGD with a warm-up / step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    """A parameter gradient contained NaN or inf; the step was not applied."""


@dataclass
class WarmupStepDecay:
    """Linear warm-up from ``floor`` to ``peak`` then division by ``factor`` every ``every`` epochs."""

    peak: float = 1e-4
    floor: float = 1e-6
    warmup_epochs: int = 5
    factor: float = 5.0
    every: int = 30
    steps_per_epoch: int = 1

    def __post_init__(self):
        if not (0 < self.floor < self.peak):
            raise ValueError(f"need 0 < floor < peak, got floor={self.floor}, peak={self.peak}")
        if self.factor <= 1:
            raise ValueError(f"decay factor must exceed 1, got {self.factor}")

    def lr(self, epoch: int, step: int = 0) -> float:
        warm_steps = self.warmup_epochs * self.steps_per_epoch
        t = epoch * self.steps_per_epoch + step
        if warm_steps > 0 and t < warm_steps:
            return self.floor + (self.peak - self.floor) * t / warm_steps
        return self.peak / self.factor ** (epoch // self.every)


@dataclass
class OptimizerState:
    moments: list = field(default_factory=list)
    second_moments: list = field(default_factory=list)
    step: int = 0


class Optimizer:
    def __init__(self, params, lr: float):
        self.params: list[Tensor] = list(params)
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.state = OptimizerState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self) -> list[np.ndarray]:
        grads = []
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                name = p.name or f"param[{i}]"
                raise NonFiniteGradientError(f"non-finite gradient in {name} (shape {p.shape})")
            grads.append(g)
        return grads

    def set_lr(self, lr: float) -> None:
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr


class AdamW(Optimizer):
    """Adam with decoupled weight decay (decay applied to the weights, not the gradient)."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-5):
        super().__init__(params, lr)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state.moments = [np.zeros_like(p.data) for p in self.params]
        self.state.second_moments = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = self._grads()
        b1, b2 = self.betas
        self.state.step += 1
        t = self.state.step
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p, g, m, v in zip(self.params, grads, self.state.moments, self.state.second_moments):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.dtype, copy=False)


class SGD(Optimizer):
    """SGD with (optionally Nesterov) momentum and L2 weight decay."""

    def __init__(self, params, lr: float = 0.03, momentum: float = 0.0, nesterov: bool = False, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.state.moments = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = self._grads()
        self.state.step += 1
        mu = self.momentum
        for p, g, buf in zip(self.params, grads, self.state.moments):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if mu:
                buf *= mu
                buf += g
                g = g + mu * buf if self.nesterov else buf
            p.data -= (self.lr * g).astype(p.dtype, copy=False)


def make_optimizer(params, kind: str, **kwargs) -> Optimizer:
    if kind == "adamw":
        return AdamW(params, **kwargs)
    if kind in ("sgd", "sgd_nesterov"):
        kwargs.setdefault("nesterov", kind == "sgd_nesterov")
        return SGD(params, **kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")
