"""Parameter containers and standard layers."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import functional as F
from .tensor import COMPACT, Tensor


def kaiming_normal(rng: np.random.Generator, shape: tuple, fan_in: int, slope: float = F.LEAKY_SLOPE, dtype=COMPACT) -> np.ndarray:
    """He-normal initialisation with the Leaky ReLU gain."""
    std = np.sqrt(2.0 / ((1.0 + slope**2) * fan_in))
    return (rng.standard_normal(shape) * std).astype(dtype)


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=data.dtype, name=name)


class Module:
    """Container that discovers parameters, buffers and sub-modules by attribute."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    # buffers are non-trainable numpy arrays (running statistics)
    def register_buffer(self, name: str, value: np.ndarray) -> None:
        if "_buffers" not in self.__dict__:
            self.__dict__["_buffers"] = OrderedDict()
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def _children(self):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
        for key, child in self._children():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for key, value in self.__dict__.get("_buffers", {}).items():
            yield prefix + key, getattr(self, key)
        for key, child in self._children():
            yield from child.named_buffers(prefix + key + ".")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def to(self, dtype) -> "Module":
        """Cast parameters and buffers in place (e.g. to float64 for grad checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for key in list(m.__dict__.get("_buffers", {})):
                arr = getattr(m, key).astype(dtype)
                m._buffers[key] = arr
                object.__setattr__(m, key, arr)
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data.copy()
        for name, b in self.named_buffers():
            state[name] = np.array(b, copy=True)
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = [k for k in params if k not in state]
        if missing:
            raise KeyError(f"state is missing parameters: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        for m_name, module in self._named_modules():
            for key in list(module.__dict__.get("_buffers", {})):
                full = m_name + key
                if full in state:
                    arr = np.array(state[full], dtype=getattr(module, key).dtype, copy=True)
                    module._buffers[key] = arr
                    object.__setattr__(module, key, arr)

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for key, child in self._children():
            yield from child._named_modules(prefix + key + ".")


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, padding: int | None = None,
                 bias: bool = True, rng: np.random.Generator | None = None, dtype=COMPACT,
                 pad_mode: str = "zeros"):
        rng = rng if rng is not None else np.random.default_rng(0)
        if pad_mode not in ("zeros", "edge"):
            raise ValueError(f"unknown pad_mode {pad_mode!r}")
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.pad_mode = pad_mode
        self.weight = parameter(kaiming_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k, dtype=dtype))
        self.bias = parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if self.pad_mode == "edge":
            return F.conv2d(F.pad_edge(x, self.padding), self.weight, self.bias, self.stride, 0)
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class SeparableConv2d(Module):
    """Depthwise k x k conv (one filter per input channel) then 1 x 1 conv."""

    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=COMPACT):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2
        self.depthwise = parameter(kaiming_normal(rng, (in_ch, k, k), k * k, dtype=dtype))
        self.pointwise = parameter(kaiming_normal(rng, (out_ch, in_ch, 1, 1), in_ch, dtype=dtype))
        self.bias = parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.separable_conv2d(x, self.depthwise, self.pointwise, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=COMPACT):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = parameter(kaiming_normal(rng, (out_features, in_features), in_features, dtype=dtype))
        self.bias = parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=COMPACT):
        self.momentum = momentum
        self.eps = eps
        self.gamma = parameter(np.ones(channels, dtype=dtype))
        self.beta = parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)
