"""Layer primitives and a minimal module/parameter container."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """uniform(-a, a) with a = sqrt(1/fan_in)."""
    a = math.sqrt(1.0 / fan_in)
    return rng.uniform(-a, a, size=shape).astype(np.float32)


class Module:
    """Base class: recursive named-parameter discovery over attributes."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix=f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(prefix=f"{key}.{i}."))
                    elif isinstance(item, Tensor):
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        for name, p in params.items():
            if name not in state:
                raise ShapeError(f"state dict is missing parameter '{name}'")
            arr = state[name]
            if arr.shape != p.data.shape:
                raise ShapeError(
                    f"parameter '{name}' has shape {p.data.shape}, state has {arr.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.w = Tensor(uniform_init(rng, (in_features, out_features), in_features),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_features, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, pad: int = 0):
        self.stride = stride
        self.pad = pad
        fan_in = in_ch * kernel * kernel
        self.w = Tensor(uniform_init(rng, (out_ch, in_ch, kernel, kernel), fan_in),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class ConvTranspose2d(Module):
    """4x4 stride-2 pad-1 upsampler: doubles spatial extents."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        fan_in = in_ch * 16
        self.w = Tensor(uniform_init(rng, (in_ch, out_ch, 4, 4), fan_in),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return ad.conv_transpose2d(x, self.w, self.b, stride=2, pad=1)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta)


class ConvResBlock(Module):
    """3x3 conv -> ReLU -> 1x1 conv, residual add, post-add ReLU."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv3 = Conv2d(channels, channels, 3, rng, stride=1, pad=1)
        self.conv1 = Conv2d(channels, channels, 1, rng, stride=1, pad=0)

    def __call__(self, x):
        h = ad.relu(self.conv3(x))
        return ad.relu(x + self.conv1(h))


class LinearResBlock(Module):
    """Linear with residual add and a single post-add ReLU."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.lin = Linear(dim, dim, rng)

    def __call__(self, x):
        return ad.relu(x + self.lin(x))
