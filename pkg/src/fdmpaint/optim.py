"""Adam optimizer and the warmup-then-cosine learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import ContractError, GradientError
from .autodiff import Tensor


@dataclass
class WarmupCosineSchedule:
    """Linear ramp from 0 to ``peak_lr`` over the first epoch, cosine to 0 after."""

    total_epochs: int
    peak_lr: float = 2e-4
    warmup_epochs: float = 1.0

    def at(self, epoch_fraction: float) -> float:
        if epoch_fraction < 0:
            raise ContractError(f"epoch_fraction must be >= 0, got {epoch_fraction}")
        if epoch_fraction > self.total_epochs:
            raise ContractError(
                f"epoch_fraction {epoch_fraction} exceeds total_epochs {self.total_epochs}"
            )
        if epoch_fraction < self.warmup_epochs:
            return self.peak_lr * epoch_fraction / self.warmup_epochs
        span = self.total_epochs - self.warmup_epochs
        if span <= 0:
            return self.peak_lr
        progress = (epoch_fraction - self.warmup_epochs) / span
        return self.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class Adam:
    """Adam over a named parameter dict. Defaults beta1=0, beta2=0.9.

    With beta1=0 the first moment equals the current gradient, so the update
    direction is the sign-normalized gradient from step one.
    """

    params: dict[str, Tensor]
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.9
    eps: float = 1e-8
    step_count: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name, p in self.params.items():
            self._m[name] = np.zeros_like(p.data)
            self._v[name] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        """Apply one bias-corrected update to every parameter with a gradient."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for parameter '{name}'")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
