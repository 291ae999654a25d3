"""Patch-wise feature sampler.

A small bidirectional transformer reads the patch grid — projected feature
tokens at visible (or already filled) patches, a learned mask embedding at
still-masked ones — and predicts a categorical distribution over codebook
entries for every position. Masked patches are filled one at a time with
top-K sampling, re-running the model on the updated context after each fill.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .layers import LayerNorm, Linear, Module, uniform_init

ORDERS = ("raster", "confidence")


@dataclass
class SampleConfig:
    """Knobs for pluralistic filling."""

    top_k: int = 8
    temperature: float = 1.0
    order: str = "raster"

    def validate(self, n_codes: int):
        if not 1 <= self.top_k <= n_codes:
            raise ConfigError(f"top_k must be in [1, {n_codes}], got {self.top_k}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.order not in ORDERS:
            raise ConfigError(f"order must be one of {ORDERS}, got '{self.order}'")


class AttentionBlock(Module):
    """Pre-norm bidirectional multi-head attention + 2-layer feed-forward."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ConfigError(f"head count {heads} must divide d_model {d_model}")
        self.heads = heads
        self.d_model = d_model
        self.ln1 = LayerNorm(d_model)
        self.qkv = Linear(d_model, 3 * d_model, rng)
        self.proj = Linear(d_model, d_model, rng)
        self.ln2 = LayerNorm(d_model)
        self.fc1 = Linear(d_model, 4 * d_model, rng)
        self.fc2 = Linear(4 * d_model, d_model, rng)

    def attention(self, x):
        b, p, d = x.shape
        h = self.heads
        dh = d // h
        qkv = self.qkv(x)  # (B, P, 3D)
        qkv = qkv.reshape(b, p, 3, h, dh).transpose(2, 0, 3, 1, 4)  # (3, B, h, P, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        probs = softmax(scores)
        ctx = ad.matmul(probs, v)  # (B, h, P, dh)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, p, d)
        return self.proj(ctx)

    def __call__(self, x):
        x = x + self.attention(self.ln1(x))
        return x + self.fc2(ad.relu(self.fc1(self.ln2(x))))


def softmax(logits, axis=-1):
    """Differentiable softmax with a detached max-shift for stability."""
    t = ad.as_tensor(logits)
    shifted = t - Tensor(t.data.max(axis=axis, keepdims=True))
    e = ad.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    t = ad.as_tensor(logits)
    shifted = t - Tensor(t.data.max(axis=axis, keepdims=True))
    return shifted - ad.log(ad.exp(shifted).sum(axis=axis, keepdims=True))


class FeatureSampler(Module):
    """Transformer over the patch grid emitting per-patch code logits."""

    def __init__(self, channels: int, n_codes: int, grid_h: int, grid_w: int,
                 rng: np.random.Generator, d_model: int = 64, layers: int = 2,
                 heads: int = 4):
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.n_codes = n_codes
        self.d_model = d_model
        self.token_proj = Linear(channels, d_model, rng)
        self.mask_token = Tensor(uniform_init(rng, (d_model,), d_model), requires_grad=True)
        self.row_pos = Tensor(uniform_init(rng, (grid_h, d_model), d_model), requires_grad=True)
        self.col_pos = Tensor(uniform_init(rng, (grid_w, d_model), d_model), requires_grad=True)
        self.blocks = [AttentionBlock(d_model, heads, rng) for _ in range(layers)]
        self.ln_final = LayerNorm(d_model)
        self.head = Linear(d_model, n_codes, rng)

    def position_embedding(self):
        rows = self.row_pos.reshape(self.grid_h, 1, self.d_model)
        cols = self.col_pos.reshape(1, self.grid_w, self.d_model)
        return (rows + cols).reshape(1, self.grid_h * self.grid_w, self.d_model)

    def __call__(self, features, visible):
        """Logits over codes for every patch.

        ``features`` is (B, P, C); ``visible`` is (B, P) with 1 where the
        patch contributes its feature token and 0 where the mask embedding
        stands in.
        """
        f = ad.as_tensor(features)
        vis = np.asarray(visible, dtype=f.dtype).reshape(f.shape[0], f.shape[1], 1)
        tokens = self.token_proj(f) * Tensor(vis) + self.mask_token * Tensor(1.0 - vis)
        x = tokens + self.position_embedding()
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_final(x))


def classification_loss(logits, targets: np.ndarray, visible: np.ndarray):
    """Mean cross-entropy over masked positions; 0 when nothing is masked."""
    t = ad.as_tensor(logits)
    n = t.shape[-1]
    targets = np.asarray(targets)
    if targets.min() < 0 or targets.max() >= n:
        raise ContractError(
            f"targets must lie in [0, {n}), got range "
            f"[{targets.min()}, {targets.max()}]"
        )
    hole = (1.0 - np.asarray(visible, dtype=t.dtype)).reshape(targets.shape)
    count = float(hole.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=t.dtype))
    onehot = np.zeros(t.shape, dtype=t.dtype)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    picked = (log_softmax(t) * Tensor(onehot)).sum(axis=-1)
    return -(picked * Tensor(hole)).sum() * (1.0 / count)


def top_k_sample(logits_row: np.ndarray, top_k: int, temperature: float,
                 rng: np.random.Generator) -> int:
    """Keep the K largest logits, soften, draw. K=1 collapses to argmax."""
    logits = np.asarray(logits_row, dtype=np.float64)
    n = logits.shape[0]
    if top_k > n:
        raise ContractError(f"top_k {top_k} exceeds {n} codes")
    order = np.argsort(-logits, kind="stable")  # ties resolved toward lower index
    kept = order[:top_k]
    if top_k == 1:
        return int(kept[0])
    z = logits[kept] / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(kept[rng.choice(top_k, p=p)])


def sample_inpaint(features: np.ndarray, patch_visible: np.ndarray,
                   model: FeatureSampler, codebook, cfg: SampleConfig,
                   rng: np.random.Generator) -> np.ndarray:
    """Fill every masked patch with a sampled codebook entry.

    ``features`` is a (P, C) array from the encoder; ``patch_visible`` is
    (P,). Each masked patch is visited exactly once (raster order or highest
    model confidence), the model re-reads the full context before every
    draw, and the chosen entry replaces the patch feature. Visible patches
    are never altered. Returns the completed (P, C) feature array.
    """
    cfg.validate(codebook.n_entries)
    context = np.array(features, dtype=np.float32, copy=True)
    visible = np.asarray(patch_visible, dtype=np.float32).copy()
    remaining = [int(i) for i in np.flatnonzero(visible == 0)]
    while remaining:
        logits = model(Tensor(context[None]), visible[None]).data[0]
        if cfg.order == "confidence":
            rows = np.asarray(logits[remaining], dtype=np.float64)
            rows = rows / cfg.temperature
            rows -= rows.max(axis=1, keepdims=True)
            probs = np.exp(rows)
            probs /= probs.sum(axis=1, keepdims=True)
            pick = int(np.argmax(probs.max(axis=1)))
            pos = remaining.pop(pick)
        else:
            pos = remaining.pop(0)
        code = top_k_sample(logits[pos], cfg.top_k, cfg.temperature, rng)
        context[pos] = codebook.entries.data[code]
        visible[pos] = 1.0
    return context
