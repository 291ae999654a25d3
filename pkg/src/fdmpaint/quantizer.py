"""Learnable codebook with nearest-neighbor quantization.

Quantization replaces each patch feature with its closest codebook entry
(squared Euclidean distance, ties broken by lowest index). In the training
graph the substitution uses the straight-through contract: the decoder's
gradient passes to the encoder features unchanged, and codebook entries are
trained only through the codebook/commitment losses.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .layers import Module

COMMITMENT_BETA = 0.25
_CHUNK = 256  # patch rows per distance block, bounds the (chunk, N, C) buffer


class Codebook(Module):
    """N trainable C-dimensional latent vectors."""

    def __init__(self, n_entries: int, channels: int, rng: np.random.Generator):
        if n_entries < 2:
            raise ConfigError(f"codebook needs at least 2 entries, got {n_entries}")
        scale = 1.0 / np.sqrt(channels)
        self.entries = Tensor(
            rng.uniform(-scale, scale, size=(n_entries, channels)).astype(np.float32),
            requires_grad=True,
        )

    @property
    def n_entries(self) -> int:
        return self.entries.data.shape[0]

    @property
    def channels(self) -> int:
        return self.entries.data.shape[1]


def nearest_indices(vectors: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the closest entry for each vector in the trailing-C layout.

    Distances are computed from explicit differences (no expanded-form
    cancellation), so a vector equal to an entry always maps to that entry.
    ``np.argmin`` takes the first minimum, which is the lowest index.
    """
    vecs = np.asarray(vectors)
    if vecs.shape[-1] != entries.shape[-1]:
        raise ConfigError(
            f"vector channels {vecs.shape[-1]} != codebook channels {entries.shape[-1]}"
        )
    flat = vecs.reshape(-1, vecs.shape[-1])
    out = np.empty(flat.shape[0], dtype=np.int64)
    for start in range(0, flat.shape[0], _CHUNK):
        block = flat[start : start + _CHUNK]
        diff = block[:, None, :] - entries[None, :, :]
        d2 = np.einsum("pnc,pnc->pn", diff, diff)
        out[start : start + _CHUNK] = np.argmin(d2, axis=1)
    return out.reshape(vecs.shape[:-1])


def nearest_code(vector: np.ndarray, codebook: Codebook) -> tuple[int, np.ndarray]:
    """(index, entry) of the closest codebook entry to one vector."""
    idx = int(nearest_indices(vector, codebook.entries.data))
    return idx, codebook.entries.data[idx].copy()


def quantize_map(features, codebook: Codebook):
    """Replace every feature vector with its nearest codebook entry.

    ``features`` is a Tensor or array shaped (..., C). Returns
    ``(quantized, indices, entries)`` where ``quantized`` carries the
    straight-through gradient to ``features`` and ``entries`` is the plain
    gathered-entry tensor whose gradient reaches the codebook.
    """
    f = ad.as_tensor(features)
    indices = nearest_indices(f.data, codebook.entries.data)
    entries = ad.embedding(codebook.entries, indices)
    quantized = f + ad.stopgrad(entries - f.detach())
    return quantized, indices, entries


def vq_losses(features, entries, beta: float = COMMITMENT_BETA):
    """(codebook_loss, commitment_loss) for one quantized batch.

    codebook_loss moves entries toward the (frozen) encodings; the
    commitment term pulls encodings toward their (frozen) entries.
    """
    f = ad.as_tensor(features)
    e = ad.as_tensor(entries)
    codebook_loss = ((ad.stopgrad(f) - e) ** 2.0).mean()
    commitment = ((f - ad.stopgrad(e)) ** 2.0).mean() * beta
    return codebook_loss, commitment


def code_indices_of(image: np.ndarray, encoder, codebook: Codebook) -> np.ndarray:
    """Target code grid for an unmasked image: quantize its encoded features."""
    features = encoder.encode_image(image)
    return nearest_indices(features.data, codebook.entries.data)
