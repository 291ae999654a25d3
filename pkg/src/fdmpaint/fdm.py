"""Feature dequantization: predict the quantization error and add it back.

The dequantizer sees the quantized feature grid concatenated with the
patch-level visibility mask as one extra channel, runs a small stack of
convolutional residual blocks, and emits a per-patch error estimate. The
estimate is added only at masked positions:

    dequantized = quantized + error_estimate * (1 - patch_mask)

Training needs no sampler: encode an unmasked image, quantize it with the
codebook, and regress the masked part of the true quantization error.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import quantizer
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .layers import Conv2d, ConvResBlock, Module

DEFAULT_BLOCKS = 8
TARGET_MODES = ("masked_error", "paper_literal")


class FeatureDequantizer(Module):
    """1x1 input projection over [features, mask], residual stack, 1x1 output."""

    def __init__(self, channels: int, rng: np.random.Generator,
                 blocks: int = DEFAULT_BLOCKS):
        self.channels = channels
        self.in_conv = Conv2d(channels + 1, channels, 1, rng)
        self.blocks = [ConvResBlock(channels, rng) for _ in range(blocks)]
        self.out_conv = Conv2d(channels, channels, 1, rng)

    def __call__(self, quantized, patch_mask):
        """Predict the quantization error grid.

        ``quantized`` is (B, C, h, w); ``patch_mask`` is (B, h, w) or
        (B, 1, h, w) with 1 marking fully visible patches. No masking is
        applied inside the network; the full-grid estimate comes back.
        """
        q = ad.as_tensor(quantized)
        m = np.asarray(patch_mask, dtype=q.dtype)
        if m.ndim == q.ndim - 1:
            m = np.expand_dims(m, -3)
        if m.shape[-2:] != q.shape[-2:]:
            raise ShapeError(
                f"patch mask extents {m.shape[-2:]} != feature extents {q.shape[-2:]}"
            )
        mask_plane = Tensor(np.broadcast_to(m, q.shape[:-3] + (1,) + q.shape[-2:]).copy())
        h = self.in_conv(ad.concat([q, mask_plane], axis=-3))
        for block in self.blocks:
            h = block(h)
        return self.out_conv(h)


def dequantize(quantized, error_estimate, patch_mask):
    """quantized + error * (1 - mask); visible positions pass through."""
    q = ad.as_tensor(quantized)
    e = ad.as_tensor(error_estimate)
    if q.shape != e.shape:
        raise ShapeError(f"feature grids differ: {q.shape} vs {e.shape}")
    m = np.asarray(patch_mask, dtype=q.dtype)
    if m.ndim == q.ndim - 1:
        m = np.expand_dims(m, -3)
    return q + e * (1.0 - m)


def training_batch(images: np.ndarray, patch_mask: np.ndarray, encoder,
                   codebook, target_mode: str = "masked_error",
                   mix_visible: bool = True):
    """Sampler-free training pair for the dequantizer.

    Encodes the unmasked images with the (frozen) encoder, quantizes, and
    builds (input_grid, target_grid) numpy arrays shaped (B, C, h, w):

    * input: true features at visible patches, codebook entries at masked
      ones (``mix_visible=False`` keeps the fully quantized grid instead);
    * target (``masked_error``): (features - entries) * (1 - mask);
    * target (``paper_literal``): features * mask - entries * (1 - mask),
      with the patch-level mask standing in for the pixel mask.
    """
    if target_mode not in TARGET_MODES:
        raise ConfigError(f"unknown dequantizer target mode '{target_mode}'")
    feats = encoder.encode_image(images).data  # (B, P, C)
    indices = quantizer.nearest_indices(feats, codebook.entries.data)
    entries = codebook.entries.data[indices]
    b, p, c = feats.shape
    h, w = patch_mask.shape[-2:]
    if h * w != p:
        raise ShapeError(f"patch mask grid {h}x{w} does not cover {p} patches")
    m = patch_mask.reshape(b, 1, h, w).astype(feats.dtype)
    fgrid = feats.reshape(b, h, w, c).transpose(0, 3, 1, 2)
    egrid = entries.reshape(b, h, w, c).transpose(0, 3, 1, 2)
    if mix_visible:
        input_grid = fgrid * m + egrid * (1.0 - m)
    else:
        input_grid = egrid
    if target_mode == "masked_error":
        target = (fgrid - egrid) * (1.0 - m)
    else:
        target = fgrid * m - egrid * (1.0 - m)
    return input_grid, target


def error_loss(error_estimate, target, patch_mask):
    """Mean absolute error over masked patches only; 0 if nothing is masked."""
    e = ad.as_tensor(error_estimate)
    t = ad.as_tensor(target)
    if e.shape != t.shape:
        raise ShapeError(f"estimate {e.shape} and target {t.shape} differ")
    m = np.asarray(patch_mask, dtype=e.dtype)
    if m.ndim == e.ndim - 1:
        m = np.expand_dims(m, -3)
    hole = 1.0 - m
    count = float(hole.sum()) * e.shape[-3]
    if count == 0:
        return Tensor(np.zeros((), dtype=e.dtype))
    return (ad.absolute(e - t) * hole).sum() * (1.0 / count)
