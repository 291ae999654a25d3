"""Patch encoder and dual-path decoder.

The encoder is patch-local: each r x r patch is flattened and pushed through
an input projection, 8 linear residual blocks, and an output projection, all
ReLU-activated, so one patch's feature depends on that patch's pixels only.

The decoder runs two paths. The feature path applies (2 residual blocks,
one 4x4/stride-2 upsampler) per level and a final pair of blocks; the
masked-image path downsamples the masked image with 3x3/stride-2 convs
(3 -> C channels at the first conv). Wherever a downsampled map and the
feature path meet at the same resolution, visible positions of the feature
map are overwritten by the image-path features:

    composed = features * (1 - mask) + image_features * mask

The stride-2 chain yields maps at the patch grid and at every intermediate
resolution below full size, so the composition happens at the decoder input
and after every upsampling step except the last.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .layers import Conv2d, ConvResBlock, ConvTranspose2d, Linear, LinearResBlock, Module

ENCODER_BLOCKS = 8


def levels_for_patch_size(patch_size: int) -> int:
    """Number of 2x up/down steps for an r x r patch grid (r a power of two)."""
    levels = int(round(np.log2(patch_size)))
    if 2 ** levels != patch_size or patch_size < 2:
        raise ConfigError(f"patch size must be a power of two >= 2, got {patch_size}")
    return levels


# ---------------------------------------------------------------------------
# patch <-> image layout
# ---------------------------------------------------------------------------

def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., H, W, 3) -> (..., H/r * W/r, 3*r*r) in row-major patch order."""
    r = patch_size
    *lead, h, w, c = image.shape
    if h % r or w % r:
        raise ConfigError(f"image extents {h}x{w} not divisible by patch size {r}")
    x = image.reshape(*lead, h // r, r, w // r, r, c)
    x = np.moveaxis(x, -4, -3)  # (..., h/r, w/r, r, r, c)
    return np.ascontiguousarray(x.reshape(*lead, (h // r) * (w // r), r * r * c))


def unpatchify(patches: np.ndarray, grid_h: int, grid_w: int, patch_size: int) -> np.ndarray:
    """Inverse of ``patchify``; bit-exact round trip."""
    r = patch_size
    *lead, count, dim = patches.shape
    c = dim // (r * r)
    if count != grid_h * grid_w or dim != r * r * c:
        raise ShapeError(
            f"patch block {patches.shape} does not match grid {grid_h}x{grid_w}, r={r}"
        )
    x = patches.reshape(*lead, grid_h, grid_w, r, r, c)
    x = np.moveaxis(x, -3, -4)  # (..., grid_h, r, grid_w, r, c)
    return np.ascontiguousarray(x.reshape(*lead, grid_h * r, grid_w * r, c))


def features_to_grid(features, grid_h: int, grid_w: int):
    """(B, P, C) tensor -> (B, C, h, w) tensor."""
    t = ad.as_tensor(features)
    b, p, c = t.shape
    return t.reshape(b, grid_h, grid_w, c).transpose(0, 3, 1, 2)


def grid_to_features(grid):
    """(B, C, h, w) tensor -> (B, P, C) tensor."""
    t = ad.as_tensor(grid)
    b, c, h, w = t.shape
    return t.transpose(0, 2, 3, 1).reshape(b, h * w, c)


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def min_pool(mask: np.ndarray, factor: int) -> np.ndarray:
    """Blockwise min: a pooled cell is visible only if fully visible."""
    *lead, h, w = mask.shape
    if h % factor or w % factor:
        raise ConfigError(f"mask extents {h}x{w} not divisible by {factor}")
    blocks = mask.reshape(*lead, h // factor, factor, w // factor, factor)
    return blocks.min(axis=(-3, -1))


@dataclass
class MaskPyramid:
    """Visibility masks at every decoder resolution plus the patch grid.

    ``level_masks[l]`` has extents H/2^l x W/2^l; level 0 is the original
    mask. ``patch_mask`` equals ``level_masks[levels]`` when r == 2^levels.
    """

    patch_mask: np.ndarray
    level_masks: list

    @property
    def levels(self) -> int:
        return len(self.level_masks) - 1


def build_mask_pyramid(mask: np.ndarray, patch_size: int, levels: int) -> MaskPyramid:
    """Min-pool ``mask`` to the patch grid and to each decoder level."""
    mask = np.asarray(mask, dtype=np.float32)
    h, w = mask.shape[-2:]
    if h % (2 ** levels) or w % (2 ** levels):
        raise ConfigError(f"mask extents {h}x{w} not divisible by 2^{levels}")
    patch_mask = min_pool(mask, patch_size)
    level_masks = [mask]
    for _ in range(levels):
        level_masks.append(min_pool(level_masks[-1], 2))
    return MaskPyramid(patch_mask=patch_mask, level_masks=level_masks)


def compose_level(upsampled, image_features, mask):
    """features * (1 - mask) + image_features * mask, mask broadcast over channels."""
    f = ad.as_tensor(upsampled)
    inj = ad.as_tensor(image_features)
    m = np.asarray(mask, dtype=f.dtype)
    if m.ndim == f.ndim - 1:
        m = np.expand_dims(m, -3)  # (B, 1, H, W) broadcast over channels
    if m.shape[-2:] != f.shape[-2:] or inj.shape != f.shape:
        raise ShapeError(
            f"compose_level extents differ: features {f.shape}, "
            f"injected {inj.shape}, mask {m.shape}"
        )
    return f * (1.0 - m) + inj * m


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

class PatchEncoder(Module):
    """Per-patch MLP: projection, 8 residual blocks, ReLU-projected output."""

    def __init__(self, patch_size: int, channels: int, rng: np.random.Generator):
        self.patch_size = patch_size
        self.channels = channels
        self.in_proj = Linear(3 * patch_size * patch_size, channels, rng)
        self.blocks = [LinearResBlock(channels, rng) for _ in range(ENCODER_BLOCKS)]
        self.out_proj = Linear(channels, channels, rng)

    def __call__(self, patches):
        h = ad.relu(self.in_proj(ad.as_tensor(patches)))
        for block in self.blocks:
            h = block(h)
        return ad.relu(self.out_proj(h))

    def encode_image(self, image: np.ndarray):
        """(..., H, W, 3) image -> (..., P, C) feature tensor."""
        return self(Tensor(patchify(image, self.patch_size)))


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

class Decoder(Module):
    """Feature upsampling path fused with the masked-image downsampling path."""

    def __init__(self, patch_size: int, channels: int, rng: np.random.Generator):
        self.patch_size = patch_size
        self.channels = channels
        levels = levels_for_patch_size(patch_size)
        self.levels = levels
        self.blocks = [ConvResBlock(channels, rng) for _ in range(2 * (levels + 1))]
        self.ups = [ConvTranspose2d(channels, channels, rng) for _ in range(levels)]
        downs = [Conv2d(3, channels, 3, rng, stride=2, pad=1)]
        downs += [Conv2d(channels, channels, 3, rng, stride=2, pad=1)
                  for _ in range(levels - 1)]
        self.downs = downs
        self.out_conv = Conv2d(channels, 3, 3, rng, stride=1, pad=1)

    def image_path(self, masked_images: np.ndarray):
        """Downsampling chain states, one per level (H/2 ... H/2^levels)."""
        x = ad.as_tensor(np.moveaxis(masked_images, -1, -3))  # (B, 3, H, W)
        states = []
        for conv in self.downs:
            x = ad.relu(conv(x))
            states.append(x)
        return states

    def __call__(self, features, masked_images: np.ndarray, pyramid: MaskPyramid):
        """Decode a (B, C, h, w) feature grid into a raw (B, 3, H, W) image.

        Outputs are unclamped; clamp to [0, 1] only at export time.
        """
        f = ad.as_tensor(features)
        levels = self.levels
        if f.shape[-2:] != pyramid.level_masks[levels].shape[-2:]:
            raise ConfigError(
                f"feature grid {f.shape[-2:]} does not match pyramid level "
                f"{levels} extents {pyramid.level_masks[levels].shape[-2:]}"
            )
        states = self.image_path(masked_images)
        f = compose_level(f, states[levels - 1], pyramid.level_masks[levels])
        for i in range(levels):
            f = self.blocks[2 * i](f)
            f = self.blocks[2 * i + 1](f)
            f = self.ups[i](f)
            if i < levels - 1:
                lvl = levels - 1 - i
                f = compose_level(f, states[lvl - 1], pyramid.level_masks[lvl])
        f = self.blocks[-2](f)
        f = self.blocks[-1](f)
        return self.out_conv(f)
