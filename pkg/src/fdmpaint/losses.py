"""Reconstruction loss family and its fixed proxy feature extractor.

The reconstruction objective is a weighted sum of pixel L1, a gradient
(forward-difference) L1, a non-saturating adversarial term from a small
patch discriminator, and perceptual/style terms. The perceptual and style
terms run against a fixed random-weight conv stack: reproducible from its
seed, never trained, standing in for a pretrained feature network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .layers import Conv2d, Module


@dataclass
class LossWeights:
    gradient: float = 5.0
    adversarial: float = 0.1
    perceptual: float = 0.1
    style: float = 250.0
    quant_error: float = 1.0
    reconstruction: float = 1.0


def _chw(images):
    """Accept (B, 3, H, W) tensors or (B, H, W, 3) arrays."""
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images)
    if arr.ndim == 4 and arr.shape[-1] == 3:
        arr = np.moveaxis(arr, -1, 1)
    return Tensor(arr)


def l1_loss(output, target):
    """Mean absolute pixel error over the whole image batch."""
    o, t = _chw(output), _chw(target)
    if o.shape != t.shape:
        raise ShapeError(f"image shapes differ: {o.shape} vs {t.shape}")
    return ad.absolute(o - t).mean()


def gradient_loss(output, target):
    """L1 between forward-difference spatial gradients, one mean over both axes."""
    o, t = _chw(output), _chw(target)
    if o.shape != t.shape:
        raise ShapeError(f"image shapes differ: {o.shape} vs {t.shape}")
    dh = ad.absolute((o[..., 1:, :] - o[..., :-1, :]) - (t[..., 1:, :] - t[..., :-1, :]))
    dw = ad.absolute((o[..., :, 1:] - o[..., :, :-1]) - (t[..., :, 1:] - t[..., :, :-1]))
    total = dh.sum() + dw.sum()
    return total * (1.0 / (dh.size + dw.size))


class PatchDiscriminator(Module):
    """4-layer strided conv stack emitting a spatial real/fake logit map."""

    def __init__(self, rng: np.random.Generator):
        self.convs = [
            Conv2d(3, 32, 4, rng, stride=2, pad=1),
            Conv2d(32, 64, 4, rng, stride=2, pad=1),
            Conv2d(64, 128, 4, rng, stride=2, pad=1),
        ]
        self.out_conv = Conv2d(128, 1, 3, rng, stride=1, pad=1)

    def __call__(self, images):
        x = _chw(images)
        for conv in self.convs:
            x = ad.leaky_relu(conv(x), 0.2)
        return self.out_conv(x)


def adversarial_losses(output, target, discriminator: PatchDiscriminator):
    """Non-saturating GAN pair (generator_loss, discriminator_loss).

    The generator term sees gradients only through ``output``; the
    discriminator term sees ``output`` detached. -log sigmoid(z) is
    computed as softplus(-z).
    """
    fake_logits = discriminator(_chw(output))
    real_logits = discriminator(_chw(target).detach())
    g_loss = ad.softplus(-fake_logits).mean()
    fake_detached = discriminator(_chw(output).detach())
    d_loss = ad.softplus(-real_logits).mean() + ad.softplus(fake_detached).mean()
    return g_loss, d_loss


class ProxyFeatureExtractor(Module):
    """Three fixed conv stages (3->16->32->64, 3x3/stride-2, ReLU).

    Weights are drawn once from ``seed`` and never trained; identical seeds
    give identical features on every run.
    """

    CHANNELS = (16, 32, 64)

    def __init__(self, seed: int):
        self.seed = seed
        rng = np.random.default_rng(seed)
        chans = (3,) + self.CHANNELS
        self.convs = [
            Conv2d(chans[i], chans[i + 1], 3, rng, stride=2, pad=1)
            for i in range(3)
        ]
        self.set_trainable(False)

    def stages(self, images):
        x = _chw(images)
        outs = []
        for conv in self.convs:
            x = ad.relu(conv(x))
            outs.append(x)
        return outs


def perceptual_loss(output, target, extractor: ProxyFeatureExtractor):
    """Sum over stages of the mean absolute feature difference."""
    total = None
    for fo, ft in zip(extractor.stages(output), extractor.stages(target)):
        term = ad.absolute(fo - ft.detach()).mean()
        total = term if total is None else total + term
    return total


def gram_matrix(stage):
    """Channel Gram matrix normalized by channels * positions."""
    b, c, h, w = stage.shape
    flat = stage.reshape(b, c, h * w)
    return ad.matmul(flat, flat.transpose(0, 2, 1)) * (1.0 / (c * h * w))


def style_loss(output, target, extractor: ProxyFeatureExtractor):
    """Sum over stages of the mean absolute Gram-matrix difference."""
    total = None
    for fo, ft in zip(extractor.stages(output), extractor.stages(target)):
        term = ad.absolute(gram_matrix(fo) - gram_matrix(ft.detach())).mean()
        total = term if total is None else total + term
    return total


def reconstruction_loss(output, target, discriminator, extractor,
                        weights: LossWeights):
    """Weighted sum of L1, gradient, adversarial (generator side),
    perceptual, and style terms. Also returns the discriminator loss and
    the parts for logging."""
    o, t = _chw(output), _chw(target)
    parts = {"l1": l1_loss(o, t), "gradient": gradient_loss(o, t)}
    if weights.adversarial > 0 and discriminator is not None:
        g_loss, d_loss = adversarial_losses(o, t, discriminator)
        parts["adversarial"] = g_loss
    else:
        d_loss = None
    if weights.perceptual > 0:
        parts["perceptual"] = perceptual_loss(o, t, extractor)
    if weights.style > 0:
        parts["style"] = style_loss(o, t, extractor)
    total = parts["l1"] + parts["gradient"] * weights.gradient
    if "adversarial" in parts:
        total = total + parts["adversarial"] * weights.adversarial
    if "perceptual" in parts:
        total = total + parts["perceptual"] * weights.perceptual
    if "style" in parts:
        total = total + parts["style"] * weights.style
    return total, d_loss, parts


def tuning_loss(quant_error_loss, rec_loss, weights: LossWeights):
    """Fine-tuning objective: weighted sum of the two phase losses."""
    return (ad.as_tensor(quant_error_loss) * weights.quant_error
            + ad.as_tensor(rec_loss) * weights.reconstruction)
