"""Image-space generators and critics: 4x super-resolution and inpainting.

Both generators squash outputs to [0, 1] through a sigmoid. Their renderers
are fixed and parameter-free: a 4x average-pooling downsampler for
super-resolution and a pointwise mask for inpainting, so the reconstruction
losses constrain only what the renderer can see — block means for SR,
visible pixels for inpainting. That leftover freedom is exactly where the
adversarial prior (and any deliberate bias in its memories) acts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .autodiff import nn, ops
from .autodiff.tensor import Tensor, lift
from .errors import ConfigError, CurationError, DimensionError, DomainError
from .geometry import apply_mask, downsample4x


@dataclass
class ResidualGeneratorConfig:
    n_blocks: int = 4
    width: int = 16
    in_channels: int = 1
    normalize: bool = True

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ConfigError("residual generator needs n_blocks >= 1")
        if self.width < 1 or self.in_channels < 1:
            raise ConfigError("invalid residual generator dimensions")


class _ResidualBlock(nn.Module):
    """conv -> norm -> relu -> conv -> norm, plus the identity skip."""

    def __init__(self, rng, width: int, name: str, normalize: bool):
        super().__init__(name)
        self.normalize = normalize
        self.c1 = self._child(nn.Conv2d(rng, width, width, 3, "%s/c1" % name, pad=1))
        self.c2 = self._child(nn.Conv2d(rng, width, width, 3, "%s/c2" % name, pad=1))

    def __call__(self, x: Tensor) -> Tensor:
        h = self.c1(x)
        if self.normalize:
            h = nn.channel_norm(h)
        h = ops.relu(h)
        h = self.c2(h)
        if self.normalize:
            h = nn.channel_norm(h)
        return ops.add(x, h)


class SrGenerator(nn.Module):
    """Residual blocks on the low-res grid, then two 2x transposed convs."""

    def __init__(self, rng, config: ResidualGeneratorConfig, name: str = "sr_gen"):
        super().__init__(name)
        self.config = config
        c, w = config.in_channels, config.width
        self.head = self._child(nn.Conv2d(rng, c, w, 3, "%s/head" % name, pad=1))
        self.blocks = [
            self._child(_ResidualBlock(rng, w, "%s/block%d" % (name, i),
                                       config.normalize))
            for i in range(config.n_blocks)
        ]
        self.up1 = self._child(nn.ConvTranspose2d(rng, w, w, 4, "%s/up1" % name,
                                                  stride=2, pad=1))
        self.up2 = self._child(nn.ConvTranspose2d(rng, w, c, 4, "%s/up2" % name,
                                                  stride=2, pad=1))

    def __call__(self, lowres, skip_residuals: bool = False) -> Tensor:
        x = lift(lowres)
        if x.ndim != 3 or x.shape[0] != self.config.in_channels:
            raise DimensionError("expected (%d,h,w) input, got %s"
                                 % (self.config.in_channels, x.shape))
        h = ops.leaky_relu(self.head(x), 0.2)
        if not skip_residuals:
            for block in self.blocks:
                h = block(h)
        h = ops.leaky_relu(self.up1(h), 0.2)
        return ops.sigmoid(self.up2(h))


def sr_generator_forward(lowres, net: SrGenerator) -> Tensor:
    out = net(lowres)
    c, h, w = lift(lowres).shape
    if out.shape != (c, 4 * h, 4 * w):
        raise DimensionError("upsampled output %s is not 4x the input %s"
                             % (out.shape, (c, h, w)))
    return out


def sr_reconstruction_loss(lowres, highres_pred) -> Tensor:
    """L2 distance between the input and the downsampled prediction."""
    low = lift(lowres)
    pred = lift(highres_pred)
    c, h, w = low.shape
    if pred.shape != (c, 4 * h, 4 * w):
        raise DimensionError("prediction %s is not 4x the low-res input %s"
                             % (pred.shape, low.shape))
    return ops.l2_norm(ops.sub(downsample4x(pred), low))


# ---------------------------------------------------------------------------
# inpainting


@dataclass
class MaskSpec:
    """Binary visibility mask (1 = visible) plus a region descriptor."""

    mask: np.ndarray
    region: Union[str, Tuple[int, int, int, int]] = "custom"

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float64)
        if m.ndim != 2:
            raise DimensionError("mask must be (h, w)")
        if not np.all((m == 0.0) | (m == 1.0)):
            raise DomainError("mask entries must be exactly 0 or 1")
        if not (np.any(m == 0.0) and np.any(m == 1.0)):
            raise DomainError("mask must hide something and reveal something")
        self.mask = m


def rect_mask(h: int, w: int, rect: Tuple[int, int, int, int],
              region: Optional[str] = None) -> MaskSpec:
    """Mask hiding the rectangle (top, left, height, width)."""
    top, left, rh, rw = rect
    m = np.ones((h, w))
    m[top : top + rh, left : left + rw] = 0.0
    return MaskSpec(m, region or rect)


class InpaintGenerator(nn.Module):
    """Two conv layers per branch (image, mask), concat, three up stages."""

    def __init__(self, rng, image_hw, in_channels: int = 1, width: int = 16,
                 normalize: bool = True, name: str = "inpaint_gen"):
        super().__init__(name)
        h, w = image_hw
        if h % 4 or w % 4:
            raise DimensionError("extents %s must divide by 4" % ((h, w),))
        self.image_hw = tuple(image_hw)
        self.in_channels = in_channels
        self.normalize = normalize
        self.img_c1 = self._child(nn.Conv2d(rng, in_channels, width, 3,
                                            "%s/img_c1" % name, stride=2, pad=1))
        self.img_c2 = self._child(nn.Conv2d(rng, width, width, 3,
                                            "%s/img_c2" % name, stride=2, pad=1))
        self.mask_c1 = self._child(nn.Conv2d(rng, 1, width // 2, 3,
                                             "%s/mask_c1" % name, stride=2, pad=1))
        self.mask_c2 = self._child(nn.Conv2d(rng, width // 2, width // 2, 3,
                                             "%s/mask_c2" % name, stride=2, pad=1))
        joint = width + width // 2
        self.up1 = self._child(nn.ConvTranspose2d(rng, joint, width, 4,
                                                  "%s/up1" % name, stride=2, pad=1))
        self.up2 = self._child(nn.ConvTranspose2d(rng, width, width, 4,
                                                  "%s/up2" % name, stride=2, pad=1))
        self.out_conv = self._child(nn.Conv2d(rng, width, in_channels, 3,
                                              "%s/out" % name, pad=1))

    def __call__(self, masked_img, mask: MaskSpec) -> Tensor:
        x = lift(masked_img)
        if x.ndim != 3 or x.shape[1:] != self.image_hw:
            raise DimensionError("input %s does not match net size %s"
                                 % (x.shape, self.image_hw))
        if mask.mask.shape != self.image_hw:
            raise DimensionError("mask %s does not match image %s"
                                 % (mask.mask.shape, self.image_hw))
        a = ops.leaky_relu(self.img_c1(x), 0.2)
        a = ops.leaky_relu(self.img_c2(a), 0.2)
        b = ops.leaky_relu(self.mask_c1(lift(mask.mask[None])), 0.2)
        b = ops.leaky_relu(self.mask_c2(b), 0.2)
        h = ops.concat([a, b], axis=0)
        h = self.up1(h)
        if self.normalize:
            h = nn.channel_norm(h)
        h = ops.leaky_relu(h, 0.2)
        h = self.up2(h)
        if self.normalize:
            h = nn.channel_norm(h)
        h = ops.leaky_relu(h, 0.2)
        return ops.sigmoid(self.out_conv(h))


def inpaint_generator_forward(masked_img, mask: MaskSpec,
                              net: InpaintGenerator) -> Tensor:
    return net(masked_img, mask)


def inpaint_reconstruction_loss(x_masked, g_pred, mask: MaskSpec) -> Tensor:
    """L2 distance on visible pixels: || mask * G - x_masked ||_2."""
    xm = lift(x_masked)
    pred = lift(g_pred)
    if xm.shape != pred.shape:
        raise DimensionError("shapes differ: %s vs %s" % (xm.shape, pred.shape))
    return ops.l2_norm(ops.sub(apply_mask(pred, mask.mask), xm))


# ---------------------------------------------------------------------------
# discriminator and bias curation


class ImageDiscriminator(nn.Module):
    """Stride-2 conv stack plus one dense sigmoid output, fixed input size.

    Normalization defaults off so absolute intensity statistics stay
    visible to the critic.
    """

    def __init__(self, rng, image_hw, in_channels: int = 1,
                 widths=(8, 16, 16, 32, 32), normalize: bool = False,
                 name: str = "img_disc"):
        super().__init__(name)
        self.image_hw = tuple(image_hw)
        self.in_channels = in_channels
        self.encoder = self._child(nn.ConvStack(rng, in_channels, widths,
                                                "%s/enc" % name,
                                                normalize=normalize))
        h, w = image_hw
        for _ in widths:
            h = (h + 1) // 2
            w = (w + 1) // 2
        if h < 1 or w < 1:
            raise DimensionError("too many conv layers for input %s" % (image_hw,))
        self.fc = self._child(nn.Dense(rng, widths[-1] * h * w, 1, "%s/fc" % name))

    def __call__(self, img) -> Tensor:
        x = lift(img)
        if x.shape != (self.in_channels,) + self.image_hw:
            raise DimensionError("image %s does not match discriminator input %s"
                                 % (x.shape, (self.in_channels,) + self.image_hw))
        feats = self.encoder(x)
        return ops.sigmoid(self.fc(ops.flatten_column(feats[-1])))


def image_discriminator_forward(img, net: ImageDiscriminator) -> Tensor:
    return net(img)


def curate_bias(bank, predicate):
    """Filtered copy of a memory bank; the original is untouched."""
    kept = [item for item in bank.items if predicate(item)]
    if not kept:
        raise CurationError("bias predicate removed every memory")
    return bank.replace_items(kept)
