"""Translation networks: content encoder, reference encoder, AdaIN decoder,
and the dual-head discriminator with a shared trunk.

Desk-scale shapes by default; all widths and depths are constructor arguments.
The generator's final tanh keeps outputs inside the [-1, 1] value range, and
translation preserves the source batch's (n, c, h, w) shape.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageBatch
from .errors import ShapeMismatch

# softplus(raw + _STD_BIAS) == 1 at raw == 0, so decoding starts near plain
# instance normalization.
_STD_BIAS = math.log(math.e - 1)


def adain(content: torch.Tensor, style_mean: torch.Tensor, style_std: torch.Tensor,
          eps: float = 1e-5) -> torch.Tensor:
    """Re-statisticize content features with per-channel style mean and std.

    content: (n, c, h, w); style_mean, style_std: (n, c) with style_std > 0.
    output = style_std * (content - mean(content)) / (std(content) + eps) + style_mean,
    statistics taken per channel over the spatial dims.
    """
    if (style_std <= 0).any():
        raise ValueError("style_std must be positive")
    # statistics in float64: float32 accumulation noise on a constant channel
    # would otherwise be amplified by the eps division
    c64 = content.double()
    mu = c64.mean(dim=(2, 3), keepdim=True)
    sigma = c64.std(dim=(2, 3), keepdim=True, unbiased=False)
    normalized = (c64 - mu) / (sigma + eps)
    out = (style_std.double()[:, :, None, None] * normalized
           + style_mean.double()[:, :, None, None])
    return out.to(content.dtype)


class ResBlock(nn.Module):
    """Residual block with instance normalization."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(channels)
        self.norm2 = nn.InstanceNorm2d(channels)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return x + h


class AdaINResBlock(nn.Module):
    """Residual block whose normalization statistics come from a style code."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, params):
        # params: (n, 4c) -> (mean1, raw_std1, mean2, raw_std2)
        m1, r1, m2, r2 = params.chunk(4, dim=1)
        h = F.relu(adain(self.conv1(x), m1, F.softplus(r1 + _STD_BIAS) + 1e-4))
        h = adain(self.conv2(h), m2, F.softplus(r2 + _STD_BIAS) + 1e-4)
        return x + h


class ContentEncoder(nn.Module):
    """E_source: downsampling conv stack plus residual blocks."""

    def __init__(self, in_channels=3, base_width=32, n_res_blocks=2):
        super().__init__()
        w = base_width
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, w, 7, padding=3), nn.InstanceNorm2d(w), nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1), nn.InstanceNorm2d(2 * w), nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1), nn.InstanceNorm2d(4 * w), nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResBlock(4 * w) for _ in range(n_res_blocks)])
        self.out_channels = 4 * w

    def forward(self, x):
        return self.blocks(self.stem(x))


class ReferenceEncoder(nn.Module):
    """E_ref: conv stack with global pooling to a style code (no normalization,
    so image-level statistics survive)."""

    def __init__(self, in_channels=3, base_width=32, style_dim=64):
        super().__init__()
        w = base_width
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, w, 7, padding=3), nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.fc = nn.Linear(4 * w, style_dim)
        self.style_dim = style_dim

    def forward(self, x):
        return self.fc(self.net(x).flatten(1))


class Decoder(nn.Module):
    """F: AdaIN residual blocks driven by the style code, then upsampling."""

    def __init__(self, content_channels: int, out_channels=3, style_dim=64,
                 n_res_blocks=2, mlp_width=128):
        super().__init__()
        c = content_channels
        self.blocks = nn.ModuleList([AdaINResBlock(c) for _ in range(n_res_blocks)])
        # one shared MLP emits the AdaIN parameters for every block
        self.style_mlp = nn.Sequential(
            nn.Linear(style_dim, mlp_width), nn.ReLU(inplace=True),
            nn.Linear(mlp_width, n_res_blocks * 4 * c),
        )
        self.upsample = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c, c // 2, 5, padding=2), nn.InstanceNorm2d(c // 2), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c // 2, c // 4, 5, padding=2), nn.InstanceNorm2d(c // 4), nn.ReLU(inplace=True),
            nn.Conv2d(c // 4, out_channels, 7, padding=3), nn.Tanh(),
        )
        self.params_per_block = 4 * c

    def forward(self, content, style_code):
        params = self.style_mlp(style_code)
        h = content
        for i, block in enumerate(self.blocks):
            start = i * self.params_per_block
            h = block(h, params[:, start:start + self.params_per_block])
        return self.upsample(h)


class Generator(nn.Module):
    """G(x, y) = F(E_source(x), E_ref(y))."""

    def __init__(self, in_channels=3, base_width=32, style_dim=64,
                 n_content_blocks=2, n_decoder_blocks=2, mlp_width=128):
        super().__init__()
        self.e_source = ContentEncoder(in_channels, base_width, n_content_blocks)
        self.e_ref = ReferenceEncoder(in_channels, base_width, style_dim)
        self.f = Decoder(self.e_source.out_channels, in_channels, style_dim,
                         n_decoder_blocks, mlp_width)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
            raise ShapeMismatch(f"source {tuple(x.shape)} vs reference {tuple(y.shape)}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeMismatch(f"spatial dims must be divisible by 4, got {tuple(x.shape[2:])}")
        return self.f(self.e_source(x), self.e_ref(y))


class Discriminator(nn.Module):
    """Shared trunk D_f with an adversarial head and a real-only classification head.

    forward returns (adv_scores, trunk_features); `classify` reuses the same
    trunk for the classification logits.
    """

    def __init__(self, n_classes: int, in_channels=3, base_width=32):
        super().__init__()
        self.n_classes = n_classes
        w = base_width
        self.d_f = nn.Sequential(
            nn.Conv2d(in_channels, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
        )
        self.d_adv = nn.Sequential(
            nn.Conv2d(4 * w, 4 * w, 3, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(4 * w, n_classes),
        )
        self.d_cls = nn.Sequential(
            nn.Conv2d(4 * w, 4 * w, 3, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(4 * w, n_classes),
        )
        self.feat_dim = 4 * w

    def trunk_features(self, images: torch.Tensor) -> torch.Tensor:
        return self.d_f(images).mean(dim=(2, 3))

    def forward(self, images: torch.Tensor):
        fmap = self.d_f(images)
        return self.d_adv(fmap), fmap.mean(dim=(2, 3))

    def classify(self, images: torch.Tensor) -> torch.Tensor:
        return self.d_cls(self.d_f(images))


def translate(g: Generator, x: ImageBatch, y: ImageBatch) -> ImageBatch:
    """Translate source batch x guided by reference batch y; shape-preserving."""
    if x.value_range != y.value_range:
        raise ShapeMismatch(f"value ranges differ: {x.value_range} vs {y.value_range}")
    with torch.no_grad():
        out = g(x.data, y.data)
    return ImageBatch(out, value_range=x.value_range)


def discriminate(d: Discriminator, images: ImageBatch):
    """Raw per-class adversarial scores plus trunk features for feature matching."""
    with torch.no_grad():
        return d(images.data)


def classify_real(d: Discriminator, images: ImageBatch) -> torch.Tensor:
    """Classification logits over the modality classes (trained on reals only)."""
    with torch.no_grad():
        return d.classify(images.data)
