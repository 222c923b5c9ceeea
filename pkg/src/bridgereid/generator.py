"""Generative module: encode a visible image, fuse it with an infrared
style feature map through cross local attention, and decode a bridging
image. Also reconstructs infrared images for supervised training.

Plain convolutional encoder (two downsamplings), one fusion block at the
bottleneck, mirrored transposed-conv decoder with a sigmoid output so every
generated pixel lies in [0, 1].
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class GeneratorConfig:
    channels: int = 16

    def __post_init__(self):
        if self.channels < 4:
            raise ValueError("channels must be >= 4")


def _gn(channels):
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


class CrossLocalAttention(nn.Module):
    """Attention with queries from content and keys/values from style.

    Style maps are resampled (nearest) to the content grid when spatial
    sizes differ. The output projection is zero-initialized, so a fresh
    block returns the content unchanged.
    """

    def __init__(self, channels, out_init_std=0.0):
        super().__init__()
        inter = max(1, channels // 2)
        self.query = nn.Conv2d(channels, inter, 1)
        self.key = nn.Conv2d(channels, inter, 1)
        self.value = nn.Conv2d(channels, inter, 1)
        self.out = nn.Conv2d(inter, channels, 1)
        if out_init_std > 0:
            nn.init.normal_(self.out.weight, std=out_init_std)
        else:
            nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def attention_weights(self, content, style):
        """Row-stochastic B x HWc x HWs attention matrix."""
        style = self._align(content, style)
        q = self.query(content).flatten(2).transpose(1, 2)
        k = self.key(style).flatten(2)
        return torch.softmax(q @ k, dim=-1)

    def _align(self, content, style):
        if style.shape[-2:] != content.shape[-2:]:
            style = F.interpolate(style, size=content.shape[-2:], mode="nearest")
        return style

    def forward(self, content, style):
        b, c, h, w = content.shape
        style = self._align(content, style)
        attn = self.attention_weights(content, style)
        v = self.value(style).flatten(2).transpose(1, 2)
        agg = (attn @ v).transpose(1, 2).reshape(b, -1, h, w)
        return content + self.out(agg)


class Generator(nn.Module):
    """Encoder + cross local attention fusion + decoder.

    The same encoder produces both the content map of the image being
    translated and the style feature of the infrared reference, so the
    module is self-contained: style = encode_style(infrared).
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        c = config.channels
        self.enc1 = nn.Conv2d(3, c, 4, stride=2, padding=1)
        self.enc1_norm = _gn(c)
        self.enc2 = nn.Conv2d(c, 2 * c, 4, stride=2, padding=1)
        self.enc2_norm = _gn(2 * c)
        self.bottleneck = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.bottleneck_norm = _gn(2 * c)
        self.fuse = CrossLocalAttention(2 * c, out_init_std=0.05)
        self.dec1 = nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1)
        self.dec1_norm = _gn(c)
        self.dec2 = nn.ConvTranspose2d(c, c, 4, stride=2, padding=1)
        self.dec2_norm = _gn(c)
        # the decoder adds its correction to a luminance skip of the source
        # image: a fresh generator already emits a channel-collapsed version
        # of its input (and reconstructs channel-uniform infrared images
        # nearly exactly), so training never passes through a phase where
        # all generated images look alike
        self.to_rgb = nn.Conv2d(c, 3, 3, padding=1)
        nn.init.normal_(self.to_rgb.weight, std=0.02)
        nn.init.zeros_(self.to_rgb.bias)

    @property
    def style_channels(self):
        return 2 * self.config.channels

    def _check_input(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W input, got {tuple(x.shape)}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError("input height and width must be divisible by 4")

    def encode(self, x):
        self._check_input(x)
        h = F.leaky_relu(self.enc1_norm(self.enc1(x)), 0.2)
        h = F.leaky_relu(self.enc2_norm(self.enc2(h)), 0.2)
        return F.leaky_relu(self.bottleneck_norm(self.bottleneck(h)), 0.2)

    def encode_style(self, infrared):
        """Style feature map of an infrared image, C_s x h_s x w_s per item."""
        return self.encode(infrared)

    def decode(self, h, source):
        h = F.leaky_relu(self.dec1_norm(self.dec1(h)), 0.2)
        h = F.leaky_relu(self.dec2_norm(self.dec2(h)), 0.2)
        luminance = source.mean(dim=1, keepdim=True).expand_as(source)
        skip = torch.logit(luminance, eps=0.02)
        return torch.sigmoid(self.to_rgb(h) + skip)

    def generate(self, visible, style):
        """Translate a visible batch using an already-encoded style feature.

        Callers detach the style feature when the training schedule requires
        the style path to carry no gradient.
        """
        content = self.encode(visible)
        fused = self.fuse(content, style)
        return self.decode(fused, visible)

    def intermediate(self, visible, infrared, detach_style=True):
        """Bridging image for a (visible, infrared reference) pair."""
        style = self.encode_style(infrared)
        if detach_style:
            style = style.detach()
        return self.generate(visible, style)

    def reconstruct(self, infrared):
        """Self-styled reconstruction of an infrared batch."""
        return self.generate(infrared, self.encode_style(infrared))
