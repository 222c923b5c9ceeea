"""Feature embedding backbone: per-modality stems feeding a shared
convolutional trunk with one non-local attention block, global average
pooling to a d-dimensional feature, and an identity classifier head.
"""

from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F


class Branch(Enum):
    """Which input stem an image batch enters through."""

    VISIBLE = "visible"
    INTERMEDIATE = "intermediate"
    INFRARED = "infrared"


@dataclass(frozen=True)
class EmbeddingConfig:
    feature_dim: int = 64
    stem_channels: int = 16
    trunk_channels: int = 32
    attention_enabled: bool = True
    num_identities: int = 2
    tie_intermediate_stem: bool = True

    def __post_init__(self):
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be >= 8")
        if self.num_identities < 2:
            raise ValueError("num_identities must be >= 2")


def _gn(channels):
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


class NonLocalAttention(nn.Module):
    """Self-attention over all spatial positions with a residual output.

    The output projection is zero-initialized, so a fresh block is exactly
    the identity map.
    """

    def __init__(self, channels):
        super().__init__()
        inter = max(1, channels // 2)
        self.theta = nn.Conv2d(channels, inter, 1)
        self.phi = nn.Conv2d(channels, inter, 1)
        self.g = nn.Conv2d(channels, inter, 1)
        self.out = nn.Conv2d(inter, channels, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def attention_weights(self, x):
        """Row-stochastic B x HW x HW attention matrix."""
        b, c, h, w = x.shape
        q = self.theta(x).flatten(2).transpose(1, 2)  # B x HW x C'
        k = self.phi(x).flatten(2)                    # B x C' x HW
        return torch.softmax(q @ k, dim=-1)

    def forward(self, x):
        b, c, h, w = x.shape
        attn = self.attention_weights(x)
        v = self.g(x).flatten(2).transpose(1, 2)      # B x HW x C'
        agg = (attn @ v).transpose(1, 2).reshape(b, -1, h, w)
        return x + self.out(agg)


class _Stem(nn.Module):
    def __init__(self, out_channels):
        super().__init__()
        self.conv = nn.Conv2d(3, out_channels, 3, padding=1)
        self.norm = _gn(out_channels)

    def forward(self, x):
        return F.gelu(self.norm(self.conv(x)))


class _Stage(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm = _gn(out_ch)

    def forward(self, x):
        return F.gelu(self.norm(self.conv(x)))


class Embedder(nn.Module):
    """Three input branches with shared deeper layers.

    The trunk is always shared; the visible and intermediate stems are tied
    by default and may be untied through the config.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        c = config.trunk_channels
        self.stem_visible = _Stem(config.stem_channels)
        self.stem_infrared = _Stem(config.stem_channels)
        if config.tie_intermediate_stem:
            self.stem_intermediate = self.stem_visible
        else:
            self.stem_intermediate = _Stem(config.stem_channels)
        self.stage1 = _Stage(config.stem_channels, c, stride=2)
        self.stage2 = _Stage(c, 2 * c, stride=2)
        self.stage3 = _Stage(2 * c, 2 * c, stride=2)
        self.attention = NonLocalAttention(2 * c) if config.attention_enabled else None
        self.stage4 = _Stage(2 * c, config.feature_dim, stride=1)
        self.classifier = nn.Linear(config.feature_dim, config.num_identities,
                                    bias=False)
        # a strong classifier init keeps the identity gradient competitive
        # with the heavily weighted feature-matching terms from step one;
        # with the default small init the embedder stalls near the uniform
        # saddle for hundreds of steps
        nn.init.normal_(self.classifier.weight, std=0.5)

    def _stem(self, branch):
        return {
            Branch.VISIBLE: self.stem_visible,
            Branch.INTERMEDIATE: self.stem_intermediate,
            Branch.INFRARED: self.stem_infrared,
        }[branch]

    def forward(self, x, branch):
        """Pooled feature vectors, shape B x feature_dim."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W input, got {tuple(x.shape)}")
        return self._trunk(self._stem(branch)(x))

    def embed(self, x, branch):
        return self.forward(x, branch)

    def _trunk(self, h):
        h = self.stage1(h)
        h = self.stage2(h)
        h = self.stage3(h)
        if self.attention is not None:
            h = self.attention(h)
        h = self.stage4(h)
        return h.mean(dim=(2, 3))

    def embed_families(self, visible, intermediate, infrared):
        """Features for the three families in one batched trunk pass.

        Equivalent to three forward calls (the trunk is per-sample), but
        cheaper on small batches.
        """
        stems = []
        if self.stem_intermediate is self.stem_visible:
            sv = self.stem_visible(torch.cat([visible, intermediate]))
            stems.append(sv)
        else:
            stems.append(self.stem_visible(visible))
            stems.append(self.stem_intermediate(intermediate))
        stems.append(self.stem_infrared(infrared))
        feats = self._trunk(torch.cat(stems))
        n_v, n_z = len(visible), len(intermediate)
        return feats[:n_v], feats[n_v:n_v + n_z], feats[n_v + n_z:]

    def classify(self, features):
        """Identity logits, shape B x num_identities."""
        return self.classifier(features)


def l2_normalize(features, eps=1e-12):
    """Unit-norm copies used for all distance computations."""
    return features / features.norm(dim=-1, keepdim=True).clamp_min(eps)
