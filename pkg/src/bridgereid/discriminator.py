"""Identity-aware modality discriminator.

The label space is doubled so each identity occupies two classes: an even
slot for visible/intermediate images and an odd slot for infrared images.
A binary mode collapses the 2N classes to the modality bit alone, giving
the plain modality-discriminator baseline.
"""

from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F


class LabelGroup(Enum):
    VISIBLE_OR_INTERMEDIATE = 0
    INFRARED = 1


def expand_labels(y, group, num_identities):
    """Map identity y to its slot in the doubled label space.

    Visible and intermediate images share slot 2y; infrared images get
    slot 2y + 1. Accepts ints or integer tensors.
    """
    if torch.is_tensor(y):
        if ((y < 0) | (y >= num_identities)).any():
            raise ValueError("identity label outside [0, num_identities)")
        return 2 * y + group.value
    if not 0 <= y < num_identities:
        raise ValueError(
            f"identity label {y} outside [0, {num_identities})")
    return 2 * y + group.value


def adversarial_label(y, num_identities):
    """Fooling target for generated images: the same identity's infrared
    slot, 2y + 1."""
    return expand_labels(y, LabelGroup.INFRARED, num_identities)


@dataclass(frozen=True)
class DiscriminatorConfig:
    feature_dim: int = 64
    num_identities: int = 2
    binary: bool = False

    def __post_init__(self):
        if self.num_identities < 2:
            raise ValueError("num_identities must be >= 2")

    @property
    def num_classes(self):
        return 2 if self.binary else 2 * self.num_identities


class Discriminator(nn.Module):
    """Two-layer perceptron over raw (unnormalized) embedding features."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        hidden = max(2, config.feature_dim // 2)
        self.fc1 = nn.Linear(config.feature_dim, hidden)
        self.fc2 = nn.Linear(hidden, config.num_classes)

    def forward(self, features):
        if features.dim() != 2 or features.shape[1] != self.config.feature_dim:
            raise ValueError(
                f"expected B x {self.config.feature_dim} features, "
                f"got {tuple(features.shape)}")
        return self.fc2(F.leaky_relu(self.fc1(features), 0.2))

    def target_labels(self, y, group):
        """Training targets in this discriminator's label space."""
        labels = expand_labels(y, group, self.config.num_identities)
        return labels % 2 if self.config.binary else labels
