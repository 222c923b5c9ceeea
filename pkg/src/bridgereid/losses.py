"""Training objectives: identity cross-entropy, doubled-label discriminator
loss, center-hinge adversarial loss, reconstruction, color-free feature
matching, soft-margin triplet losses with batch-hard mining, and the two
weighted totals for the generator and the embedding backbone.

Distances are plain Euclidean on whatever vectors the caller passes;
callers feed unit-normalized embeddings for all metric terms.
"""

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .discriminator import adversarial_label
from .embedding import l2_normalize


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 0.1
    lambda_cf: float = 10.0
    margin_m1: float = 0.1
    margin_m2: float = 0.3

    def __post_init__(self):
        for name in ("lambda_adv", "lambda_cf", "margin_m1", "margin_m2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def pairwise_euclidean(a, b):
    """All-pairs Euclidean distances, shape len(a) x len(b)."""
    return (a[:, None, :] - b[None, :, :]).norm(dim=-1)


def cross_entropy_id(logits, labels):
    """Mean softmax cross-entropy of identity logits."""
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    return F.cross_entropy(logits, labels)


def discriminator_loss(logits, expanded_labels):
    """Mean cross-entropy in the doubled (or binary) label space."""
    return cross_entropy_id(logits, expanded_labels)


def batch_centers(features, labels):
    """Per-identity arithmetic means of normalized features.

    Returns {identity: center}; every identity in labels must have at
    least one row.
    """
    if len(features) != len(labels):
        raise ValueError("features and labels must align")
    if len(features) == 0:
        raise ValueError("empty batch has no centers")
    normed = l2_normalize(features)
    centers = {}
    for ident in sorted({int(l) for l in labels}):
        mask = labels == ident
        if not mask.any():
            raise ValueError(f"identity {ident} has no features")
        centers[ident] = normed[mask].mean(dim=0)
    return centers


def adversarial_loss(disc_logits_z, labels, centers_z, centers_i, centers_v,
                     m1):
    """Generator-side adversarial objective on intermediate images.

    Per sample: cross-entropy against the fooling label plus the hinge
    max(0, m1 + D(c_z, c_i) - D(c_z, c_v)) of that sample's identity
    centers, which pushes the bridging features closer to infrared than
    to visible. Mean over the batch.
    """
    n_ids = len(centers_z)
    if disc_logits_z.shape[1] == 2:
        targets = torch.ones(len(labels), dtype=torch.long,
                             device=disc_logits_z.device)
    else:
        targets = adversarial_label(labels, disc_logits_z.shape[1] // 2)
    ce = F.cross_entropy(disc_logits_z, targets, reduction="none")
    hinges = []
    for lab in labels:
        ident = int(lab)
        d_zi = (centers_z[ident] - centers_i[ident]).norm()
        d_zv = (centers_z[ident] - centers_v[ident]).norm()
        hinges.append(torch.clamp(m1 + d_zi - d_zv, min=0.0))
    return (ce + torch.stack(hinges)).mean()


def reconstruction_loss(reconstructed, target):
    """Mean absolute error over all pixels."""
    if reconstructed.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(reconstructed.shape)} vs "
            f"{tuple(target.shape)}")
    return (reconstructed - target).abs().mean()


def generator_total(rec, idz, adv, weights):
    """rec + idz + lambda_adv * adv."""
    return rec + idz + weights.lambda_adv * adv


def color_free_loss(f_v, f_z):
    """Mean Euclidean norm of per-sample (visible - intermediate) feature
    differences; pairs are index-aligned."""
    if len(f_v) != len(f_z):
        raise ValueError("feature batches must have equal length")
    return (f_v - f_z).norm(dim=-1).mean()


def triplet_loss(anchors, positives, negatives, m2, soft=True):
    """Triplet loss over explicit, index-aligned triplets.

    Soft form: mean softplus(m2 + d(a,p) - d(a,n)); hinge form replaces
    softplus with max(0, .).
    """
    d_ap = (anchors - positives).norm(dim=-1)
    d_an = (anchors - negatives).norm(dim=-1)
    margin = m2 + d_ap - d_an
    per = F.softplus(margin) if soft else F.relu(margin)
    return per.mean()


def _hardest(dist, row_labels, col_labels, same_identity):
    eq = row_labels[:, None] == col_labels[None, :]
    mask = eq if same_identity else ~eq
    if not mask.any(dim=1).all():
        missing = (~mask.any(dim=1)).nonzero()[0].item()
        kind = "positive" if same_identity else "negative"
        raise ValueError(
            f"anchor {missing} has no {kind} candidates in the batch")
    if same_identity:
        return dist.masked_fill(~mask, float("-inf")).max(dim=1).values
    return dist.masked_fill(~mask, float("inf")).min(dim=1).values


def mined_triplet_term(anchors, anchor_labels, positives, positive_labels,
                       negatives, negative_labels, m2, soft=True):
    """Batch-hard directed triplet term.

    Per anchor: hardest (farthest) same-identity positive from the positive
    pool and hardest (nearest) different-identity negative from the
    negative pool.
    """
    d_ap = _hardest(pairwise_euclidean(anchors, positives),
                    anchor_labels, positive_labels, same_identity=True)
    d_an = _hardest(pairwise_euclidean(anchors, negatives),
                    anchor_labels, negative_labels, same_identity=False)
    margin = m2 + d_ap - d_an
    per = F.softplus(margin) if soft else F.relu(margin)
    return per.mean()


def batch_hard_triplet_loss(features, labels, m2, soft=True):
    """Classic batch-hard triplet loss mined over one feature pool."""
    return mined_triplet_term(features, labels, features, labels,
                              features, labels, m2, soft=soft)


@dataclass
class BatchFeatures:
    """Aligned per-sample features of the three image families plus their
    normalized copies and per-identity centers."""

    visible: torch.Tensor
    intermediate: torch.Tensor
    infrared: torch.Tensor
    labels: torch.Tensor
    visible_n: torch.Tensor = field(default=None)
    intermediate_n: torch.Tensor = field(default=None)
    infrared_n: torch.Tensor = field(default=None)

    def __post_init__(self):
        for name in ("visible", "intermediate", "infrared"):
            feats = getattr(self, name)
            if feats is None:
                raise ValueError(f"missing {name} feature family")
            if len(feats) != len(self.labels):
                raise ValueError(f"{name} features misaligned with labels")
        if self.visible_n is None:
            self.visible_n = l2_normalize(self.visible)
        if self.intermediate_n is None:
            self.intermediate_n = l2_normalize(self.intermediate)
        if self.infrared_n is None:
            self.infrared_n = l2_normalize(self.infrared)

    def centers(self):
        """(c_v, c_z, c_i) center maps from the normalized features."""
        return (batch_centers(self.visible, self.labels),
                batch_centers(self.intermediate, self.labels),
                batch_centers(self.infrared, self.labels))


def dual_triplet_loss(batch_features, m2, soft=True):
    """Two directed batch-hard triplet terms through the bridging family:
    (anchor visible, positive infrared, negative intermediate) plus
    (anchor infrared, positive intermediate, negative visible).
    """
    bf = batch_features
    term_v = mined_triplet_term(bf.visible_n, bf.labels,
                                bf.infrared_n, bf.labels,
                                bf.intermediate_n, bf.labels, m2, soft=soft)
    term_i = mined_triplet_term(bf.infrared_n, bf.labels,
                                bf.intermediate_n, bf.labels,
                                bf.visible_n, bf.labels, m2, soft=soft)
    return term_v + term_i


def embedding_total(id_loss, dual, cf, weights):
    """id + dual + lambda_cf * cf."""
    return id_loss + dual + weights.lambda_cf * cf
