"""Retrieval evaluation (CMC, mAP) under cross-modal query/gallery
protocols, kernel two-sample discrepancy between modality feature clouds,
and the bridging report comparing the generated domain against both
source modalities.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from .data import Modality, preprocess
from .embedding import Branch, l2_normalize
from .losses import batch_centers


class ProtocolError(Exception):
    """Raised when a query/gallery protocol is inconsistent."""


class ShotMode(Enum):
    SINGLE = "single"
    MULTI = "multi"


MULTI_SHOT_PER_ID = 10


@dataclass
class RetrievalProtocol:
    query_indices: np.ndarray
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery_indices: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray
    shot: ShotMode
    seed: int

    def __post_init__(self):
        missing = set(self.query_ids.tolist()) - set(self.gallery_ids.tolist())
        if missing:
            raise ProtocolError(
                f"query identities missing from gallery: {sorted(missing)}")
        if self.shot is ShotMode.SINGLE:
            ids, counts = np.unique(self.gallery_ids, return_counts=True)
            if (counts != 1).any():
                bad = ids[counts != 1][0]
                raise ProtocolError(
                    f"single-shot gallery has {counts.max()} images for "
                    f"identity {bad}")


def build_protocol(query_ds, gallery_ds, shot, seed,
                   query_modality=Modality.INFRARED,
                   gallery_modality=Modality.VISIBLE):
    """Cross-modal protocol: queries from one modality of the query split,
    gallery drawn per identity from the other modality of the gallery
    split (1 image single-shot, up to 10 multi-shot)."""
    rng = np.random.default_rng(seed)
    q_idx = [i for i, s in enumerate(query_ds.samples)
             if s.modality is query_modality]
    if not q_idx:
        raise ProtocolError(f"no {query_modality.value} queries available")

    g_idx = []
    for ident in range(gallery_ds.num_identities):
        pool = gallery_ds.indices(ident, gallery_modality)
        if not pool:
            raise ProtocolError(
                f"identity {ident} missing from the gallery pool")
        take = 1 if shot is ShotMode.SINGLE else min(MULTI_SHOT_PER_ID, len(pool))
        chosen = rng.choice(len(pool), size=take, replace=False)
        g_idx.extend(pool[k] for k in sorted(chosen))

    def _meta(ds, indices):
        ids = np.array([ds.samples[i].identity for i in indices])
        cams = np.array([ds.samples[i].camera for i in indices])
        return np.array(indices), ids, cams

    qi, qids, qcams = _meta(query_ds, q_idx)
    gi, gids, gcams = _meta(gallery_ds, g_idx)
    return RetrievalProtocol(qi, qids, qcams, gi, gids, gcams, shot, seed)


def pairwise_distances(query_feats, gallery_feats):
    """Cosine distances 1 - <q, g> on unit-normalized rows."""
    q = np.asarray(query_feats, dtype=np.float64)
    g = np.asarray(gallery_feats, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise ValueError("query and gallery dimensions differ")
    qn = np.linalg.norm(q, axis=1)
    gn = np.linalg.norm(g, axis=1)
    if (qn == 0).any() or (gn == 0).any():
        raise ValueError("zero feature vector has no direction")
    return 1.0 - (q / qn[:, None]) @ (g / gn[:, None]).T


def _valid_gallery_mask(q_id, q_cam, g_ids, g_cams):
    # standard protocol: drop gallery entries sharing both identity and
    # camera with the query
    if q_cam is None or g_cams is None:
        return np.ones(len(g_ids), dtype=bool)
    return ~((g_ids == q_id) & (g_cams == q_cam))


def cmc(distmat, q_ids, g_ids, max_rank, q_cams=None, g_cams=None):
    """Rank-k accuracy curve of length max_rank (1-indexed semantics:
    curve[k-1] is the match rate within the nearest k)."""
    distmat = np.asarray(distmat)
    hits = np.zeros(max_rank)
    for qi in range(len(q_ids)):
        keep = _valid_gallery_mask(
            q_ids[qi], None if q_cams is None else q_cams[qi], g_ids, g_cams)
        ids = np.asarray(g_ids)[keep]
        if not (ids == q_ids[qi]).any():
            raise ProtocolError(
                f"query identity {q_ids[qi]} absent from gallery")
        order = np.argsort(distmat[qi][keep], kind="stable")
        matches = ids[order] == q_ids[qi]
        first = int(np.flatnonzero(matches)[0])
        if first < max_rank:
            hits[first:] += 1.0
    return hits / len(q_ids)


def mean_average_precision(distmat, q_ids, g_ids, q_cams=None, g_cams=None):
    """Mean over queries of average precision of the induced ranking."""
    distmat = np.asarray(distmat)
    aps = []
    for qi in range(len(q_ids)):
        keep = _valid_gallery_mask(
            q_ids[qi], None if q_cams is None else q_cams[qi], g_ids, g_cams)
        ids = np.asarray(g_ids)[keep]
        if not (ids == q_ids[qi]).any():
            raise ProtocolError(
                f"query identity {q_ids[qi]} absent from gallery")
        order = np.argsort(distmat[qi][keep], kind="stable")
        matches = ids[order] == q_ids[qi]
        ranks = np.flatnonzero(matches) + 1
        precisions = np.arange(1, len(ranks) + 1) / ranks
        aps.append(precisions.mean())
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# Kernel two-sample discrepancy
# ---------------------------------------------------------------------------

def _sq_dists(a, b):
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def median_bandwidth(a, b):
    """Median pairwise Euclidean distance over the pooled samples."""
    pooled = np.concatenate([a, b])
    sq = _sq_dists(pooled, pooled)
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(np.sqrt(sq[iu])))
    return med if med > 0 else 1.0


def mmd(feats_a, feats_b, bandwidth="median"):
    """Unbiased estimate of the squared kernel maximum mean discrepancy.

    Gaussian kernel k(x, y) = exp(-||x - y||^2 / (2 bw^2)); bandwidth
    "median" applies the median heuristic over the pooled sets. Equal-size
    inputs use the paired U-statistic, which is exactly zero for identical
    multisets and exactly symmetric in its arguments.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("inputs must be 2-D with matching dimension")
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise ValueError("the unbiased estimator needs >= 2 samples per set")
    bw = median_bandwidth(a, b) if bandwidth == "median" else float(bandwidth)
    if bw <= 0:
        raise ValueError("bandwidth must be positive")
    gamma = 1.0 / (2.0 * bw * bw)

    if m == n:
        k_aa = np.exp(-gamma * _sq_dists(a, a))
        k_bb = np.exp(-gamma * _sq_dists(b, b))
        k_ab = np.exp(-gamma * _sq_dists(a, b))
        # per-pair bracket is invariant under swapping the two sets, so the
        # estimate is bitwise symmetric and zero for identical multisets
        off = ~np.eye(m, dtype=bool)
        h = (k_aa + k_bb) - (k_ab + k_ab.T)
        return float(h[off].sum() / (m * (m - 1)))

    if m < n:
        a, b = b, a
        m, n = n, m
    k_aa = np.exp(-gamma * _sq_dists(a, a))
    k_bb = np.exp(-gamma * _sq_dists(b, b))
    k_ab = np.exp(-gamma * _sq_dists(a, b))
    term_a = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
    term_b = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * k_ab.sum() / (m * n))


# ---------------------------------------------------------------------------
# Feature extraction and reports
# ---------------------------------------------------------------------------

_BRANCH_OF = {Modality.VISIBLE: Branch.VISIBLE,
              Modality.INFRARED: Branch.INFRARED}


def _stack(samples, img_h, img_w):
    arrays = [preprocess(s, img_h, img_w).pixels for s in samples]
    return torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def extract_features(embedder, samples, config, branch=None, batch_size=64):
    """Normalized embedding features for a list of samples."""
    embedder.eval()
    chunks = []
    for lo in range(0, len(samples), batch_size):
        part = samples[lo:lo + batch_size]
        x = _stack(part, config.img_h, config.img_w)
        br = branch if branch is not None else _BRANCH_OF[part[0].modality]
        chunks.append(l2_normalize(embedder(x, br)))
    embedder.train()
    return torch.cat(chunks).numpy()


@torch.no_grad()
def generate_bridging_samples(generator, visible, infrared, rng,
                              config, batch_size=64):
    """Bridging image tensors for identity-paired (visible, infrared) lists.

    For each visible sample, the style source is a random same-identity
    infrared sample.
    """
    generator.eval()
    by_id = {}
    for i, s in enumerate(infrared):
        by_id.setdefault(s.identity, []).append(i)
    pick = [by_id[s.identity][int(rng.integers(0, len(by_id[s.identity])))]
            for s in visible]
    outs = []
    for lo in range(0, len(visible), batch_size):
        xv = _stack(visible[lo:lo + batch_size], config.img_h, config.img_w)
        xi = _stack([infrared[j] for j in pick[lo:lo + batch_size]],
                    config.img_h, config.img_w)
        outs.append(generator.intermediate(xv, xi))
    generator.train()
    return torch.cat(outs)


def evaluate_retrieval(embedder, query_ds, gallery_ds, config, shot, seed):
    """CMC/mAP report for the cross-modal protocol of the paired splits."""
    protocol = build_protocol(query_ds, gallery_ds, shot, seed)
    q_samples = [query_ds.samples[i] for i in protocol.query_indices]
    g_samples = [gallery_ds.samples[i] for i in protocol.gallery_indices]
    q_feats = extract_features(embedder, q_samples, config,
                               branch=Branch.INFRARED)
    g_feats = extract_features(embedder, g_samples, config,
                               branch=Branch.VISIBLE)
    dist = pairwise_distances(q_feats, g_feats)
    max_rank = min(20, len(g_samples))
    curve = cmc(dist, protocol.query_ids, protocol.gallery_ids, max_rank,
                protocol.query_cams, protocol.gallery_cams)
    return {
        "r1": float(curve[0]),
        "r5": float(curve[min(4, max_rank - 1)]),
        "r10": float(curve[min(9, max_rank - 1)]),
        "r20": float(curve[max_rank - 1]),
        "map": mean_average_precision(dist, protocol.query_ids,
                                      protocol.gallery_ids,
                                      protocol.query_cams,
                                      protocol.gallery_cams),
        "num_query": int(len(q_samples)),
        "num_gallery": int(len(g_samples)),
        "protocol": shot.value,
        "seed": seed,
    }


def bridging_report(embedder, generator, dataset, config, seed=0):
    """Discrepancies between the visible, infrared and bridging feature
    clouds, with verdicts on whether the bridging domain sits closer to
    each source modality than the sources sit to each other.
    """
    rng = np.random.default_rng(seed)
    visible = [s for s in dataset.samples if s.modality is Modality.VISIBLE]
    infrared = [s for s in dataset.samples if s.modality is Modality.INFRARED]
    if not visible or not infrared:
        raise ProtocolError("bridging report needs both modalities")

    f_v = extract_features(embedder, visible, config, branch=Branch.VISIBLE)
    f_i = extract_features(embedder, infrared, config, branch=Branch.INFRARED)
    z = generate_bridging_samples(generator, visible, infrared, rng, config)
    embedder.eval()
    with torch.no_grad():
        f_z = l2_normalize(embedder(z, Branch.INTERMEDIATE)).numpy()
    embedder.train()

    report = {
        "mmd_vi": mmd(f_v, f_i),
        "mmd_vz": mmd(f_v, f_z),
        "mmd_iz": mmd(f_i, f_z),
        "bandwidth": "median",
        "seed": seed,
        "num_v": len(visible),
        "num_i": len(infrared),
    }
    report["bridges_v"] = bool(report["mmd_vz"] < report["mmd_vi"])
    report["bridges_i"] = bool(report["mmd_iz"] < report["mmd_vi"])

    labels_v = torch.tensor([s.identity for s in visible])
    labels_i = torch.tensor([s.identity for s in infrared])
    c_v = _center_matrix(torch.from_numpy(f_v), labels_v)
    c_i = _center_matrix(torch.from_numpy(f_i), labels_i)
    c_z = _center_matrix(torch.from_numpy(f_z), labels_v)
    report["mmd_vi_centers"] = mmd(c_v, c_i)
    report["mmd_vz_centers"] = mmd(c_v, c_z)
    report["mmd_iz_centers"] = mmd(c_i, c_z)
    return report


def _center_matrix(features, labels):
    centers = batch_centers(features, labels)
    return torch.stack([centers[k] for k in sorted(centers)]).numpy()


def intermediate_identity_mi(embedder, generator, dataset, config, seed=0):
    """Plug-in estimate of the mutual information between bridging images
    and identity: log N minus the classifier cross-entropy on held-out
    bridging features."""
    rng = np.random.default_rng(seed)
    visible = [s for s in dataset.samples if s.modality is Modality.VISIBLE]
    infrared = [s for s in dataset.samples if s.modality is Modality.INFRARED]
    z = generate_bridging_samples(generator, visible, infrared, rng, config)
    labels = torch.tensor([s.identity for s in visible])
    embedder.eval()
    with torch.no_grad():
        logits = embedder.classify(embedder(z, Branch.INTERMEDIATE))
        ce = torch.nn.functional.cross_entropy(logits, labels)
    embedder.train()
    return float(np.log(dataset.num_identities) - float(ce))
