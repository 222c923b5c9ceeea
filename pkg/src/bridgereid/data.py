"""Dataset loading, synthetic paired-modality toy data, identity-balanced
cross-modal batch sampling, and train-time augmentation.

On-disk layout (8-bit RGB PNG):

    <root>/<split>/<modality>/<identity>/<image>.png

with split in {train, query, gallery} and modality in {visible, infrared}.
"""

import colorsys
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


class Modality(Enum):
    VISIBLE = "visible"
    INFRARED = "infrared"


class Split(Enum):
    TRAIN = "train"
    QUERY = "query"
    GALLERY = "gallery"


class DataError(Exception):
    """Raised for dataset layout or validation failures."""


@dataclass
class ImageSample:
    """One image with its identity, modality and camera tags.

    pixels is an H x W x 3 float32 array with values in [0, 1].
    """

    pixels: np.ndarray
    identity: int
    modality: Modality
    camera: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"pixels must be HxWx3, got shape {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = px


@dataclass
class Dataset:
    samples: list
    num_identities: int
    split: Split
    _index: dict = field(default=None, repr=False)

    def __post_init__(self):
        for s in self.samples:
            if not 0 <= s.identity < self.num_identities:
                raise DataError(
                    f"sample identity {s.identity} outside declared range "
                    f"[0, {self.num_identities})"
                )

    def __len__(self):
        return len(self.samples)

    def indices(self, identity, modality):
        """Sample indices for one (identity, modality) group."""
        if self._index is None:
            idx = {}
            for i, s in enumerate(self.samples):
                idx.setdefault((s.identity, s.modality), []).append(i)
            self._index = idx
        return self._index.get((identity, modality), [])

    def validate_paired(self, min_per_modality=1):
        """Check every identity has >= min_per_modality images per modality."""
        for ident in range(self.num_identities):
            for mod in Modality:
                n = len(self.indices(ident, mod))
                if n < min_per_modality:
                    raise DataError(
                        f"identity {ident:04d} has {n} {mod.value} images, "
                        f"needs at least {min_per_modality}"
                    )


@dataclass
class Batch:
    """b identities x p images per modality, identity-aligned."""

    visible: list
    infrared: list
    identities: list

    def __post_init__(self):
        if len(self.identities) < 2:
            raise ValueError("batch needs at least 2 distinct identities")
        vis_ids = {s.identity for s in self.visible}
        inf_ids = {s.identity for s in self.infrared}
        if vis_ids != set(self.identities) or inf_ids != set(self.identities):
            raise ValueError("visible and infrared must cover the same identities")
        p = len(self.visible) // len(self.identities)
        for ident in self.identities:
            nv = sum(1 for s in self.visible if s.identity == ident)
            ni = sum(1 for s in self.infrared if s.identity == ident)
            if nv != p or ni != p:
                raise ValueError(f"identity {ident} has uneven per-modality counts")


@dataclass(frozen=True)
class EraseSchedule:
    """Linear ramp of random-erasing probability and area fraction."""

    p_start: float = 0.30
    p_end: float = 0.50
    s_start: float = 0.20
    s_end: float = 0.30
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 <= self.p_start <= self.p_end <= 1.0:
            raise ValueError("need 0 <= p_start <= p_end <= 1")
        if not 0.0 < self.s_start <= self.s_end < 1.0:
            raise ValueError("need 0 < s_start <= s_end < 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    def at(self, step):
        """Interpolated (probability, area fraction) at an optimizer step."""
        if not 0 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        t = step / self.total_steps
        return (
            self.p_start + t * (self.p_end - self.p_start),
            self.s_start + t * (self.s_end - self.s_start),
        )


# ---------------------------------------------------------------------------
# Synthetic paired-modality toy data
# ---------------------------------------------------------------------------

_SHAPES = ("rect", "ellipse", "triangle", "diamond", "cross", "ring")
_GLYPH_SALT = 9401  # fixes identity geometry across splits and seeds


def _glyph_spec(identity):
    """Per-identity glyph definition, independent of split seed.

    Identity is a unique hue plus a unique (shape, size, aspect) combo;
    position carries no identity at all. Hue separates identities
    trivially but exists only on the visible side, while the geometric
    differences are subtle — a color-reliant visible embedding locks onto
    the hue shortcut and cannot cross-match, which is exactly the failure
    mode the bridging machinery removes.
    """
    shape_class = identity % 4
    size_class = (identity // 4) % 4
    base = 0.30 + 0.11 * (size_class % 2)
    aspect = 0.72 if size_class < 2 else 1.35
    return {
        "hue": (identity * 0.61803398875) % 1.0,
        "shape": _SHAPES[shape_class],
        "sx": base * np.sqrt(aspect),
        "sy": base / np.sqrt(aspect),
    }


def _shape_mask(spec, h, w, cx, cy, scale):
    ys, xs = np.mgrid[0:h, 0:w]
    ys = ys / h
    xs = xs / w
    rx = 0.5 * spec["sx"] * scale
    ry = 0.5 * spec["sy"] * scale
    u = (xs - cx) / rx
    v = (ys - cy) / ry
    kind = spec["shape"]
    if kind == "rect":
        return (np.abs(u) < 1.0) & (np.abs(v) < 1.0)
    if kind == "ellipse":
        return u * u + v * v < 1.0
    if kind == "triangle":
        return (v > -1.0) & (v < 1.0) & (np.abs(u) < (v + 1.0) / 2.0)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) < 1.0
    if kind == "cross":
        inside = (np.abs(u) < 1.0) & (np.abs(v) < 1.0)
        return inside & ((np.abs(u) < 0.35) | (np.abs(v) < 0.35))
    if kind == "ring":
        r2 = u * u + v * v
        return (r2 < 1.0) & (r2 > 0.25)
    raise ValueError(f"unknown shape {kind!r}")


def _sample_jitter(rng):
    # position is drawn fresh per sample (uninformative); scale jitter
    # stays small so the identity-bearing size classes never overlap
    return {
        "cx": rng.uniform(0.28, 0.72),
        "cy": rng.uniform(0.28, 0.72),
        "scale": rng.uniform(0.92, 1.08),
    }


def _render_visible(spec, h, w, rng):
    mask = _shape_mask(spec, h, w, **_sample_jitter(rng))
    color = colorsys.hsv_to_rgb(spec["hue"], rng.uniform(0.85, 1.0),
                                rng.uniform(0.80, 0.95))
    img = np.full((h, w, 3), rng.uniform(0.08, 0.16), dtype=np.float32)
    img += rng.uniform(0.0, 0.06, size=(h, w, 3)).astype(np.float32)
    img[mask] = np.array(color, dtype=np.float32)
    img += rng.normal(0.0, 0.025, size=(h, w, 3)).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _outline(mask):
    # contour of the filled glyph: set difference with the 4-neighbor erosion
    interior = mask.copy()
    interior[1:, :] &= mask[:-1, :]
    interior[:-1, :] &= mask[1:, :]
    interior[:, 1:] &= mask[:, :-1]
    interior[:, :-1] &= mask[:, 1:]
    return mask & ~interior


def _render_infrared(spec, h, w, rng):
    """Channel-collapsed, intensity-remapped rendering of the same glyph.

    Infrared keeps the glyph's contour rather than its fill, and the
    intensity is drawn independently of hue; identity survives through
    geometry alone while the appearance statistics sit far from the
    visible rendering.
    """
    mask = _shape_mask(spec, h, w, **_sample_jitter(rng))
    edge = _outline(mask)
    edge = edge | _outline(~_outline(mask) & mask)  # 2 px contour
    gray = np.full((h, w), rng.uniform(0.06, 0.14), dtype=np.float32)
    gray += rng.uniform(0.0, 0.05, size=(h, w)).astype(np.float32)
    gray[mask] += 0.08  # faint interior glow
    gray[edge] = rng.uniform(0.55, 0.90)
    gray = np.power(np.clip(gray, 0.0, 1.0), 0.85)
    gray += rng.normal(0.0, 0.035, size=(h, w)).astype(np.float32)
    gray = np.clip(gray, 0.0, 1.0)
    return np.repeat(gray[:, :, None], 3, axis=2)


def synthesize_toy_dataset(num_ids, per_id, height=48, width=24, seed=0,
                           split=Split.TRAIN):
    """Deterministic paired-modality toy dataset of colored glyphs.

    Each identity is a fixed hue + shape + position; infrared counterparts
    keep the geometry but collapse channels, so identity is recoverable in
    both modalities while color is informative only in the visible one.
    """
    if num_ids < 2:
        raise ValueError(f"num_ids must be >= 2, got {num_ids}")
    if per_id < 2:
        raise ValueError(f"per_id must be >= 2, got {per_id}")
    rng = np.random.default_rng([seed, list(Split).index(split)])
    samples = []
    for ident in range(num_ids):
        spec = _glyph_spec(ident)
        for _ in range(per_id):
            samples.append(ImageSample(
                _render_visible(spec, height, width, rng),
                ident, Modality.VISIBLE, camera=0))
        for _ in range(per_id):
            samples.append(ImageSample(
                _render_infrared(spec, height, width, rng),
                ident, Modality.INFRARED, camera=1))
    return Dataset(samples, num_identities=num_ids, split=split)


# ---------------------------------------------------------------------------
# Disk IO
# ---------------------------------------------------------------------------

def save_dataset(dataset, root):
    """Write the documented on-disk layout under root."""
    for i, s in enumerate(dataset.samples):
        d = os.path.join(root, dataset.split.value, s.modality.value,
                         f"{s.identity:04d}")
        os.makedirs(d, exist_ok=True)
        arr = np.clip(np.rint(s.pixels * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(d, f"{i:06d}.png"))


def load_dataset(root, split):
    """Load one split from the documented layout.

    Identity labels are remapped to a contiguous [0, N) range in sorted
    directory-name order. TRAIN splits are validated for paired coverage.
    """
    split_dir = os.path.join(root, split.value)
    if not os.path.isdir(split_dir):
        raise DataError(f"missing split directory: {split_dir}")

    raw = []  # (dir_name, modality, path)
    names = set()
    for mod in Modality:
        mod_dir = os.path.join(split_dir, mod.value)
        if not os.path.isdir(mod_dir):
            continue
        for ident_name in sorted(os.listdir(mod_dir)):
            ident_dir = os.path.join(mod_dir, ident_name)
            if not os.path.isdir(ident_dir):
                continue
            files = sorted(f for f in os.listdir(ident_dir)
                           if f.lower().endswith(".png"))
            names.add(ident_name)
            for f in files:
                raw.append((ident_name, mod, os.path.join(ident_dir, f)))

    if not raw:
        raise DataError(f"no images found under {split_dir}")

    label_of = {name: i for i, name in enumerate(sorted(names))}
    if split is Split.TRAIN:
        per_mod = {name: {m: 0 for m in Modality} for name in names}
        for name, mod, _ in raw:
            per_mod[name][mod] += 1
        for name in sorted(names):
            for mod in Modality:
                if per_mod[name][mod] == 0:
                    raise DataError(
                        f"identity {name!r} has no {mod.value} images in "
                        f"the train split")

    samples = []
    for name, mod, path in raw:
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
        samples.append(ImageSample(arr / 255.0, label_of[name], mod,
                                   camera=0 if mod is Modality.VISIBLE else 1))
    return Dataset(samples, num_identities=len(names), split=split)


# ---------------------------------------------------------------------------
# Batch sampling and augmentation
# ---------------------------------------------------------------------------

def sample_batch(dataset, b, p, rng):
    """Draw b identities x p images per modality without replacement.

    Samples are grouped by identity in the same order on both sides, so
    index j in the visible list is identity-aligned with index j in the
    infrared list.
    """
    if dataset.split is not Split.TRAIN:
        raise ValueError("batches are sampled from the train split only")
    if b < 2:
        raise ValueError("b must be >= 2 for triplet mining")
    if b > dataset.num_identities:
        raise ValueError(
            f"b={b} exceeds the {dataset.num_identities} available identities")
    dataset.validate_paired(min_per_modality=p)

    ids = rng.choice(dataset.num_identities, size=b, replace=False)
    visible, infrared = [], []
    for ident in ids:
        for mod, out in ((Modality.VISIBLE, visible), (Modality.INFRARED, infrared)):
            pool = dataset.indices(int(ident), mod)
            take = rng.choice(len(pool), size=p, replace=False)
            out.extend(dataset.samples[pool[k]] for k in take)
    return Batch(visible, infrared, [int(i) for i in ids])


def _resize(pixels, out_h, out_w):
    t = torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy()


def preprocess(image, out_h, out_w, rng=None, training=False):
    """Resize to out_h x out_w; when training, zero-pad then random-crop."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError("output size must be positive")
    px = _resize(image.pixels, out_h, out_w)
    if training:
        if rng is None:
            raise ValueError("training preprocess needs an rng")
        pad = max(2, min(out_h, out_w) // 8)
        padded = np.zeros((out_h + 2 * pad, out_w + 2 * pad, 3), dtype=np.float32)
        padded[pad:pad + out_h, pad:pad + out_w] = px
        oy = int(rng.integers(0, 2 * pad + 1))
        ox = int(rng.integers(0, 2 * pad + 1))
        px = padded[oy:oy + out_h, ox:ox + out_w]
    px = np.clip(px, 0.0, 1.0).astype(np.float32)
    return ImageSample(px, image.identity, image.modality, image.camera)


def random_erase(pixels, schedule, step, rng):
    """Erase a rectangle with schedule-interpolated probability and area.

    The erased region is filled with per-channel uniform noise; when the
    probability draw fails the input is returned unchanged.
    """
    p, s = schedule.at(step)
    if rng.random() >= p:
        return pixels
    h, w, c = pixels.shape
    area = s * h * w
    aspect = rng.uniform(0.3, 1.0 / 0.3)
    eh = min(h, max(1, int(round(np.sqrt(area * aspect)))))
    ew = min(w, max(1, int(round(np.sqrt(area / aspect)))))
    y0 = int(rng.integers(0, h - eh + 1))
    x0 = int(rng.integers(0, w - ew + 1))
    out = pixels.copy()
    out[y0:y0 + eh, x0:x0 + ew] = rng.uniform(
        0.0, 1.0, size=(eh, ew, c)).astype(pixels.dtype)
    return out
