"""Joint training of the embedding backbone, generator and discriminator.

Per batch, in order: reconstruct infrared, generate bridging images with a
detached style feature, update the embedder (bridging images detached),
update the discriminator with the embedder frozen, update the generator
with the discriminator frozen. Momentum-SGD drives the embedder; Adam
drives the generator and discriminator.

Checkpoints are single files: an 8-byte magic, a little-endian version and
header length, a JSON header (step, config, rng states, array manifest),
then raw array blobs in manifest order.
"""

import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch

from . import losses
from .config import TrainConfig, dump_config
from .data import EraseSchedule, preprocess, random_erase, sample_batch
from .discriminator import (Discriminator, DiscriminatorConfig, LabelGroup)
from .embedding import Branch, Embedder, EmbeddingConfig, l2_normalize
from .generator import Generator, GeneratorConfig

MAGIC = b"BRIDCKPT"
VERSION = 1

METRIC_KEYS = ("l_id", "l_dual", "l_cf", "l_f", "l_dis", "l_adv", "l_rec",
               "l_gan", "l_idz")


class NumericalError(Exception):
    """Raised when a loss component turns non-finite."""


class CheckpointError(Exception):
    """Raised for unreadable, truncated, or version-mismatched checkpoints."""


@dataclass
class ModelState:
    embedder: Embedder
    generator: Generator
    discriminator: Discriminator
    opt_f: torch.optim.Optimizer
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0

    def modules(self):
        return {"embedder": self.embedder, "generator": self.generator,
                "discriminator": self.discriminator}


def init_state(config, num_identities):
    """Freshly initialized modules and optimizers, seeded by the config."""
    torch.manual_seed(config.seed)
    emb = Embedder(EmbeddingConfig(
        feature_dim=config.feature_dim,
        stem_channels=config.stem_channels,
        trunk_channels=config.trunk_channels,
        attention_enabled=config.attention,
        num_identities=num_identities,
        tie_intermediate_stem=config.tie_intermediate_stem,
    ))
    gen = Generator(GeneratorConfig(channels=config.gen_channels))
    disc = Discriminator(DiscriminatorConfig(
        feature_dim=config.feature_dim,
        num_identities=num_identities,
        binary=config.disc_binary,
    ))
    opt_f = torch.optim.SGD(emb.parameters(), lr=config.lr_f,
                            momentum=config.momentum)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_g,
                             betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_d,
                             betas=(0.5, 0.999))
    return ModelState(emb, gen, disc, opt_f, opt_g, opt_d, step=0)


def _require_finite(value, name, step):
    if not torch.isfinite(value).all():
        raise NumericalError(f"non-finite {name} at step {step}")
    return value


def _compute(name, fn, step):
    """Evaluate one loss component, naming it on any numerical failure."""
    try:
        value = fn()
    except ValueError as exc:
        raise NumericalError(
            f"non-finite {name} at step {step}: {exc}") from exc
    return _require_finite(value, name, step)


def _to_tensor(arrays):
    stacked = np.stack([a for a in arrays]).astype(np.float32)
    return torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()


def prepare_batch(batch, config, schedule, step, rng):
    """Preprocess one batch into generator and embedder input tensors.

    Random erasing is applied to the embedder copies only; the generator
    sees the clean crops so reconstruction targets stay intact.
    """
    xv_gen, xi_gen, xv_emb, xi_emb = [], [], [], []
    for sample in batch.visible:
        base = preprocess(sample, config.img_h, config.img_w, rng, training=True)
        xv_gen.append(base.pixels)
        xv_emb.append(random_erase(base.pixels, schedule, step, rng))
    for sample in batch.infrared:
        base = preprocess(sample, config.img_h, config.img_w, rng, training=True)
        xi_gen.append(base.pixels)
        xi_emb.append(random_erase(base.pixels, schedule, step, rng))
    labels = torch.tensor([s.identity for s in batch.visible], dtype=torch.long)
    return (_to_tensor(xv_gen), _to_tensor(xi_gen),
            _to_tensor(xv_emb), _to_tensor(xi_emb), labels)


def _style_permutation(num_identities_in_batch, p, rng):
    """Index of a random same-identity infrared sample for each position."""
    perm = []
    for j in range(num_identities_in_batch * p):
        slot = j // p
        perm.append(slot * p + int(rng.integers(0, p)))
    return perm


def _set_requires_grad(module, flag):
    for param in module.parameters():
        param.requires_grad_(flag)


def _snapshot(module):
    return [p.detach().clone() for p in module.parameters()]


def _changed(module, snap):
    return any(not torch.equal(p.detach(), s)
               for p, s in zip(module.parameters(), snap))


def _id_loss(emb, feats_by_family, labels, families):
    logit_chunks, label_chunks = [], []
    for fam in families:
        feats = feats_by_family[fam]
        logit_chunks.append(emb.classify(feats))
        label_chunks.append(labels)
    return losses.cross_entropy_id(torch.cat(logit_chunks),
                                   torch.cat(label_chunks))


def train_step(state, batch, config, rng, schedule=None):
    """One optimization step; returns the per-step loss components.

    With config.debug_freeze_checks on, bitwise parameter snapshots verify
    that each sub-step touches exactly its designated module.
    """
    if schedule is None:
        schedule = erase_schedule(config)
    step = state.step
    weights = losses.LossWeights(config.lambda_adv, config.lambda_cf,
                                 config.m1, config.m2)
    soft = config.triplet == "soft"
    emb, gen, disc = state.embedder, state.generator, state.discriminator

    xv_gen, xi_gen, xv_emb, xi_emb, labels = prepare_batch(
        batch, config, schedule, step, rng)

    if not config.use_generator:
        return _baseline_step(state, xv_emb, xi_emb, labels, config, soft)

    perm = _style_permutation(len(batch.identities), config.p, rng)

    # forward the generator once: self-styled reconstruction plus bridging
    # images with the style path detached
    style_self = gen.encode_style(xi_gen)
    i_star = gen.generate(xi_gen, style_self)
    z_star = gen.generate(xv_gen, style_self[perm].detach())

    check = config.debug_freeze_checks
    if check:
        snap_g, snap_d = _snapshot(gen), _snapshot(disc)

    # (1) embedder update; bridging images enter detached. The visible
    # stack carries the erased crops plus the clean crops the bridging
    # images were generated from, so the color-free pairs share content.
    n = len(labels)
    f_v_all, f_z, f_i = emb.embed_families(
        torch.cat([xv_emb, xv_gen]), z_star.detach(), xi_emb)
    f_v, f_v_clean = f_v_all[:n], f_v_all[n:]
    bf = losses.BatchFeatures(f_v, f_z, f_i, labels)
    l_id = _compute("l_id", lambda: _id_loss(
        emb, {"v": f_v, "z": f_z, "i": f_i}, labels, config.id_families), step)
    if config.triplet_mode == "dual":
        l_tri = _compute("l_dual", lambda: losses.dual_triplet_loss(
            bf, config.m2, soft=soft), step)
    else:
        pool = torch.cat([bf.visible_n, bf.infrared_n])
        pool_labels = torch.cat([labels, labels])
        l_tri = _compute("l_tri", lambda: losses.batch_hard_triplet_loss(
            pool, pool_labels, config.m2, soft=soft), step)
    l_cf = _compute("l_cf", lambda: losses.color_free_loss(
        l2_normalize(f_v_clean), bf.intermediate_n), step)
    l_f = _require_finite(losses.embedding_total(l_id, l_tri, l_cf, weights),
                          "l_f", step)
    state.opt_f.zero_grad(set_to_none=True)
    l_f.backward()
    state.opt_f.step()

    if check:
        if _changed(gen, snap_g):
            raise RuntimeError("generator changed during embedder update")
        if _changed(disc, snap_d):
            raise RuntimeError("discriminator changed during embedder update")
        snap_f, snap_g = _snapshot(emb), _snapshot(gen)

    # (2) discriminator update on the embedder features, detached so the
    # frozen embedder and generator stay untouched
    f_v2, f_z2, f_i2 = f_v.detach(), f_z.detach(), f_i.detach()
    disc_in = torch.cat([f_v2, f_z2, f_i2])
    disc_targets = torch.cat([
        disc.target_labels(labels, LabelGroup.VISIBLE_OR_INTERMEDIATE),
        disc.target_labels(labels, LabelGroup.VISIBLE_OR_INTERMEDIATE),
        disc.target_labels(labels, LabelGroup.INFRARED),
    ])
    l_dis = _compute("l_dis", lambda: losses.discriminator_loss(
        disc(disc_in), disc_targets), step)
    state.opt_d.zero_grad(set_to_none=True)
    l_dis.backward()
    state.opt_d.step()

    if check:
        if _changed(emb, snap_f):
            raise RuntimeError("embedder changed during discriminator update")
        if _changed(gen, snap_g):
            raise RuntimeError("generator changed during discriminator update")
        snap_f, snap_d = _snapshot(emb), _snapshot(disc)

    # (3) generator update with embedder and discriminator frozen but
    # differentiable
    _set_requires_grad(emb, False)
    _set_requires_grad(disc, False)
    l_rec = _compute("l_rec", lambda: losses.reconstruction_loss(
        i_star, xi_gen), step)
    f_z_g = emb(z_star, Branch.INTERMEDIATE)
    l_idz = _compute("l_idz", lambda: losses.cross_entropy_id(
        emb.classify(f_z_g), labels), step)
    c_z = losses.batch_centers(f_z_g, labels)
    with torch.no_grad():
        c_v = losses.batch_centers(f_v2, labels)
        c_i = losses.batch_centers(f_i2, labels)
    l_adv = _compute("l_adv", lambda: losses.adversarial_loss(
        disc(f_z_g), labels, c_z, c_i, c_v, config.m1), step)
    l_gan = _require_finite(losses.generator_total(l_rec, l_idz, l_adv,
                                                   weights), "l_gan", step)
    state.opt_g.zero_grad(set_to_none=True)
    l_gan.backward()
    state.opt_g.step()
    _set_requires_grad(emb, True)
    _set_requires_grad(disc, True)

    if check:
        if _changed(emb, snap_f):
            raise RuntimeError("embedder changed during generator update")
        if _changed(disc, snap_d):
            raise RuntimeError("discriminator changed during generator update")

    state.step += 1
    return {
        "step": step,
        "l_id": l_id.item(), "l_dual": l_tri.item(), "l_cf": l_cf.item(),
        "l_f": l_f.item(), "l_dis": l_dis.item(), "l_adv": l_adv.item(),
        "l_rec": l_rec.item(), "l_gan": l_gan.item(), "l_idz": l_idz.item(),
    }


def _baseline_step(state, xv_emb, xi_emb, labels, config, soft):
    """Two-modality baseline: identity loss plus plain batch-hard triplet,
    no generator or discriminator involvement."""
    emb = state.embedder
    step = state.step
    f_v = emb(xv_emb, Branch.VISIBLE)
    f_i = emb(xi_emb, Branch.INFRARED)
    l_id = _id_loss(emb, {"v": f_v, "i": f_i}, labels, config.id_families)
    pool = torch.cat([l2_normalize(f_v), l2_normalize(f_i)])
    pool_labels = torch.cat([labels, labels])
    l_tri = losses.batch_hard_triplet_loss(pool, pool_labels, config.m2,
                                           soft=soft)
    l_f = l_id + l_tri
    _require_finite(l_f, "l_f", step)
    state.opt_f.zero_grad(set_to_none=True)
    l_f.backward()
    state.opt_f.step()
    state.step += 1
    zero = 0.0
    return {
        "step": step,
        "l_id": l_id.item(), "l_dual": l_tri.item(), "l_cf": zero,
        "l_f": l_f.item(), "l_dis": zero, "l_adv": zero,
        "l_rec": zero, "l_gan": zero, "l_idz": zero,
    }


def erase_schedule(config):
    return EraseSchedule(config.erase_p_start, config.erase_p_end,
                         config.erase_s_start, config.erase_s_end,
                         total_steps=config.steps)


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

def _named_arrays(state):
    arrays = {}
    for mod_name, module in state.modules().items():
        for name, tensor in module.state_dict().items():
            arrays[f"{mod_name}.{name}"] = tensor.detach().cpu().numpy()
    for tag, opt, module in (("opt_f", state.opt_f, state.embedder),
                             ("opt_g", state.opt_g, state.generator),
                             ("opt_d", state.opt_d, state.discriminator)):
        names = [n for n, _ in module.named_parameters()]
        params = [p for _, p in module.named_parameters()]
        for pname, param in zip(names, params):
            for key, value in opt.state.get(param, {}).items():
                if not torch.is_tensor(value):
                    value = torch.tensor(value)
                arrays[f"{tag}.{key}.{pname}"] = value.detach().cpu().numpy()
    return arrays


def save_checkpoint(state, config, path, np_rng=None):
    """Write a single-file checkpoint; returns the path."""
    arrays = _named_arrays(state)
    arrays["rng.torch_state"] = torch.get_rng_state().numpy()
    manifest = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        manifest.append({"name": name, "dtype": str(arr.dtype),
                         "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "version": VERSION,
        "step": state.step,
        "config": config.to_dict(),
        "np_rng_state": _jsonable(np_rng.bit_generator.state) if np_rng else None,
        "arrays": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def read_checkpoint(path):
    """Raw header dict and named arrays of a checkpoint file."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(MAGIC))
            if magic != MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint file")
            (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
            if version != VERSION:
                raise CheckpointError(
                    f"{path}: checkpoint version {version} unsupported "
                    f"(expected {VERSION})")
            (hlen,) = struct.unpack("<Q", _read_exact(fh, 8, path))
            header = json.loads(_read_exact(fh, hlen, path).decode())
            arrays = {}
            for entry in header["arrays"]:
                arr = np.frombuffer(
                    _read_exact(fh, _nbytes(entry), path),
                    dtype=np.dtype(entry["dtype"]),
                ).reshape(entry["shape"])
                arrays[entry["name"]] = arr
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return header, arrays


def _nbytes(entry):
    n = np.dtype(entry["dtype"]).itemsize
    for dim in entry["shape"]:
        n *= dim
    return n


def _read_exact(fh, n, path):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint")
    return data


def load_checkpoint(path, num_identities=None):
    """Rebuild (state, config, np_rng) from a checkpoint file.

    The identity count is recovered from the stored classifier shape unless
    given explicitly.
    """
    header, arrays = read_checkpoint(path)
    config = TrainConfig(**header["config"])
    if num_identities is None:
        num_identities = arrays["embedder.classifier.weight"].shape[0]
    state = init_state(config, num_identities)
    state.step = header["step"]

    for mod_name, module in state.modules().items():
        loaded = {}
        for name in module.state_dict():
            key = f"{mod_name}.{name}"
            if key not in arrays:
                raise CheckpointError(f"{path}: missing array {key}")
            loaded[name] = torch.from_numpy(arrays[key].copy())
        module.load_state_dict(loaded)

    for tag, opt, module in (("opt_f", state.opt_f, state.embedder),
                             ("opt_g", state.opt_g, state.generator),
                             ("opt_d", state.opt_d, state.discriminator)):
        prefix = tag + "."
        per_param = {}
        for key in arrays:
            if not key.startswith(prefix):
                continue
            slot, _, pname = key[len(prefix):].partition(".")
            per_param.setdefault(pname, {})[slot] = torch.from_numpy(
                arrays[key].copy())
        for pname, param in module.named_parameters():
            if pname in per_param:
                opt.state[param] = per_param[pname]

    if header.get("np_rng_state") is not None:
        np_rng = np.random.default_rng()
        np_rng.bit_generator.state = header["np_rng_state"]
    else:
        np_rng = None
    torch.set_rng_state(torch.from_numpy(arrays["rng.torch_state"].copy()))
    return state, config, np_rng


# ---------------------------------------------------------------------------
# Full training runs
# ---------------------------------------------------------------------------

def latest_checkpoint(out_dir):
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    if not os.path.isdir(ckpt_dir):
        return None
    names = sorted(n for n in os.listdir(ckpt_dir) if n.endswith(".ckpt"))
    return os.path.join(ckpt_dir, names[-1]) if names else None


def train(config, dataset, out_dir, resume=False, stop_after=None):
    """Run the training schedule; returns the latest checkpoint path.

    The run directory holds a config snapshot (written before the first
    step), checkpoints/, and metrics.jsonl with one record per step. A
    resumed run continues its stored config's schedule from the latest
    checkpoint. stop_after bounds the steps taken by this invocation
    (a checkpoint is written at the early stop).
    """
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")

    start = latest_checkpoint(out_dir) if resume else None
    if start is not None:
        state, config, np_rng = load_checkpoint(start, dataset.num_identities)
        _truncate_metrics(metrics_path, state.step)
    else:
        with open(os.path.join(out_dir, "config.txt"), "w") as fh:
            fh.write(dump_config(config))
        state = init_state(config, dataset.num_identities)
        np_rng = np.random.default_rng(config.seed)

    schedule = erase_schedule(config)
    limit = config.steps if stop_after is None else min(
        config.steps, state.step + stop_after)
    path = start
    with open(metrics_path, "a") as metrics_fh:
        while state.step < limit:
            batch = sample_batch(dataset, config.b, config.p, np_rng)
            record = train_step(state, batch, config, np_rng, schedule)
            metrics_fh.write(json.dumps(record) + "\n")
            if (state.step % config.checkpoint_every == 0
                    or state.step == limit):
                metrics_fh.flush()
                path = os.path.join(ckpt_dir, f"step_{state.step:06d}.ckpt")
                save_checkpoint(state, config, path, np_rng)
    return path


def _truncate_metrics(path, max_step):
    """Drop metric records past a resume point so steps are never duplicated."""
    if not os.path.exists(path):
        return
    with open(path) as fh:
        kept = [line for line in fh
                if line.strip() and json.loads(line)["step"] < max_step]
    with open(path, "w") as fh:
        fh.writelines(kept)
