"""Command-line entry point.

Subcommands: toydata (synthesize the paired dataset), train, eval
(CMC/mAP report), mmd (bridging report), gen (dump bridging-image
triptychs). Exit codes: 0 success, 1 usage or config error, 2 data or
validation error, 3 numerical abort.
"""

import argparse
import json
import os
import sys

import numpy as np
from PIL import Image

from . import data, evaluation, trainer
from .config import ConfigError, TrainConfig, dump_config, load_config
from .data import DataError, Modality, Split
from .evaluation import ProtocolError, ShotMode
from .trainer import CheckpointError, NumericalError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser():
    parser = _Parser(prog="bridgereid",
                     description="Cross-modal re-identification training "
                                 "with a generated bridging modality")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toydata", help="synthesize the paired toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-ids", type=int, default=16)
    p.add_argument("--per-id", type=int, default=8)
    p.add_argument("--per-id-test", type=int, default=4)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--width", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true",
                   help="overwrite an existing non-empty output directory")

    p = sub.add_parser("train", help="run the training schedule")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("eval", help="cross-modal CMC/mAP report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--shot", choices=["single", "multi"], default="single")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report path (default: stdout only)")

    p = sub.add_parser("mmd", help="bridging discrepancy report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "query", "gallery"],
                   default="query")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("gen", help="dump visible/bridging/infrared triptychs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "query", "gallery"],
                   default="query")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def cmd_toydata(args):
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        print(f"error: {args.out} exists and is not empty "
              f"(use --force to overwrite)", file=sys.stderr)
        return EXIT_DATA
    splits = ((Split.TRAIN, args.per_id), (Split.QUERY, args.per_id_test),
              (Split.GALLERY, args.per_id_test))
    for split, per_id in splits:
        ds = data.synthesize_toy_dataset(args.num_ids, per_id, args.height,
                                         args.width, args.seed, split=split)
        data.save_dataset(ds, args.out)
    print(os.path.abspath(args.out))
    return EXIT_OK


def cmd_train(args):
    config = load_config(args.config)
    dataset = data.load_dataset(args.data, Split.TRAIN)
    final = trainer.train(config, dataset, args.out, resume=args.resume)
    print(os.path.abspath(final))
    return EXIT_OK


def _load_state(path):
    state, config, _ = trainer.load_checkpoint(path)
    return state, config


def _write_report(report, out_dir_default, args, name):
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        path = args.out
    else:
        path = None
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(text + "\n")
        print(os.path.abspath(path))
    else:
        print(text)
    return EXIT_OK


def cmd_eval(args):
    state, config = _load_state(args.checkpoint)
    query_ds = data.load_dataset(args.data, Split.QUERY)
    gallery_ds = data.load_dataset(args.data, Split.GALLERY)
    report = evaluation.evaluate_retrieval(
        state.embedder, query_ds, gallery_ds, config,
        ShotMode(args.shot), args.seed)
    report["checkpoint"] = os.path.abspath(args.checkpoint)
    report["config_hash"] = config.config_hash()
    return _write_report(report, None, args, "eval")


def cmd_mmd(args):
    state, config = _load_state(args.checkpoint)
    dataset = data.load_dataset(args.data, Split(args.split))
    report = evaluation.bridging_report(state.embedder, state.generator,
                                        dataset, config, seed=args.seed)
    report["checkpoint"] = os.path.abspath(args.checkpoint)
    report["config_hash"] = config.config_hash()
    return _write_report(report, None, args, "mmd")


def cmd_gen(args):
    state, config = _load_state(args.checkpoint)
    dataset = data.load_dataset(args.data, Split(args.split))
    rng = np.random.default_rng(args.seed)
    visible = [s for s in dataset.samples if s.modality is Modality.VISIBLE]
    infrared = [s for s in dataset.samples if s.modality is Modality.INFRARED]
    if not visible or not infrared:
        raise DataError("gen needs both modalities in the chosen split")
    count = min(args.count, len(visible))
    chosen = rng.choice(len(visible), size=count, replace=False)
    picked_v = [visible[int(i)] for i in chosen]
    by_id = {}
    for s in infrared:
        by_id.setdefault(s.identity, []).append(s)
    picked_i = [by_id[s.identity][int(rng.integers(0, len(by_id[s.identity])))]
                for s in picked_v]

    z = evaluation.generate_bridging_samples(
        state.generator, picked_v, picked_i, rng, config)
    os.makedirs(args.out, exist_ok=True)
    for k, (sv, si) in enumerate(zip(picked_v, picked_i)):
        v_px = data.preprocess(sv, config.img_h, config.img_w).pixels
        i_px = data.preprocess(si, config.img_h, config.img_w).pixels
        z_px = z[k].permute(1, 2, 0).numpy()
        strip = np.concatenate([v_px, z_px, i_px], axis=1)
        arr = np.clip(np.rint(strip * 255.0), 0, 255).astype(np.uint8)
        path = os.path.join(args.out, f"triptych_{k:03d}_id{sv.identity:04d}.png")
        Image.fromarray(arr).save(path)
        print(os.path.abspath(path))
    return EXIT_OK


_COMMANDS = {"toydata": cmd_toydata, "train": cmd_train, "eval": cmd_eval,
             "mmd": cmd_mmd, "gen": cmd_gen}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ProtocolError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
