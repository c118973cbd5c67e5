"""
Command-line entry point: ``repcount <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Config precedence is flag > ``--config`` file > built-in default, and the
``REPCOUNT_SEED`` environment variable overrides the seed from any source.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("repcount")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class DataError(Exception):
    pass


def _threads(n: int):
    import torch

    torch.set_num_threads(n)


def _load_config(args, stage: str, default=None):
    from .config import TrainConfig, desk_config

    if args.config:
        try:
            cfg = TrainConfig.from_file(args.config)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read config {args.config}: {e}") from None
    else:
        cfg = default or desk_config()
    over = {
        "teacher": args.teacher,
        "lr": args.lr,
        "seed": args.seed,
        "top_k": getattr(args, "top_k", None),
        "selection": getattr(args, "selection", None),
        "dtype": args.dtype,
    }
    if args.epochs is not None:
        over["epochs_rpn" if stage == "rpn" else "epochs_dpn"] = args.epochs
    if getattr(args, "attention_eq2_literal", False):
        over["rpn.scaled"] = False
    if getattr(args, "transformer_standard", False):
        over["rpn.standard"] = True
    if getattr(args, "dpn_features", None):
        over["dpn.image_features"] = args.dpn_features
    env_seed = os.environ.get("REPCOUNT_SEED")
    if env_seed is not None:
        try:
            over["seed"] = int(env_seed)
        except ValueError:
            raise DataError(f"REPCOUNT_SEED must be an integer, got {env_seed!r}") from None
    return cfg.updated(**over)


def _dataset(path):
    from .dataio import load_dataset

    return load_dataset(path)


def _write_json(path, obj):
    text = json.dumps(obj, indent=1, sort_keys=True)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")
    return text


def cmd_gen_data(args):
    from .dataio import SceneSpec, generate_dataset, save_dataset

    try:
        spec = SceneSpec.from_dict(json.loads(Path(args.spec).read_text()))
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as e:
        raise DataError(f"bad scene spec {args.spec}: {e}") from None
    seed = int(os.environ.get("REPCOUNT_SEED", args.seed))
    scenes = generate_dataset(spec, args.n, seed=seed, prefix=args.prefix)
    save_dataset(scenes, args.out)
    print(json.dumps({"out": str(args.out), "images": len(scenes), "seed": seed}))


def _train_log(path):
    from .train import jsonl_sink

    if not path:
        return None, None
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w")
    return fh, jsonl_sink(fh)


def cmd_train_rpn(args):
    from .checkpoint import save_checkpoint
    from .train import train_reprpn

    cfg = _load_config(args, "rpn")
    data = _dataset(args.data)
    fh, sink = _train_log(args.log)
    try:
        ck = train_reprpn(data, cfg, sink)
    finally:
        if fh:
            fh.close()
    save_checkpoint(args.out, ck)
    print(json.dumps({"out": str(args.out), "final_loss": ck.meta["loss_log"][-1] if ck.meta["loss_log"] else None,
                      "target_stats": ck.meta["target_stats"]}))


def cmd_train_dpn(args):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .config import TrainConfig
    from .train import train_dpn

    rpn_ck = load_checkpoint(args.ckpt_rpn, "reprpn")
    # without a config file, stage 2 inherits the stage-1 settings
    cfg = _load_config(args, "dpn", TrainConfig.from_dict(rpn_ck.meta["config"]))
    data = _dataset(args.data)
    fh, sink = _train_log(args.log)
    try:
        ck = train_dpn(data, rpn_ck, cfg, sink)
    finally:
        if fh:
            fh.close()
    save_checkpoint(args.out, ck)
    print(json.dumps({"out": str(args.out), "final_loss": ck.meta["loss_log"][-1] if ck.meta["loss_log"] else None,
                      "exemplar_stats": ck.meta["exemplar_stats"]}))


def _counter(args):
    from .checkpoint import load_checkpoint
    from .pipeline import RepCounter

    rpn_ck = load_checkpoint(args.ckpt_rpn, "reprpn")
    dpn_ck = load_checkpoint(args.ckpt_dpn, "dpn") if args.ckpt_dpn else None
    return RepCounter.from_checkpoints(rpn_ck, dpn_ck)


def cmd_eval(args):
    from .pipeline import evaluate_dataset

    try:
        ks = [int(k) for k in args.k.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--k expects comma-separated integers, got {args.k!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("--k values must be >= 1")
    counter = _counter(args)
    report = evaluate_dataset(counter, _dataset(args.data), ks)
    _write_json(args.out, report)
    print(json.dumps({"out": args.out, "metrics": report["metrics"],
                      "top1_repetition_pearson": report["top1_repetition_pearson"]}))


def cmd_predict(args):
    from PIL import Image

    from .densitymap import count, load_density, save_density
    from .render import overlay

    try:
        image = np.asarray(Image.open(args.image).convert("RGB"))
    except OSError as e:
        raise DataError(f"cannot read image {args.image}: {e}") from None
    counter = _counter(args)
    exemplars = counter.predict(image, args.top_k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    rows, maps = [], []
    for i, e in enumerate(exemplars):
        rec = {"box": [float(v) for v in e.proposal.box], "repetition": e.proposal.repetition,
               "objectness": e.proposal.objectness}
        if e.density is not None:
            path = save_density(out / f"{stem}_exemplar{i}", e.density)
            # report the count of what was written, so it re-sums exactly
            z = load_density(path)
            maps.append(z)
            rec.update(density=str(path), count=count(z))
        else:
            rec.update(density=None, count=e.count)
        rows.append(rec)
    overlay_path = out / f"{stem}_overlay.png"
    overlay(image, maps[0] if maps else None, [r["box"] for r in rows]).save(overlay_path)
    summary = {"image": str(args.image), "exemplars": rows, "overlay": str(overlay_path),
               "count": rows[0]["count"] if rows else 0.0}
    _write_json(out / f"{stem}_summary.json", summary)
    print(json.dumps(summary))


def _add_train_flags(p, stage):
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--data", required=True, help="dataset directory (images/ + annotations.json)")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--log", help="write per-epoch {stage, epoch, loss} as JSON lines here")
    p.add_argument("--teacher", choices=["oracle", "none"], help="knowledge-transfer teacher")
    p.add_argument("--epochs", type=int, help=f"epochs for the {stage} stage")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--seed", type=int, help="training seed (REPCOUNT_SEED overrides)")
    p.add_argument("--top-k", type=int, help="exemplars per image for stage 2")
    p.add_argument("--selection", choices=["repetition", "objectness"],
                   help="rank exemplars by repetition score or by objectness (plain RPN)")
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--attention-eq2-literal", action="store_true",
                   help="unscaled attention logits, softmax(XWq (XWk)^T)")
    p.add_argument("--transformer-standard", action="store_true",
                   help="residual + feed-forward encoder layers")
    p.add_argument("--dpn-features", choices=["backbone", "encoder"],
                   help="image-side features the DPN correlates against")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="repcount", description="Exemplar-free repetitive object counting.")
    ap.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 keeps runs bit-reproducible)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON SceneSpec file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=100, help="number of scenes")
    p.add_argument("--prefix", default="scene")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-rpn", help="stage 1: train the RepRPN")
    _add_train_flags(p, "rpn")
    p.set_defaults(func=cmd_train_rpn)

    p = sub.add_parser("train-dpn", help="stage 2: train the DPN against a frozen RepRPN")
    _add_train_flags(p, "dpn")
    p.add_argument("--ckpt-rpn", required=True, help="stage-1 checkpoint")
    p.set_defaults(func=cmd_train_dpn)

    p = sub.add_parser("eval", help="top-k MAE/RMSE report")
    p.add_argument("--ckpt-rpn", required=True)
    p.add_argument("--ckpt-dpn", help="omit to count with repetition scores only")
    p.add_argument("--data", required=True)
    p.add_argument("--k", default="1,3,5", help="comma-separated k values")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="count one image and render density overlays")
    p.add_argument("image")
    p.add_argument("--ckpt-rpn", required=True)
    p.add_argument("--ckpt-dpn")
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--out", default="predict_out", help="output directory")
    p.set_defaults(func=cmd_predict)
    return ap


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .dataio import DatasetError, PlacementError
    from .train import NumericalError, StageOrderError

    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _threads(args.threads)
    try:
        args.func(args)
    except argparse.ArgumentTypeError as e:
        print(f"repcount: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetError, PlacementError, CheckpointError, StageOrderError, FileNotFoundError) as e:
        print(f"repcount: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"repcount: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        # bad config values reach here from the dataclass validators
        print(f"repcount: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
