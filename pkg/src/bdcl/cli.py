"""Command-line entry point: ``bdcl <subcommand> [--config F] [--seed N] [--out DIR]``.

Exit status is 0 on success, 1 when an input or config fails validation (or
a check such as ``gradcheck`` does not pass) and 2 on an internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from . import checkpoint, gradcheck
from .config import ConfigError, load_config, schema_help
from .core import BDCLError, seeded_rng
from .datagen import load_features, save_features, synth_dataset, synth_priors
from .experiments import compare_losses, holdout_for, profile_sample
from .metrics import evaluate
from .model import init_params
from .priors import ingest, write_records
from .trainer import stage1_train, stage2_tune


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _write_history(path: Path, history) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history.epochs:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")


def _ckpt_name(stage: str, fmt: str) -> str:
    return f"{stage}.json" if fmt == "json" else f"{stage}.ckpt"


def _dataset(args, cfg):
    if args.data:
        return load_features(args.data)
    return synth_dataset(cfg.synth())


def _priors(path, num_classes):
    records, _ = ingest(path, strict=True, num_classes=num_classes)
    return records


def _epoch_saver(args, stage: str):
    if not args.epoch_checkpoints:
        return None
    folder = args.out / "epochs"
    folder.mkdir(exist_ok=True)

    def save(epoch, params):
        checkpoint.save(folder / _ckpt_name(f"{stage}-epoch{epoch:03d}", args.checkpoint_format),
                        params)
        return None
    return save


def cmd_gen_data(args, cfg):
    train = synth_dataset(cfg.synth())
    test = holdout_for(cfg)
    save_features(args.out / "train.jsonl", train)
    save_features(args.out / "test.jsonl", test)
    print(f"wrote {len(train)} training and {len(test)} test samples to {args.out}")


def cmd_gen_priors(args, cfg):
    ds = load_features(args.data)
    p = cfg.section("priors")
    records = synth_priors(ds, p["fidelity"], p["r_policy"], seed=cfg.seed,
                           include_hidden=p["include_hidden"], aggregation=p["aggregation"])
    name = args.name or f"{Path(args.data).stem}.priors.jsonl"
    write_records(args.out / name, records)
    print(f"wrote {len(records)} prior records to {args.out / name}")


def cmd_train(args, cfg):
    ds = _dataset(args, cfg)
    params = init_params(seeded_rng(cfg.seed), ds.dims, cfg.section("model")["latent_dim"],
                         ds.num_classes)
    params, history = stage1_train(ds, params, cfg.train(), on_epoch=_epoch_saver(args, "stage1"))
    checkpoint.save(args.out / _ckpt_name("stage1", args.checkpoint_format), params)
    _write_history(args.out / "stage1_history.jsonl", history)
    print(f"stage 1 finished after {len(history.epochs)} epochs")


def cmd_tune(args, cfg):
    ds = _dataset(args, cfg)
    params = checkpoint.load(args.checkpoint)
    priors = _priors(args.priors, ds.num_classes)
    params, history = stage2_tune(params, ds, priors, cfg.train(),
                                  on_epoch=_epoch_saver(args, "stage2"))
    checkpoint.save(args.out / _ckpt_name("stage2", args.checkpoint_format), params)
    _write_history(args.out / "stage2_history.jsonl", history)
    print(f"stage 2 finished after {len(history.epochs)} epochs")


def cmd_eval(args, cfg):
    ds = load_features(args.data) if args.data else holdout_for(cfg)
    params = checkpoint.load(args.checkpoint)
    priors = _priors(args.priors, ds.num_classes) if args.priors else None
    report = evaluate(params, ds, use_priors=priors, config_fingerprint=cfg.fingerprint(),
                      seed=cfg.seed)
    _dump(args.out / (args.name or "report.json"), report.to_json())
    print(f"accuracy {report.overall_accuracy:.4f}  weighted F1 {report.weighted_f1:.4f}")


def cmd_gradcheck(args, cfg):
    report = gradcheck.run_suite(cfg.seed, instances=args.instances)
    _dump(args.out / "gradcheck.json", report)
    print(f"max relative error {report['max_rel_error']:.3e} (tolerance {report['tolerance']:g})")
    if not report["passed"]:
        raise CheckFailed("gradient check failed")


def cmd_compare_losses(args, cfg):
    report = compare_losses(cfg, with_pca=True)
    _dump(args.out / "compare_losses.json", report)
    for s in report["summary"]:
        print(f"counts {s['counts']}: silhouette wins {s['silhouette_wins']}/{s['seeds']}, "
              f"tail recall not worse {s['tail_recall_not_worse']}/{s['seeds']}")


def cmd_profile_sample(args, cfg):
    report = profile_sample(cfg)
    _dump(args.out / "profile.json", report)
    print(f"{report['kind']}: added {report['added']} -> total {report['total']}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "synthesize train and test feature files"),
    "gen-priors": (cmd_gen_priors, "stub prior records for a feature file"),
    "train": (cmd_train, "stage-1 training"),
    "tune": (cmd_tune, "stage-2 prior-guided tuning"),
    "eval": (cmd_eval, "metrics report for a checkpoint"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient suite"),
    "compare-losses": (cmd_compare_losses, "balanced vs uniform denominator head-to-head"),
    "profile-sample": (cmd_profile_sample, "augmentation sampling profile"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bdcl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file (default: $BDCL_CONFIG, else built-in)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", type=Path, default=Path("."), help="artifact directory")
        if name in ("gen-priors", "train", "tune", "eval"):
            p.add_argument("--data", required=name == "gen-priors", help="feature file")
        if name in ("tune", "eval"):
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--priors", required=name == "tune", help="prior record file")
        if name in ("train", "tune"):
            p.add_argument("--checkpoint-format", choices=("binary", "json"), default="binary")
            p.add_argument("--epoch-checkpoints", action="store_true",
                           help="also save a checkpoint after every epoch")
        if name in ("gen-priors", "eval"):
            p.add_argument("--name", help="output file name")
        if name == "gradcheck":
            p.add_argument("--instances", type=int, default=20)
    return parser


def cli_main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.seed is not None and args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg = load_config(args.config).with_seed(args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command][0](args, cfg)
        return 0
    except UsageError as e:
        print(f"error: {e}\nconfig files follow this schema:\n{schema_help()}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"error: {e}\nconfig files follow this schema:\n{schema_help()}", file=sys.stderr)
        return 1
    except (BDCLError, CheckFailed, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
