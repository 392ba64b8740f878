"""Command-line entry point: ``beamsense generate|pretrain|finetune|evaluate|sense``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness, predictor
from .config import ExperimentConfig
from .errors import BeamsenseError


def _config(args):
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def cmd_generate(args):
    cfg = _config(args)
    out = Path(args.out)
    modes = ("multi", "single") if args.mode == "both" else (args.mode,)
    for mode in modes:
        target = out / ("source" if mode == "multi" else "target") if args.mode == "both" else out
        n = harness.generate_dataset(cfg, mode, target)
        print(f"{mode}: {n} frames -> {target}")


def cmd_pretrain(args):
    cfg = _config(args)
    _, report = harness.run_pretrain(cfg, args.data, args.out)
    print(json.dumps(report.final["pretrain"], sort_keys=True))


def cmd_finetune(args):
    cfg = _config(args)
    pre = predictor.load_model(args.model)
    report, _, _ = harness.run_transfer(cfg, pre, args.data, args.out)
    print(json.dumps({"final": report.final, "epochs_to_threshold": report.epochs_to_threshold,
                      "speedup": report.speedup}, sort_keys=True))


def cmd_evaluate(args):
    cfg = _config(args)
    params = predictor.load_model(args.model)
    ds = harness.build_beam_dataset(args.data, harness.list_paths(args.data), cfg)
    metrics = predictor.evaluate(params, ds)
    text = json.dumps(metrics, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "metrics.json").write_text(text + "\n")
    print(text)


def cmd_sense(args):
    cfg = _config(args)
    _, records = harness.sense_path(args.data, cfg, args.out)
    n_dyn = sum(r.is_dynamic for _, r in records)
    print(f"{len(records)} tracks, {n_dyn} dynamic")


def build_parser():
    ap = argparse.ArgumentParser(prog="beamsense", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key = value experiment config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", required=out_required, help="output directory")
        return p

    p = common(sub.add_parser("generate", help="simulate a dataset"))
    p.add_argument("--mode", choices=("single", "multi", "both"), default="both")
    p.set_defaults(func=cmd_generate)

    p = common(sub.add_parser("pretrain", help="pre-train on a multi-environment dataset"))
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("finetune", help="fine-tune vs scratch on a target dataset"))
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="pre-trained model directory")
    p.set_defaults(func=cmd_finetune)

    p = common(sub.add_parser("evaluate", help="Top-k metrics of a model on a dataset"),
               out_required=False)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("sense", help="dynamic-scatterer detection on one stored path"),
               out_required=False)
    p.add_argument("--data", required=True, help="path directory (…/env_XXX/path_XXX)")
    p.set_defaults(func=cmd_sense)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (BeamsenseError, OSError, ValueError, KeyError) as exc:
        print(f"beamsense {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
