"""Command-line surface: synth, pretrain, evaluate, report.

Exit codes: 0 on success, 1 on usage errors, 2 on data/validation errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .data import SynthConfig, load_manifest, synth_generate
from .errors import MultisslError
from .training import (DownstreamConfig, PretrainConfig, attach_probe_and_train,
                       load_checkpoint, pretrain, save_checkpoint, write_run_log)

_MODE_ALIASES = {"linear": "linear_eval", "finetune": "finetune",
                 "scratch": "supervised_scratch"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="multissl",
                     description="Multi-modal multi-task self-supervised toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--config", required=True, help="SynthConfig JSON file")
    p_synth.add_argument("--out", required=True, help="output directory")

    p_pre = sub.add_parser("pretrain", help="self-supervised pretraining")
    p_pre.add_argument("--config", required=True, help="PretrainConfig JSON file")
    p_pre.add_argument("--data", required=True, help="manifest path")
    p_pre.add_argument("--out", required=True, help="checkpoint output path")
    p_pre.add_argument("--log", default=None, help="per-step loss CSV path")
    p_pre.add_argument("--resume", default=None, help="checkpoint to resume from")

    p_eval = sub.add_parser("evaluate", help="downstream evaluation protocol")
    p_eval.add_argument("--ckpt", required=True, help="pretraining checkpoint")
    p_eval.add_argument("--data", required=True, help="manifest path")
    p_eval.add_argument("--mode", required=True, choices=sorted(_MODE_ALIASES))
    p_eval.add_argument("--out", required=True, help="report JSON output path")
    p_eval.add_argument("--fusion", default="concat",
                        choices=["concat", "mean", "vision_only"])
    p_eval.add_argument("--epochs", type=int, default=30)
    p_eval.add_argument("--lr", type=float, default=0.01)
    p_eval.add_argument("--weight-decay", type=float, default=1e-4)
    p_eval.add_argument("--threshold", type=float, default=0.5)
    p_eval.add_argument("--batch-size", type=int, default=64)
    p_eval.add_argument("--seed", type=int, default=0)

    p_rep = sub.add_parser("report", help="emit CSV tables from a report")
    p_rep.add_argument("--in", dest="report", required=True, help="report JSON path")
    p_rep.add_argument("--confusion-csv", required=True,
                       help="confusion matrix CSV output path")
    p_rep.add_argument("--per-class-csv", default=None,
                       help="per-class metrics CSV output path")
    return parser


def _load_json(path: str, what: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise MultisslError(f"{what} file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise MultisslError(f"{what} file {p} is not valid JSON: {err}") from None


def _cmd_synth(args) -> int:
    cfg = SynthConfig.from_dict(_load_json(args.config, "synth config"))
    manifest = synth_generate(cfg, args.out)
    print(f"wrote {manifest.name} to {Path(args.out) / 'manifest.json'}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = PretrainConfig.from_dict(_load_json(args.config, "pretrain config"))
    dataset = load_manifest(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, rows = pretrain(cfg, dataset, resume_from=resume)
    save_checkpoint(ckpt, args.out)
    if args.log:
        write_run_log(rows, args.log)
    final = rows[-1]["total"] if rows else float("nan")
    print(f"wrote checkpoint to {args.out} (final loss {final:.6f})")
    return 0


def _cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_manifest(args.data)
    dcfg = DownstreamConfig(mode=_MODE_ALIASES[args.mode], fusion=args.fusion,
                            epochs=args.epochs, lr=args.lr,
                            weight_decay=args.weight_decay,
                            threshold=args.threshold, seed=args.seed,
                            batch_size=args.batch_size)
    _, report = attach_probe_and_train(ckpt, dataset, dcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    print(f"wrote report to {out} (weighted accuracy "
          f"{report.weighted_accuracy:.4f})")
    return 0


def _cmd_report(args) -> int:
    doc = _load_json(args.report, "report")
    for key in ("task_type", "confusion", "class_names", "per_class"):
        if key not in doc:
            raise MultisslError(f"report is missing field '{key}'")
    conf_path = Path(args.confusion_csv)
    conf_path.parent.mkdir(parents=True, exist_ok=True)
    with open(conf_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if doc["task_type"] == "single_label":
            writer.writerow(doc["class_names"])
            for row in doc["confusion"]:
                writer.writerow(row)
        else:
            writer.writerow(["class", "tn", "fp", "fn", "tp"])
            for name, cells in zip(doc["class_names"], doc["confusion"]):
                (tn, fp), (fn, tp) = cells
                writer.writerow([name, tn, fp, fn, tp])
    if args.per_class_csv:
        pc_path = Path(args.per_class_csv)
        pc_path.parent.mkdir(parents=True, exist_ok=True)
        with open(pc_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["class", "support", "precision", "recall", "f1"])
            for entry in doc["per_class"]:
                writer.writerow([entry["class"], entry["support"],
                                 entry["precision"], entry["recall"], entry["f1"]])
    print(f"wrote confusion CSV to {conf_path}")
    return 0


_COMMANDS = {"synth": _cmd_synth, "pretrain": _cmd_pretrain,
             "evaluate": _cmd_evaluate, "report": _cmd_report}


def cli(argv=None) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except SystemExit as err:   # --help
        return 0 if err.code in (0, None) else 1
    try:
        return _COMMANDS[args.command](args)
    except MultisslError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())
