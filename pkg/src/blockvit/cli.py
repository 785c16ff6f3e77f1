"""Command-line entry point: ``blockvit <command> [--config F] [--seed N] [--out DIR] [--precision 32|64]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import numerics as nx
from . import report as rep
from .data import SyntheticSpec, synth_generate
from .errors import BlockVitError, DataError
from .metrics import evaluate

COMMANDS = ("pretrain", "finetune", "msdft", "crosseval", "fewshot", "forgetting", "ablate", "metrics", "synth")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI config file ([meta] version = 1)")
    p.add_argument("--seed", type=int, default=None, help="root seed (default: [run] seed from the config, else 0)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--precision", choices=("32", "64"), default="32", help="floating-point width")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockvit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "pretrain": "self-distillation post-pretraining (unfrozen or block-expanded)",
        "finetune": "fine-tune a classifier and report test metrics",
        "msdft": "pooled multi-source fine-tuning, per-dataset and pooled reports",
        "crosseval": "train on each dataset, test on every other",
        "fewshot": "replicated few-shot fine-tuning grid",
        "forgetting": "kNN forgetting study with LDA scatter",
        "ablate": "sweep one axis (expansion_k, grid_g, embedding_strategy, loss_variant)",
        "metrics": "recompute a report from a predictions CSV",
        "synth": "generate synthetic ordinal-stage datasets",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        _common(p)
        if name == "metrics":
            p.add_argument("predictions", type=Path, help="CSV with a 'label' column and p0..p{C-1} or 'pred'")
    return parser


def _read_predictions(path: Path):
    if not path.exists():
        raise DataError(f"predictions file {path} does not exist")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "label" not in rows[0]:
        raise DataError(f"{path}: needs a header with a 'label' column")
    prob_cols = sorted((c for c in rows[0] if c.startswith("p") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    try:
        labels = np.array([int(r["label"]) for r in rows])
        if prob_cols:
            probs = np.array([[float(r[c]) for c in prob_cols] for r in rows])
            preds = np.array([int(r["pred"]) for r in rows]) if "pred" in rows[0] else None
            return probs, labels, preds
        if "pred" not in rows[0]:
            raise DataError(f"{path}: needs probability columns p0.. or a 'pred' column")
        preds = np.array([int(r["pred"]) for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    c = int(max(labels.max(), preds.max())) + 1
    return np.eye(c)[preds], labels, preds


def cmd_metrics(ctx: ex.RunContext, predictions: Path) -> dict:
    probs, labels, preds = _read_predictions(predictions)
    n_classes = ctx.experiment.class_count if ctx.experiment.class_count >= probs.shape[1] else probs.shape[1]
    report = evaluate(probs, labels, n_classes, {"source": predictions.name, "config_hash": ctx.config_hash}, preds)
    ctx.write_config()
    rep.emit_report(report, "json", ctx.path("report.json"))
    rep.emit_report([rep.report_row(predictions.stem, report, ctx.config_hash)], "csv", ctx.path("report.csv"))
    return {"report": report}


def cmd_synth(ctx: ex.RunContext) -> dict:
    exp = ctx.experiment
    written = []
    for i in range(exp.synth_datasets):
        spec = SyntheticSpec(
            n_per_class=exp.synth_n_per_class, class_count=exp.class_count, image_size=ctx.model.image_size,
            domain=exp.synth_domain + i, seed=ex.derive_seed(ctx.seed, "synth", i), name=f"synth{i}",
        )
        out_dir = ctx.path(spec.name)
        synth_generate(spec, out_dir)
        written.append(str(out_dir / "manifest.csv"))
    ctx.write_config()
    return {"manifests": written}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    dtype = np.float64 if args.precision == "64" else np.float32
    with nx.precision(dtype):
        ctx = ex.RunContext.from_ini(args.config, seed=args.seed, out=args.out)
        if args.command == "metrics":
            cmd_metrics(ctx, args.predictions)
        elif args.command == "synth":
            cmd_synth(ctx)
        else:
            getattr(ex, f"cmd_{args.command}")(ctx)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except BlockVitError as exc:
        print(f"blockvit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"blockvit: I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
