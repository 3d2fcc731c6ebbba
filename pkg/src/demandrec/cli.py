"""Command-line entry points: generate, train, evaluate, ablate.

Every command takes a JSON experiment config (--config); selected flags
override config keys.  Exit codes: 0 success, 1 usage/config error,
2 runtime failure.  Result files are byte-reproducible for a fixed
config + seed; each delimited report gets a rendered PNG next to it.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Sequence

from . import report
from .config import ConfigError, ExperimentConfig, load_config
from .data import (
    DataError,
    PurchaseLog,
    parse_purchase_log,
    split_leave_last,
    write_id_maps,
    write_purchase_log,
)
from .evaluation import evaluate, pop_scorer
from .synthetic import SyntheticError, generate_synthetic, write_annotations
from .training import TrainConfig, TrainingDiverged, load_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

ABLATION_SCALE_SETS = ("item", "item,day", "item,week", "item,day,week")
ABLATION_JOINS = ("average", "max", "weighted", "mlp")


class CliParser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> CliParser:
    parser = CliParser(
        prog="demandrec",
        description="Multi-time-scale next-item recommender experiments",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add_common(p):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--output-dir", dest="output_dir", help="override output directory")
        p.add_argument("--data-file", dest="data_file", help="override the events file")
        p.add_argument(
            "--synthetic-spec",
            dest="synthetic_file",
            help="override with a synthetic spec JSON file",
        )
        p.add_argument("--scales", help="override scales, comma separated")
        p.add_argument("--join", help="override join strategy")
        p.add_argument("--epochs", type=int, help="override training epochs")
        p.add_argument(
            "--learning-rate", dest="learning_rate", type=float, help="override lr"
        )
        p.add_argument(
            "--batch-size", dest="batch_size", type=int, help="override batch size"
        )
        p.add_argument("--dim", type=int, help="override embedding dimension")

    g = sub.add_parser("generate", help="write a synthetic log + annotations")
    add_common(g)
    g.set_defaults(handler=cmd_generate)

    t = sub.add_parser("train", help="train a model; writes checkpoints + loss history")
    add_common(t)
    t.add_argument("--resume", help="checkpoint directory to resume from")
    t.set_defaults(handler=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint against the split")
    add_common(e)
    e.add_argument("--checkpoint", help="checkpoint directory (default: best/latest)")
    e.add_argument(
        "--target", choices=("test", "validation"), default="test",
        help="which held-out target to score",
    )
    e.set_defaults(handler=cmd_evaluate)

    a = sub.add_parser(
        "ablate", help="scale-subset x join-strategy grid with one report"
    )
    add_common(a)
    a.set_defaults(handler=cmd_ablate)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    keys = (
        "seed",
        "output_dir",
        "data_file",
        "synthetic_file",
        "join",
        "epochs",
        "learning_rate",
        "batch_size",
        "dim",
    )
    out = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "scales", None):
        out["scales"] = [s for s in args.scales.split(",") if s]
    return out


def _load_log(cfg: ExperimentConfig) -> PurchaseLog:
    if cfg.data.file is not None:
        return parse_purchase_log(cfg.data.file, cfg.data.schema)
    return generate_synthetic(cfg.data.synthetic).log


def _ensure_out(cfg: ExperimentConfig) -> str:
    out = cfg.resolved_output_dir()
    os.makedirs(out, exist_ok=True)
    return out


def cmd_generate(cfg: ExperimentConfig, args) -> int:
    if cfg.data.synthetic is None:
        raise ConfigError("generate needs data.synthetic in the config")
    out = _ensure_out(cfg)
    result = generate_synthetic(cfg.data.synthetic)
    events_path = os.path.join(out, "events.tsv")
    annotations_path = os.path.join(out, "annotations.tsv")
    write_purchase_log(events_path, result.log)
    write_annotations(annotations_path, result.annotations)
    print(
        f"generated {len(result.log.events)} events for "
        f"{result.log.num_users} users over {result.log.num_items} items"
    )
    print(f"wrote {events_path}")
    print(f"wrote {annotations_path}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _ensure_out(cfg)
    log = _load_log(cfg)
    if cfg.data.file is not None:
        write_id_maps(os.path.join(out, "ids"), log)
    result = train(
        log,
        cfg.train,
        cfg.join,
        out_dir=out,
        resume_from=getattr(args, "resume", None),
    )
    history_path = os.path.join(out, "loss_history.tsv")
    report.write_loss_history(history_path, result.history)
    report.plot_loss_curves(
        os.path.join(out, "loss_curves.png"),
        result.history,
        title=f"{'+'.join(s.label() for s in cfg.train.scales)} / {cfg.join}",
    )
    for h in result.history:
        line = f"epoch {h.epoch}: total={h.total:.6g} joint={h.joint:.6g}"
        if h.validation_hit5 is not None:
            line += f" val_hit@5={h.validation_hit5:.4f}"
        print(line)
    if result.skipped_users:
        print(f"skipped {result.skipped_users} users with too little history")
    print(f"best epoch: {result.best_epoch}")
    print(f"wrote {history_path}")
    print(f"checkpoint: {result.checkpoint_dir}")
    return EXIT_OK


def _default_checkpoint(out: str) -> str:
    best = os.path.join(out, "checkpoints", "best")
    if os.path.isdir(best):
        return best
    latest = os.path.join(out, "checkpoints", "latest.json")
    if os.path.exists(latest):
        with open(latest, "r", encoding="utf-8") as fh:
            name = json.load(fh)["checkpoint"]
        return os.path.join(out, "checkpoints", name)
    raise DataError(f"no checkpoint found under {out}; pass --checkpoint")


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    out = _ensure_out(cfg)
    log = _load_log(cfg)
    split = split_leave_last(log)
    ckpt = getattr(args, "checkpoint", None) or _default_checkpoint(out)
    model, manifest, _ = load_checkpoint(ckpt)
    scales = [e["label"] for e in manifest["scales"]]
    method = f"{'+'.join(scales)}/{manifest['join']['strategy']}"

    model_report = evaluate(
        model.score, split, ks=cfg.ks, target=args.target, method=method
    )
    pop_report = evaluate(
        pop_scorer(split.train), split, ks=cfg.ks, target=args.target, method="pop"
    )
    metrics_path = os.path.join(out, "metrics.tsv")
    report.write_metric_report(metrics_path, [model_report, pop_report])
    report.write_results_json(
        os.path.join(out, "results.json"),
        method,
        scales,
        manifest["join"]["strategy"],
        model_report,
        baseline=pop_report,
    )
    report.plot_metric_bars(
        os.path.join(out, "metrics.png"),
        [model_report, pop_report],
        title=f"{method} vs pop ({args.target})",
    )
    for rep in (model_report, pop_report):
        line = " ".join(f"{m}={rep.mean(m):.4f}" for m in sorted(rep.per_user))
        print(f"{rep.method}: {line}")
        if rep.skipped_users:
            print(f"  skipped users: {rep.skipped_users}")
    print(f"wrote {metrics_path}")
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    out = _ensure_out(cfg)
    log = _load_log(cfg)
    split = split_leave_last(log)
    rows = []
    reports = {}
    for scale_set in ABLATION_SCALE_SETS:
        scales = tuple(scale_set.split(","))
        for join_name in ABLATION_JOINS:
            cell_cfg = TrainConfig(
                **{**cfg.train.to_dict(), "scales": scales}
            )
            cell_dir = os.path.join(out, "cells", f"{scale_set.replace(',', '+')}_{join_name}")
            os.makedirs(cell_dir, exist_ok=True)
            result = train(log, cell_cfg, join_name, out_dir=cell_dir)
            report.write_loss_history(
                os.path.join(cell_dir, "loss_history.tsv"), result.history
            )
            rep = evaluate(
                result.model.score,
                split,
                ks=cfg.ks,
                method=f"{scale_set}/{join_name}",
            )
            reports[(scale_set, join_name)] = rep
            print(
                f"{scale_set} / {join_name}: "
                + " ".join(f"{m}={rep.mean(m):.4f}" for m in sorted(rep.per_user))
            )

    base = reports[("item", "average")]
    metric_names = sorted(base.per_user)
    for (scale_set, join_name), rep in reports.items():
        row = {"scales": scale_set, "join": join_name}
        for m in metric_names:
            row[m] = rep.mean(m)
        for m in metric_names:
            base_mean = base.mean(m)
            row[f"{m}_improvement_pct"] = (
                100.0 * (rep.mean(m) - base_mean) / base_mean if base_mean else 0.0
            )
        rows.append(row)
    rows.sort(key=lambda r: (len(r["scales"]), r["scales"], r["join"]))

    table_path = os.path.join(out, "ablation.tsv")
    report.write_ablation_table(table_path, rows)
    report.write_json(os.path.join(out, "ablation.json"), rows)
    report.plot_ablation_chart(os.path.join(out, "ablation.png"), rows)
    print(f"wrote {table_path} ({len(rows)} rows)")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "handler", None) is None:
        parser.print_help()
        return EXIT_OK
    try:
        cfg = load_config(args.config, _overrides(args))
        return args.handler(cfg, args)
    except ConfigError as exc:
        print(f"demandrec: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SyntheticError, TrainingDiverged) as exc:
        print(f"demandrec: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"demandrec: io error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
