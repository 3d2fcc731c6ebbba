"""Delimited report files and the matplotlib figures rendered beside them."""
from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import MetricReport
from .training import EpochLoss

FIG_DPI = 120
PNG_METADATA = {"Software": "demandrec"}


def format_number(x) -> str:
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def write_delimited(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(format_number(x) for x in row) + "\n")


def write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _save(fig, path) -> None:
    fig.savefig(path, dpi=FIG_DPI, metadata=PNG_METADATA)
    plt.close(fig)


# ----- loss history -----


def write_loss_history(path, history: list[EpochLoss]) -> None:
    if not history:
        return
    labels = sorted(history[0].per_scale)
    header = ["epoch", "total", "joint"] + [f"loss_{l}" for l in labels]
    if any(h.validation_hit5 is not None for h in history):
        header.append("validation_hit5")
    rows = []
    for h in history:
        row = [h.epoch, h.total, h.joint] + [h.per_scale[l] for l in labels]
        if "validation_hit5" in header:
            row.append(h.validation_hit5 if h.validation_hit5 is not None else "")
        rows.append(row)
    write_delimited(path, header, rows)


def plot_loss_curves(path, history: list[EpochLoss], title: str = "training loss") -> None:
    if not history:
        return
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(epochs, [h.total for h in history], marker="o", label="total")
    ax.plot(epochs, [h.joint for h in history], marker="s", label="joint")
    for label in sorted(history[0].per_scale):
        ax.plot(
            epochs,
            [h.per_scale[label] for h in history],
            marker=".",
            linestyle="--",
            label=f"scale:{label}",
        )
    ax.set_xlabel("epoch")
    ax.set_ylabel("summed weighted cross-entropy")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


# ----- metric reports -----


def write_metric_report(path, reports: list[MetricReport]) -> None:
    metrics = sorted(reports[0].per_user) if reports else []
    header = ["method"] + metrics + ["users", "skipped"]
    rows = [
        [r.method]
        + [r.mean(m) for m in metrics]
        + [len(next(iter(r.per_user.values()))) if r.per_user else 0, r.skipped_users]
        for r in reports
    ]
    write_delimited(path, header, rows)


def write_results_json(
    path,
    method: str,
    scales: list[str],
    join: str,
    report: MetricReport,
    baseline: MetricReport | None = None,
) -> None:
    payload = {
        "method": method,
        "scales": scales,
        "join": join,
        "metrics": report.means(),
        "skipped_users": report.skipped_users,
    }
    if baseline is not None:
        payload["baseline"] = {
            "method": baseline.method,
            "metrics": baseline.means(),
        }
        payload["p_values_vs_baseline"] = {
            metric: {"t": t, "p": p} for metric, (t, p) in report.compare(baseline).items()
        }
    write_json(path, payload)


def plot_metric_bars(path, reports: list[MetricReport], title: str = "ranking metrics") -> None:
    if not reports:
        return
    metrics = sorted(reports[0].per_user)
    x = np.arange(len(metrics))
    width = 0.8 / max(len(reports), 1)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for i, rep in enumerate(reports):
        ax.bar(
            x + i * width,
            [rep.mean(m) for m in metrics],
            width,
            label=rep.method,
        )
    ax.set_xticks(x + width * (len(reports) - 1) / 2)
    ax.set_xticklabels(metrics, fontsize=8)
    ax.set_ylabel("mean over users")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


# ----- ablation -----


def write_ablation_table(path, rows: list[dict]) -> None:
    metrics = [k for k in rows[0] if k not in ("scales", "join")] if rows else []
    header = ["scales", "join"] + metrics
    write_delimited(
        path, header, [[r["scales"], r["join"]] + [r[m] for m in metrics] for r in rows]
    )


def plot_ablation_chart(path, rows: list[dict], metric: str = "hit@5") -> None:
    """Grouped bars of the improvement over the single-scale base run."""
    if not rows:
        return
    scale_sets = sorted({r["scales"] for r in rows}, key=lambda s: (len(s), s))
    joins = sorted({r["join"] for r in rows})
    key = f"{metric}_improvement_pct"
    x = np.arange(len(scale_sets))
    width = 0.8 / len(joins)
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    for i, join in enumerate(joins):
        values = []
        for scales in scale_sets:
            match = [r for r in rows if r["scales"] == scales and r["join"] == join]
            values.append(match[0][key] if match else 0.0)
        ax.bar(x + i * width, values, width, label=join)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(x + width * (len(joins) - 1) / 2)
    ax.set_xticklabels(scale_sets, fontsize=8)
    ax.set_ylabel(f"{metric} increase vs base (%)")
    ax.set_title("scale-set and join-function comparison")
    ax.legend(fontsize=8, title="join")
    fig.tight_layout()
    _save(fig, path)
