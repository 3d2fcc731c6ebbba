"""Report writers: delimited formats, result JSON, figure files."""
import json

import numpy as np

from demandrec.evaluation import MetricReport
from demandrec.report import (
    format_number,
    plot_ablation_chart,
    plot_loss_curves,
    plot_metric_bars,
    write_ablation_table,
    write_delimited,
    write_loss_history,
    write_metric_report,
    write_results_json,
)
from demandrec.training import EpochLoss


def history():
    return [
        EpochLoss(1, 120.5, 30.25, {"item": 60.0, "day": 30.25}, 0.4),
        EpochLoss(2, 90.0, 20.0, {"item": 50.0, "day": 20.0}, 0.55),
    ]


def reports():
    return [
        MetricReport(
            method="model",
            ks=(5,),
            per_user={"hit@5": np.array([1.0, 0.0]), "ndcg@5": np.array([1.0, 0.0])},
        ),
        MetricReport(
            method="pop",
            ks=(5,),
            per_user={"hit@5": np.array([0.0, 0.0]), "ndcg@5": np.array([0.0, 0.0])},
        ),
    ]


def test_format_number_stable():
    assert format_number(0.1) == "0.1"
    assert format_number(1.0 / 3.0) == "0.3333333333"
    assert format_number(7) == "7"


def test_write_delimited_deterministic(tmp_path):
    path = tmp_path / "table.tsv"
    write_delimited(path, ["a", "b"], [[1, 0.5], [2, 1.0 / 7.0]])
    first = path.read_bytes()
    write_delimited(path, ["a", "b"], [[1, 0.5], [2, 1.0 / 7.0]])
    assert path.read_bytes() == first
    lines = first.decode().splitlines()
    assert lines[0] == "a\tb"
    assert lines[1] == "1\t0.5"


def test_loss_history_includes_validation_column(tmp_path):
    path = tmp_path / "history.tsv"
    write_loss_history(path, history())
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch\ttotal\tjoint\tloss_day\tloss_item\tvalidation_hit5"
    assert lines[1].split("\t")[0] == "1"
    assert lines[1].split("\t")[-1] == "0.4"


def test_metric_report_and_results_json(tmp_path):
    model_rep, pop_rep = reports()
    write_metric_report(tmp_path / "metrics.tsv", [model_rep, pop_rep])
    lines = (tmp_path / "metrics.tsv").read_text().splitlines()
    assert lines[0].split("\t")[0] == "method"
    assert len(lines) == 3

    write_results_json(
        tmp_path / "results.json", "m", ["item"], "average", model_rep, pop_rep
    )
    payload = json.loads((tmp_path / "results.json").read_text())
    assert payload["metrics"]["hit@5"] == 0.5
    assert "p_values_vs_baseline" in payload
    assert payload["baseline"]["method"] == "pop"


def test_figures_written(tmp_path):
    plot_loss_curves(tmp_path / "loss.png", history())
    plot_metric_bars(tmp_path / "metrics.png", reports())
    rows = [
        {"scales": "item", "join": "average", "hit@5": 0.3, "hit@5_improvement_pct": 0.0},
        {"scales": "item,day", "join": "mlp", "hit@5": 0.4, "hit@5_improvement_pct": 33.3},
    ]
    write_ablation_table(tmp_path / "ablation.tsv", rows)
    plot_ablation_chart(tmp_path / "ablation.png", rows)
    for name in ("loss.png", "metrics.png", "ablation.png"):
        data = (tmp_path / name).read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
        assert len(data) > 1000
