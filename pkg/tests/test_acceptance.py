"""Acceptance gate: one test per criterion, one printed line per criterion.

Criterion 1 (recorded, no computation): absolute benchmark numbers from
full-scale commerce datasets are explicitly NOT reproduction targets at
desk scale; the property-based criteria below substitute.  Reference only:
a full-scale multi-scale run reports test Hit@5 = 0.1194 on its largest
grocery dataset.
"""
import json
import time

import numpy as np
import pytest

from demandrec.autodiff import Tape, grad_check
from demandrec.cli import main as cli_main
from demandrec.data import (
    Event,
    TimeScale,
    Transaction,
    bucket_by_scale,
    split_leave_last,
)
from demandrec.evaluation import evaluate, hit_at_k, ndcg_at_k, pop_scorer, rank_items
from demandrec.joining import JoinParams
from demandrec.model import ScaleModelParams, forward_sequence
from demandrec.synthetic import (
    SyntheticSpec,
    generate_synthetic,
    measure_repurchase_rate,
)
from demandrec.training import (
    LossWeights,
    TrainConfig,
    _build_samples,
    _forward_user,
    train,
)

DAY = 86400


def report_line(criterion, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    print(f"[acceptance] criterion {criterion}: {status} {detail}")


def test_criterion_1_no_paper_number_reproduction():
    """Full-scale benchmark values are reference-only, never asserted."""
    reference_full_scale_hit5 = 0.1194  # not a target at desk scale
    report_line(1, True, "absolute benchmark reproduction explicitly not attempted")
    assert reference_full_scale_hit5 is not None


def test_criterion_2_gradient_oracle_full_model():
    """Reverse-mode vs central differences on the full two-scale loss."""
    started = time.monotonic()
    spec = SyntheticSpec(
        num_users=2,
        num_items=8,
        horizon_days=12,
        periodic_rules=[(1, 2, 0), (2, 3, 0)],
        copurchase_rules=[(1, 4, 1, 1.0)],
        noise_rate=0.0,
        seed=5,
    )
    log = generate_synthetic(spec).log
    split = split_leave_last(log)
    scales = (TimeScale("item"), TimeScale("day"))
    samples, _ = _build_samples(split.train, scales, log.default_epoch())
    rng = np.random.default_rng(42)
    scale_params = [
        ScaleModelParams.initialize(s, 2, 8, dim=4, m_max=3, rng=rng) for s in scales
    ]
    join_params = JoinParams.initialize("mlp", 2, 8, rng)
    params = [t for sp in scale_params for t in sp.parameters()]
    params += join_params.parameters()
    w = LossWeights(500.0, 1.0)

    def f(tape):
        total = None
        for sample in samples:
            loss, _, _ = _forward_user(tape, sample, scale_params, join_params, w, 1.0)
            total = loss if total is None else tape.add(total, loss)
        return total

    report = grad_check(f, params, eps=1e-5, tol=1e-4)
    elapsed = time.monotonic() - started
    passed = report.passed and elapsed < 10.0
    report_line(
        2,
        passed,
        f"max_rel_error={report.max_rel_error:.2e} (tol 1e-4), "
        f"{report.coords_checked} coords, {elapsed:.1f}s (< 10s)",
    )
    assert report.passed, report
    assert elapsed < 10.0


def test_criterion_3_normalization_1000_forward_passes():
    """Per-scale prediction vectors are simplex points, 1e-9 tolerance."""
    rng = np.random.default_rng(7)
    num_items, dim, m_max = 12, 5, 3
    worst = 0.0
    for trial in range(1000):
        params = ScaleModelParams.initialize(
            TimeScale("item"), num_users=3, num_items=num_items, dim=dim,
            m_max=m_max, rng=rng,
        )
        # occasionally stress with large weights to provoke saturation
        if trial % 7 == 0:
            params.item_emb.data[1:] *= 40.0
            params.user_emb.data[1:] *= 25.0
        n_steps = int(rng.integers(1, 7))
        events = [
            Event(1, int(rng.integers(1, num_items + 1)), 100 * k)
            for k in range(n_steps)
        ]
        seq = bucket_by_scale(events, TimeScale("item"))
        probs = forward_sequence(Tape(), seq, 1, params).data
        assert np.all(probs > 0.0) and np.all(probs < 1.0)
        worst = max(worst, float(np.abs(probs.sum(axis=0) - 1.0).max()))
    passed = worst <= 1e-9
    report_line(3, passed, f"worst |sum-1| = {worst:.2e} over 1000 passes (tol 1e-9)")
    assert passed


def test_criterion_4_metric_oracles():
    """hit/ndcg equal brute-force enumeration for |I| <= 20; rank3@5 = 0.5."""
    checked = 0
    for n in range(1, 21):
        ranked = list(range(1, n + 1))  # item at rank r is r
        for rank in range(1, n + 1):
            target = rank
            for k in range(1, n + 1):
                brute_hit = int(target in ranked[:k])
                brute_ndcg = (
                    sum(
                        1.0 / np.log2(pos + 1)
                        for pos, item in enumerate(ranked[:k], start=1)
                        if item == target
                    )
                )
                assert hit_at_k(ranked, target, k) == brute_hit
                assert ndcg_at_k(ranked, target, k) == pytest.approx(brute_ndcg)
                checked += 1
    exact = ndcg_at_k([9, 8, 7, 6, 5], 7, 5)
    passed = exact == pytest.approx(0.5, abs=0.0)
    report_line(4, passed, f"{checked} (rank, k) cases; ndcg(rank 3, k 5) = {exact}")
    assert exact == 0.5


def test_criterion_5_bucketing_oracles():
    """Hand-enumerated 10-event fixture + invariants on 100 random logs."""
    ts = lambda day, hour: day * DAY + hour * 3600
    events = [
        Event(1, 4, ts(0, 8)),
        Event(1, 2, ts(0, 9)),
        Event(1, 4, ts(0, 10)),
        Event(1, 7, ts(1, 12)),
        Event(1, 1, ts(3, 6)),
        Event(1, 3, ts(6, 23)),
        Event(1, 9, ts(7, 0)),
        Event(1, 2, ts(9, 11)),
        Event(1, 5, ts(13, 10)),
        Event(1, 9, ts(13, 22)),
    ]

    item = bucket_by_scale(events, TimeScale("item"), 0)
    assert [t.items for t in item.transactions] == [
        (4,), (2,), (4,), (7,), (1,), (3,), (9,), (2,), (5,), (9,)
    ]

    day = bucket_by_scale(events, TimeScale("day"), 0)
    assert [(t.items, t.counts) for t in day.transactions] == [
        ((2, 4), (1, 2)),
        ((7,), (1,)),
        ((1,), (1,)),
        ((3,), (1,)),
        ((9,), (1,)),
        ((2,), (1,)),
        ((5, 9), (1, 1)),
    ]

    week = bucket_by_scale(events, TimeScale("week"), 0)
    assert [(t.items, t.counts) for t in week.transactions] == [
        ((2, 4, 7, 1, 3), (1, 2, 1, 1, 1)),
        ((2, 5, 9), (1, 1, 2)),
    ]

    two_gram = bucket_by_scale(events, TimeScale("ngram", 2), 0)
    assert [t.items for t in two_gram.transactions] == [
        (4, 2), (4, 7), (1, 3), (9, 2), (5, 9)
    ]

    # invariants on 100 random logs
    from collections import Counter

    rng = np.random.default_rng(1234)
    for _ in range(100):
        n = int(rng.integers(3, 30))
        stamps = np.sort(rng.integers(0, 20 * DAY, size=n))
        rand_events = [
            Event(1, int(rng.integers(1, 10)), int(t)) for t in stamps
        ]
        lengths = {}
        for scale in (TimeScale("item"), TimeScale("day"), TimeScale("week")):
            seq = bucket_by_scale(rand_events, scale, 0)
            got = Counter()
            for t in seq.transactions:
                for i, c in zip(t.items, t.counts):
                    got[i] += c
            assert got == Counter(e.item for e in rand_events)  # conservation
            lengths[scale.kind] = len(seq.transactions)
        assert lengths["week"] <= lengths["day"] <= lengths["item"]
    report_line(5, True, "hand fixtures exact; conservation + coarsening on 100 logs")


def test_criterion_6_overfit_smoke():
    """5 users, |I| = 12: loss under 10% of initial within 200 epochs, < 60s."""
    started = time.monotonic()
    spec = SyntheticSpec(
        num_users=5,
        num_items=12,
        horizon_days=30,
        periodic_rules=[(1, 5, 0), (2, 7, 0)],
        noise_rate=0.0,
        seed=11,
    )
    log = generate_synthetic(spec).log
    cfg = TrainConfig(
        scales=("item", "day"),
        dim=16,
        epochs=200,
        learning_rate=0.02,
        batch_size=5,
        seed=3,
    )
    result = train(log, cfg, "mlp")
    losses = [h.total for h in result.history]
    ratio = losses[-1] / losses[0]
    elapsed = time.monotonic() - started
    passed = ratio < 0.10 and elapsed < 60.0
    report_line(
        6,
        passed,
        f"loss {losses[0]:.0f} -> {losses[-1]:.0f} (ratio {ratio:.3f} < 0.10), "
        f"{elapsed:.0f}s (< 60s)",
    )
    assert ratio < 0.10
    assert elapsed < 60.0


# ----- criterion 7: synthetic demand recovery -----

RECOVERY_SPEC = SyntheticSpec(
    num_users=200,
    num_items=50,
    horizon_days=120,
    periodic_rules=tuple((i, 7, 1) for i in range(1, 7)),
    copurchase_rules=((1, 7, 2, 0.9), (2, 8, 3, 0.9)),
    noise_rate=0.15,
    seed=2024,
)
RECOVERY_SEEDS = (1, 2, 3)
RECOVERY_EPOCHS = 3


def _recovery_config(scales, seed):
    return TrainConfig(
        scales=scales,
        dim=16,
        epochs=RECOVERY_EPOCHS,
        learning_rate=0.01,
        batch_size=20,
        pos_weight=500.0,
        neg_weight=1.0,
        seed=seed,
        select="validation",
    )


@pytest.fixture(scope="module")
def recovery_runs():
    started = time.monotonic()
    log = generate_synthetic(RECOVERY_SPEC).log
    split = split_leave_last(log)
    pop_hit5 = evaluate(pop_scorer(split.train), split, ks=(5,), method="pop").mean(
        "hit@5"
    )
    variants = {
        "multi_mlp": (("item", "day", "week"), "mlp"),
        "multi_average": (("item", "day", "week"), "average"),
        "multi_max": (("item", "day", "week"), "max"),
        "multi_weighted": (("item", "day", "week"), "weighted"),
        "item_only": (("item",), "average"),
    }
    hit5 = {name: [] for name in variants}
    for seed in RECOVERY_SEEDS:
        for name, (scales, join) in variants.items():
            result = train(log, _recovery_config(scales, seed), join)
            rep = evaluate(result.model.score, split, ks=(5,), method=name)
            hit5[name].append(rep.mean("hit@5"))
    means = {name: float(np.mean(v)) for name, v in hit5.items()}
    elapsed = time.monotonic() - started
    return {"means": means, "per_seed": hit5, "pop": pop_hit5, "elapsed": elapsed}


def test_criterion_7a_multi_scale_beats_single_and_pop(recovery_runs):
    means = recovery_runs["means"]
    pop = recovery_runs["pop"]
    passed = means["multi_mlp"] > means["item_only"] and means["multi_mlp"] > pop
    report_line(
        "7a",
        passed,
        f"multi+mlp={means['multi_mlp']:.4f} > item={means['item_only']:.4f} "
        f"and > pop={pop:.4f} (3-seed means)",
    )
    assert means["multi_mlp"] > means["item_only"]
    assert means["multi_mlp"] > pop


def test_criterion_7b_mlp_within_slack_of_other_joins(recovery_runs):
    means = recovery_runs["means"]
    mlp = means["multi_mlp"]
    others = {k: means[k] for k in ("multi_average", "multi_max", "multi_weighted")}
    passed = all(mlp >= v - 0.01 for v in others.values())
    report_line(
        "7b",
        passed,
        f"mlp={mlp:.4f} vs "
        + " ".join(f"{k.split('_')[1]}={v:.4f}" for k, v in others.items())
        + " (slack 0.01)",
    )
    for name, value in others.items():
        assert mlp >= value - 0.01, (name, value, mlp)


def test_criterion_7_runtime_budget(recovery_runs):
    elapsed = recovery_runs["elapsed"]
    passed = elapsed < 900.0
    report_line("7 runtime", passed, f"{elapsed:.0f}s (< 900s)")
    assert elapsed < 900.0


def test_criterion_8_repurchase_instrument():
    """Rate 1.0 on pure periodic; strictly decreasing over noise levels."""
    rates = []
    for noise in (0.0, 0.3, 0.6):
        spec = SyntheticSpec(
            num_users=150,
            num_items=12,
            horizon_days=120,
            periodic_rules=[(1, 4, 0)],
            noise_rate=noise,
            seed=13,
        )
        log = generate_synthetic(spec).log
        rates.append(measure_repurchase_rate(log, TimeScale("day")))
    passed = rates[0] == 1.0 and rates[0] > rates[1] > rates[2]
    report_line(
        8, passed, "rates at noise {0, 0.3, 0.6} = " + str([round(r, 3) for r in rates])
    )
    assert rates[0] == 1.0
    assert rates[0] > rates[1] > rates[2]


def test_criterion_9_cli_determinism(tmp_path):
    """cmd_train twice with one seed: bitwise-identical loss histories."""
    spec = {
        "num_users": 6,
        "num_items": 10,
        "horizon_days": 24,
        "periodic_rules": [[1, 4, 0], [2, 6, 1]],
        "copurchase_rules": [[1, 3, 1, 0.9]],
        "noise_rate": 0.2,
        "seed": 3,
    }
    histories = []
    for run in ("a", "b"):
        cfg = {
            "seed": 21,
            "output_dir": str(tmp_path / run),
            "data": {"synthetic": spec},
            "scales": ["item", "day"],
            "join": "mlp",
            "train": {
                "dim": 6,
                "epochs": 3,
                "learning_rate": 0.01,
                "batch_size": 3,
                "pos_weight": 10.0,
            },
        }
        path = tmp_path / f"{run}.json"
        path.write_text(json.dumps(cfg))
        assert cli_main(["train", "--config", str(path)]) == 0
        histories.append((tmp_path / run / "loss_history.tsv").read_bytes())
    passed = histories[0] == histories[1]
    report_line(9, passed, f"{len(histories[0])} bytes, bitwise equal")
    assert histories[0] == histories[1]
