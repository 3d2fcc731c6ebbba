"""Ranking, Hit@k / NDCG@k, the popularity baseline, and report comparison.

With one relevant item per user, NDCG needs no ideal-DCG normalization
(IDCG = 1); the discount uses log base 2.  Already-purchased items are never
filtered from the candidate ranking, because repeated purchase is exactly
the pattern under study.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .data import Event, PurchaseLog, Split


def rank_items(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k item ids by descending score; ties break by ascending item id."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError(f"scores must be 1-D, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n = scores.shape[0]
    if k > n:
        warnings.warn(f"k={k} exceeds the item count {n}; clamping", stacklevel=2)
        k = n
    ids = np.arange(1, n + 1)
    order = np.lexsort((ids, -scores))
    return ids[order][:k]


def hit_at_k(ranked: Sequence[int], target: int, k: int | None = None) -> int:
    """1 iff the target item appears in the first k ranked items."""
    prefix = ranked if k is None else ranked[:k]
    return int(target in set(int(i) for i in prefix))


def ndcg_at_k(ranked: Sequence[int], target: int, k: int | None = None) -> float:
    """1 / log2(rank + 1) when the target ranks within the top k, else 0."""
    prefix = ranked if k is None else ranked[:k]
    for pos, item in enumerate(prefix, start=1):
        if int(item) == target:
            return 1.0 / np.log2(pos + 1)
    return 0.0


def pop_baseline(train: PurchaseLog) -> np.ndarray:
    """Global purchase counts as scores; identical ranking for every user."""
    if not train.events:
        raise ValueError("cannot build a popularity baseline from an empty log")
    counts = np.zeros(train.num_items)
    for e in train.events:
        counts[e.item - 1] += 1.0
    return counts


def pop_scorer(train: PurchaseLog) -> Callable:
    counts = pop_baseline(train)

    def score(user_id: int, events: Sequence[Event]) -> np.ndarray:
        return counts

    return score


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test; returns (t statistic, p value)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired test needs two equal-length 1-D samples")
    if a.size < 2:
        raise ValueError("paired test needs at least 2 pairs")
    diff = a - b
    sd = diff.std(ddof=1)
    if sd == 0.0:
        return 0.0, 1.0
    t = diff.mean() / (sd / np.sqrt(diff.size))
    p = 2.0 * stats.t.sf(abs(t), df=diff.size - 1)
    return float(t), float(p)


@dataclass
class MetricReport:
    method: str
    ks: tuple[int, ...]
    per_user: dict[str, np.ndarray] = field(default_factory=dict)
    skipped_users: int = 0

    def mean(self, metric: str) -> float:
        return float(self.per_user[metric].mean())

    def means(self) -> dict[str, float]:
        return {m: self.mean(m) for m in self.per_user}

    def compare(self, other: "MetricReport") -> dict[str, tuple[float, float]]:
        """Per-metric paired two-sided t-test against another report."""
        out: dict[str, tuple[float, float]] = {}
        for metric in self.per_user:
            if metric in other.per_user:
                out[metric] = paired_t_test(self.per_user[metric], other.per_user[metric])
        return out


def evaluate(
    score_fn: Callable,
    split: Split,
    ks: Sequence[int] = (5, 10),
    target: str = "test",
    method: str = "model",
) -> MetricReport:
    """Score every user's held-out target and average Hit@k / NDCG@k.

    ``score_fn(user_id, history_events)`` returns an (|I|,) score vector or
    None to skip the user.  Test targets see train + validation history;
    validation targets see train history only.
    """
    if target not in ("test", "validation"):
        raise ValueError(f"target must be 'test' or 'validation', got {target!r}")
    targets = split.test_targets if target == "test" else split.validation_targets
    grouped = split.train.events_by_user()
    max_k = max(ks)

    values: dict[str, list[float]] = {}
    for k in ks:
        values[f"hit@{k}"] = []
        values[f"ndcg@{k}"] = []
    users_scored: list[int] = []
    skipped = 0
    for user in sorted(targets):
        history = list(grouped.get(user, []))
        if target == "test" and user in split.validation_events:
            history.append(split.validation_events[user])
        if not history:
            skipped += 1
            continue
        scores = score_fn(user, history)
        if scores is None:
            skipped += 1
            continue
        ranked = rank_items(scores, max_k)
        for k in ks:
            values[f"hit@{k}"].append(hit_at_k(ranked, targets[user], k))
            values[f"ndcg@{k}"].append(ndcg_at_k(ranked, targets[user], k))
        users_scored.append(user)

    return MetricReport(
        method=method,
        ks=tuple(ks),
        per_user={m: np.asarray(v, dtype=np.float64) for m, v in values.items()},
        skipped_users=skipped,
    )
