"""Synthetic purchase logs with planted repurchase rhythms and co-purchases.

Every user follows every rule; per-user variation comes from jitter draws,
co-purchase coin flips, and noise events.  Ground-truth annotations tag each
event with the rule that produced it so recovery can be scored without
re-deriving the rules.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import SECONDS_PER_DAY, Event, PurchaseLog, TimeScale, bucket_by_scale


class SyntheticError(ValueError):
    """Invalid generator configuration or unsatisfiable horizon."""


class PeriodicRule(NamedTuple):
    item: int
    period_days: int
    jitter_days: int = 0


class CopurchaseRule(NamedTuple):
    trigger_item: int
    companion_item: int
    gap_events: int
    probability: float


@dataclass(frozen=True)
class SyntheticSpec:
    num_users: int
    num_items: int
    horizon_days: int
    periodic_rules: tuple[PeriodicRule, ...] = ()
    copurchase_rules: tuple[CopurchaseRule, ...] = ()
    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "periodic_rules", tuple(PeriodicRule(*r) for r in self.periodic_rules)
        )
        object.__setattr__(
            self,
            "copurchase_rules",
            tuple(CopurchaseRule(*r) for r in self.copurchase_rules),
        )
        if self.num_users < 1:
            raise SyntheticError(f"num_users must be >= 1, got {self.num_users}")
        if self.num_items < 1:
            raise SyntheticError(f"num_items must be >= 1, got {self.num_items}")
        if self.horizon_days < 1:
            raise SyntheticError(f"horizon_days must be >= 1, got {self.horizon_days}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise SyntheticError(f"noise_rate must lie in [0, 1], got {self.noise_rate}")
        for r in self.periodic_rules:
            if r.period_days < 1:
                raise SyntheticError(f"periodic rule {r}: period_days must be >= 1")
            if r.jitter_days < 0:
                raise SyntheticError(f"periodic rule {r}: jitter_days must be >= 0")
            self._check_item(r.item, "periodic_rules.item")
        for r in self.copurchase_rules:
            if not 0.0 <= r.probability <= 1.0:
                raise SyntheticError(f"copurchase rule {r}: probability outside [0, 1]")
            if r.gap_events < 0:
                raise SyntheticError(f"copurchase rule {r}: gap_events must be >= 0")
            if r.trigger_item == r.companion_item:
                raise SyntheticError(
                    f"copurchase rule {r}: trigger and companion must differ"
                )
            self._check_item(r.trigger_item, "copurchase_rules.trigger_item")
            self._check_item(r.companion_item, "copurchase_rules.companion_item")
        if self.noise_rate > 0.0 and not self._free_items():
            raise SyntheticError(
                "noise_rate > 0 but every item is covered by a rule; "
                "no free items to draw noise from"
            )

    def _check_item(self, item: int, where: str) -> None:
        if not 1 <= item <= self.num_items:
            raise SyntheticError(f"{where}: item {item} outside [1, {self.num_items}]")

    def rule_items(self) -> set[int]:
        items = {r.item for r in self.periodic_rules}
        for r in self.copurchase_rules:
            items.add(r.trigger_item)
            items.add(r.companion_item)
        return items

    def _free_items(self) -> list[int]:
        covered = self.rule_items()
        return [i for i in range(1, self.num_items + 1) if i not in covered]


class Annotation(NamedTuple):
    """Ground truth for one generated event."""

    user: int
    index: int  # position within the user's final event order
    item: int
    day: int
    source: str  # "periodic:<k>", "copurchase:<k>", or "noise"


@dataclass
class SyntheticResult:
    log: PurchaseLog
    annotations: list[Annotation] = field(default_factory=list)


class _Draft(NamedTuple):
    day: int
    item: int
    source: str
    shares_prev_ts: bool = False


def _periodic_days(rule: PeriodicRule, horizon: int, rng: np.random.Generator) -> list[int]:
    """Occurrence days: start at uniform{0..jitter}, step period +- jitter (>= 1)."""
    days: list[int] = []
    day = int(rng.integers(0, rule.jitter_days + 1)) if rule.jitter_days else 0
    while day < horizon:
        days.append(day)
        step = rule.period_days
        if rule.jitter_days:
            step += int(rng.integers(-rule.jitter_days, rule.jitter_days + 1))
        day += max(step, 1)
    return days


def _user_events(spec: SyntheticSpec, rng: np.random.Generator) -> list[_Draft]:
    base: list[tuple[int, int, _Draft]] = []  # (day, gen order, draft)
    order = 0
    for k, rule in enumerate(spec.periodic_rules):
        for day in _periodic_days(rule, spec.horizon_days, rng):
            base.append((day, order, _Draft(day, rule.item, f"periodic:{k}")))
            order += 1
    free = spec._free_items()
    if spec.noise_rate > 0.0:
        for day in range(spec.horizon_days):
            if rng.random() < spec.noise_rate:
                item = free[int(rng.integers(0, len(free)))]
                base.append((day, order, _Draft(day, item, "noise")))
                order += 1
    base.sort(key=lambda t: (t[0], t[1]))

    triggers: dict[int, list[tuple[int, CopurchaseRule]]] = {}
    for k, rule in enumerate(spec.copurchase_rules):
        triggers.setdefault(rule.trigger_item, []).append((k, rule))

    out: list[_Draft] = []
    pending: dict[int, list[_Draft]] = {}  # final index -> companions to insert

    def flush_pending() -> None:
        while len(out) in pending:
            queued = pending.pop(len(out))
            for comp in queued:
                day = out[-1].day if out else comp.day
                out.append(comp._replace(day=day))

    for _day, _order, draft in base:
        flush_pending()
        out.append(draft)
        for k, rule in triggers.get(draft.item, ()):
            # companions are terminal: they never trigger further rules
            if rule.probability >= 1.0 or rng.random() < rule.probability:
                idx = len(out) - 1 + max(rule.gap_events, 1)
                comp = _Draft(
                    draft.day,
                    rule.companion_item,
                    f"copurchase:{k}",
                    shares_prev_ts=rule.gap_events == 0,
                )
                pending.setdefault(idx, []).append(comp)
    while pending:
        flush_pending()
        if pending:  # remaining insertions point past the end; append in order
            nxt = min(pending)
            for comp in pending.pop(nxt):
                day = out[-1].day if out else comp.day
                out.append(comp._replace(day=day))
    return out


def _assign_timestamps(drafts: list[_Draft]) -> list[tuple[int, int]]:
    """(timestamp, draft index) per event; within-day slots keep final order."""
    stamped: list[tuple[int, int]] = []
    i = 0
    while i < len(drafts):
        j = i
        while j < len(drafts) and drafts[j].day == drafts[i].day:
            j += 1
        spacing = SECONDS_PER_DAY // (j - i)
        ts = drafts[i].day * SECONDS_PER_DAY
        for k in range(i, j):
            if not (k > i and drafts[k].shares_prev_ts):
                ts = drafts[i].day * SECONDS_PER_DAY + (k - i) * spacing
            stamped.append((ts, k))
        i = j
    return stamped


def generate_synthetic(spec: SyntheticSpec) -> SyntheticResult:
    """Generate a PurchaseLog plus per-event rule annotations.

    Deterministic for a fixed spec: one seeded stream drives all users in id
    order. Raises if any user ends up with fewer than 3 events.
    """
    rng = np.random.default_rng(spec.seed)
    events: list[Event] = []
    annotations: list[Annotation] = []
    short_users: list[int] = []
    for user in range(1, spec.num_users + 1):
        drafts = _user_events(spec, rng)
        if len(drafts) < 3:
            short_users.append(user)
            continue
        for ts, k in _assign_timestamps(drafts):
            d = drafts[k]
            events.append(Event(user, d.item, ts))
            annotations.append(Annotation(user, k, d.item, d.day, d.source))
    if short_users:
        raise SyntheticError(
            f"horizon too short: users {short_users[:10]} have fewer than 3 events"
        )
    log = PurchaseLog(events=events, num_users=spec.num_users, num_items=spec.num_items)
    return SyntheticResult(log=log, annotations=annotations)


def measure_repurchase_rate(log: PurchaseLog, scale: TimeScale) -> float:
    """Fraction of users with some item present in at least half their transactions."""
    epoch = log.default_epoch()
    grouped = log.events_by_user()
    if not grouped:
        raise SyntheticError("cannot measure repurchase rate of an empty log")
    qualified = 0
    for user in grouped:
        seq = bucket_by_scale(grouped[user], scale, epoch)
        n = len(seq.transactions)
        presence: dict[int, int] = {}
        for t in seq.transactions:
            for item in t.items:
                presence[item] = presence.get(item, 0) + 1
        if any(2 * c >= n for c in presence.values()):
            qualified += 1
    return qualified / len(grouped)


def write_annotations(path, annotations: list[Annotation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id\tevent_index\titem_id\tday\tsource\n")
        for a in annotations:
            fh.write(f"{a.user}\t{a.index}\t{a.item}\t{a.day}\t{a.source}\n")


def spec_from_dict(raw: dict) -> SyntheticSpec:
    """Build a SyntheticSpec from a config mapping, naming any bad field."""
    allowed = {
        "num_users",
        "num_items",
        "horizon_days",
        "periodic_rules",
        "copurchase_rules",
        "noise_rate",
        "seed",
    }
    unknown = set(raw) - allowed
    if unknown:
        raise SyntheticError(f"unknown synthetic spec fields: {sorted(unknown)}")
    for req in ("num_users", "num_items", "horizon_days"):
        if req not in raw:
            raise SyntheticError(f"synthetic spec missing required field {req!r}")
    try:
        periodic = tuple(PeriodicRule(*r) for r in raw.get("periodic_rules", ()))
    except TypeError as exc:
        raise SyntheticError(f"periodic_rules: {exc}") from exc
    try:
        copurchase = tuple(CopurchaseRule(*r) for r in raw.get("copurchase_rules", ()))
    except TypeError as exc:
        raise SyntheticError(f"copurchase_rules: {exc}") from exc
    return SyntheticSpec(
        num_users=int(raw["num_users"]),
        num_items=int(raw["num_items"]),
        horizon_days=int(raw["horizon_days"]),
        periodic_rules=periodic,
        copurchase_rules=copurchase,
        noise_rate=float(raw.get("noise_rate", 0.0)),
        seed=int(raw.get("seed", 0)),
    )
