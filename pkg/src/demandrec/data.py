"""Purchase logs, time-scale bucketing, and leave-last-out splits."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

SECONDS_PER_DAY = 86400
PADDING_ID = 0  # id 0 reserved for padding in both user and item spaces


class DataError(ValueError):
    """Raised for malformed inputs or violated data contracts."""


class Event(NamedTuple):
    user: int
    item: int
    timestamp: int


@dataclass(frozen=True)
class TimeScale:
    """Granularity used to group a purchase history into transactions.

    kind is one of "item", "day", "week", "ngram"; ngram carries n >= 2.
    """

    kind: str
    n: int = 0

    def __post_init__(self):
        if self.kind not in ("item", "day", "week", "ngram"):
            raise DataError(f"unknown time scale kind {self.kind!r}")
        if self.kind == "ngram" and self.n < 2:
            raise DataError(f"ngram scale needs n >= 2, got {self.n}")
        if self.kind != "ngram" and self.n != 0:
            raise DataError(f"{self.kind} scale takes no n parameter")

    @property
    def window_seconds(self) -> int | None:
        if self.kind == "day":
            return SECONDS_PER_DAY
        if self.kind == "week":
            return 7 * SECONDS_PER_DAY
        return None

    def label(self) -> str:
        return f"{self.n}gram" if self.kind == "ngram" else self.kind

    @staticmethod
    def parse(text: str) -> "TimeScale":
        text = text.strip().lower()
        if text in ("item", "day", "week"):
            return TimeScale(text)
        for suffix in ("-gram", "gram"):
            if text.endswith(suffix):
                head = text[: -len(suffix)]
                if head.isdigit():
                    return TimeScale("ngram", int(head))
        raise DataError(f"cannot parse time scale {text!r}")


ITEM_SCALE = TimeScale("item")
DAY_SCALE = TimeScale("day")
WEEK_SCALE = TimeScale("week")


@dataclass(frozen=True)
class Transaction:
    """Items purchased within one window.

    ``items`` holds unique ids ordered by last occurrence inside the window
    (oldest first), so truncation to the most recent items stays well defined;
    ``counts`` keeps the collapsed repetition metadata, aligned with items.
    """

    items: tuple[int, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if not self.items:
            raise DataError("empty transaction")
        if len(self.items) != len(self.counts):
            raise DataError("items/counts length mismatch")

    @property
    def size(self) -> int:
        return len(self.items)

    def item_set(self) -> frozenset[int]:
        return frozenset(self.items)


@dataclass(frozen=True)
class TransactionSequence:
    user_id: int
    scale: TimeScale
    transactions: tuple[Transaction, ...]

    def __len__(self) -> int:
        return len(self.transactions)


@dataclass
class PurchaseLog:
    """Time-ordered purchase events over dense 1-based user/item ids."""

    events: list[Event]
    num_users: int
    num_items: int
    user_id_map: dict[int, int] = field(default_factory=dict)  # original -> dense
    item_id_map: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.events = [Event(*e) for e in self.events]
        self.events.sort(key=lambda e: (e.user, e.timestamp, e.item))
        for e in self.events:
            if not 1 <= e.user <= self.num_users:
                raise DataError(f"user id {e.user} outside [1, {self.num_users}]")
            if not 1 <= e.item <= self.num_items:
                raise DataError(f"item id {e.item} outside [1, {self.num_items}]")

    def user_events(self, user: int) -> list[Event]:
        return [e for e in self.events if e.user == user]

    def events_by_user(self) -> dict[int, list[Event]]:
        grouped: dict[int, list[Event]] = {}
        for e in self.events:
            grouped.setdefault(e.user, []).append(e)
        return grouped

    def users(self) -> list[int]:
        return sorted({e.user for e in self.events})

    def earliest_timestamp(self) -> int:
        if not self.events:
            raise DataError("empty purchase log")
        return min(e.timestamp for e in self.events)

    def default_epoch(self) -> int:
        """Earliest timestamp truncated to midnight; anchors calendar windows."""
        t = self.earliest_timestamp()
        return (t // SECONDS_PER_DAY) * SECONDS_PER_DAY

    def validate(self) -> None:
        """Check the strict contract: dense ids and >= 3 events per user."""
        grouped = self.events_by_user()
        if sorted(grouped) != list(range(1, self.num_users + 1)):
            missing = sorted(set(range(1, self.num_users + 1)) - set(grouped))
            raise DataError(f"users without events: {missing}")
        short = [u for u, evs in grouped.items() if len(evs) < 3]
        if short:
            raise DataError(f"users with fewer than 3 events: {sorted(short)}")


@dataclass(frozen=True)
class Split:
    """Per-user leave-last-out split: last event is the test target,
    penultimate the validation target, everything earlier is train.

    The target dicts map user -> item id; the event dicts keep the full
    held-out events so evaluation can rebuild correctly timestamped
    histories.
    """

    train: PurchaseLog
    validation_targets: dict[int, int]
    test_targets: dict[int, int]
    validation_events: dict[int, Event] = field(default_factory=dict)
    test_events: dict[int, Event] = field(default_factory=dict)


@dataclass(frozen=True)
class ColumnSchema:
    """Column layout of a delimited purchase-log file."""

    user: int = 0
    item: int = 1
    timestamp: int = 2
    delimiter: str = "\t"
    header: bool = True


def parse_purchase_log(source, schema: ColumnSchema = ColumnSchema()) -> PurchaseLog:
    """Parse delimited text into a normalized, densely remapped PurchaseLog.

    ``source`` is a text stream or a path.  Original ids are remapped to
    dense 1..|U| / 1..|I| in ascending original order; the reversible
    mappings ride along on the returned log (see write_id_maps).
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, "r", encoding="utf-8") as fh:
            return parse_purchase_log(fh, schema)
    if isinstance(source, str):
        return parse_purchase_log(io.StringIO(source), schema)

    needed = max(schema.user, schema.item, schema.timestamp) + 1
    raw: list[tuple[int, int, int]] = []
    for lineno, line in enumerate(source, start=1):
        if schema.header and lineno == 1:
            continue
        line = line.rstrip("\n").rstrip("\r")
        if not line:
            continue
        parts = line.split(schema.delimiter)
        if len(parts) < needed:
            raise DataError(
                f"line {lineno}: expected at least {needed} fields, got {len(parts)}"
            )
        try:
            user = int(parts[schema.user])
            item = int(parts[schema.item])
            ts = int(parts[schema.timestamp])
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from exc
        if user < 1 or item < 1:
            raise DataError(f"line {lineno}: ids must be >= 1 (0 is the padding id)")
        raw.append((user, item, ts))

    if not raw:
        raise DataError("empty purchase log input")

    user_map = {orig: i + 1 for i, orig in enumerate(sorted({r[0] for r in raw}))}
    item_map = {orig: i + 1 for i, orig in enumerate(sorted({r[1] for r in raw}))}
    events = [Event(user_map[u], item_map[i], t) for u, i, t in raw]
    return PurchaseLog(
        events=events,
        num_users=len(user_map),
        num_items=len(item_map),
        user_id_map=user_map,
        item_id_map=item_map,
    )


def write_purchase_log(path, log: PurchaseLog) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id\titem_id\ttimestamp\n")
        for e in log.events:
            fh.write(f"{e.user}\t{e.item}\t{e.timestamp}\n")


def write_id_maps(path_prefix, log: PurchaseLog) -> tuple[str, str]:
    """Persist the original->dense id maps as `original_id<TAB>dense_id` files."""
    user_path = f"{path_prefix}.user_ids.tsv"
    item_path = f"{path_prefix}.item_ids.tsv"
    for path, mapping in ((user_path, log.user_id_map), (item_path, log.item_id_map)):
        with open(path, "w", encoding="utf-8") as fh:
            for orig in sorted(mapping):
                fh.write(f"{orig}\t{mapping[orig]}\n")
    return user_path, item_path


def read_id_map(path) -> dict[int, int]:
    mapping: dict[int, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                orig, dense = line.split("\t")
                mapping[int(orig)] = int(dense)
    return mapping


def _collapse(events: Sequence[Event]) -> Transaction:
    """Collapse a window of events into a Transaction.

    Order inside the transaction follows each item's last occurrence, so the
    tail of ``items`` is always the most recently purchased.
    """
    counts: dict[int, int] = {}
    last_pos: dict[int, int] = {}
    for pos, e in enumerate(events):
        counts[e.item] = counts.get(e.item, 0) + 1
        last_pos[e.item] = pos
    ordered = sorted(counts, key=lambda i: (last_pos[i], i))
    return Transaction(
        items=tuple(ordered), counts=tuple(counts[i] for i in ordered)
    )


def bucket_by_scale(
    user_events: Sequence[Event], scale: TimeScale, epoch: int = 0
) -> TransactionSequence:
    """Group one user's time-sorted events into transactions at a scale.

    Day/Week windows are calendar-aligned at ``epoch`` (window index =
    floor((t - epoch) / window)); empty windows are dropped.  Item scale
    yields one singleton transaction per event; ngram(n) groups runs of n
    consecutive events with a possibly shorter final run.
    """
    if not user_events:
        raise DataError("bucket_by_scale: no events")
    user = user_events[0].user
    for prev, cur in zip(user_events, user_events[1:]):
        if cur.timestamp < prev.timestamp:
            raise DataError("bucket_by_scale: events not time-sorted")
        if cur.user != user:
            raise DataError("bucket_by_scale: events span multiple users")

    transactions: list[Transaction] = []
    if scale.kind == "item":
        transactions = [_collapse([e]) for e in user_events]
    elif scale.kind == "ngram":
        n = scale.n
        for start in range(0, len(user_events), n):
            transactions.append(_collapse(user_events[start : start + n]))
    else:
        window = scale.window_seconds
        assert window is not None
        current: list[Event] = []
        current_idx: int | None = None
        for e in user_events:
            idx = (e.timestamp - epoch) // window
            if current_idx is None or idx == current_idx:
                current.append(e)
                current_idx = idx
            else:
                transactions.append(_collapse(current))
                current = [e]
                current_idx = idx
        if current:
            transactions.append(_collapse(current))
    return TransactionSequence(
        user_id=user, scale=scale, transactions=tuple(transactions)
    )


def split_leave_last(log: PurchaseLog) -> Split:
    """Hold out each user's last event for test and penultimate for validation."""
    grouped = log.events_by_user()
    short = sorted(u for u, evs in grouped.items() if len(evs) < 3)
    if short:
        raise DataError(f"split requires >= 3 events per user; too few for users {short}")

    train_events: list[Event] = []
    val_targets: dict[int, int] = {}
    test_targets: dict[int, int] = {}
    val_events: dict[int, Event] = {}
    test_events: dict[int, Event] = {}
    for user in sorted(grouped):
        evs = grouped[user]
        train_events.extend(evs[:-2])
        val_targets[user] = evs[-2].item
        test_targets[user] = evs[-1].item
        val_events[user] = evs[-2]
        test_events[user] = evs[-1]
    train = PurchaseLog(
        events=train_events,
        num_users=log.num_users,
        num_items=log.num_items,
        user_id_map=dict(log.user_id_map),
        item_id_map=dict(log.item_id_map),
    )
    return Split(
        train=train,
        validation_targets=val_targets,
        test_targets=test_targets,
        validation_events=val_events,
        test_events=test_events,
    )


def write_transactions(path, sequences: Iterable[TransactionSequence]) -> None:
    """Serialize transaction sequences as text, one window per row."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id\tscale\twindow\titems\tcounts\n")
        for seq in sequences:
            for w, t in enumerate(seq.transactions):
                items = ",".join(str(i) for i in t.items)
                counts = ",".join(str(c) for c in t.counts)
                fh.write(f"{seq.user_id}\t{seq.scale.label()}\t{w}\t{items}\t{counts}\n")


def read_transactions(path) -> list[TransactionSequence]:
    rows: dict[tuple[int, str], list[Transaction]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        next(fh)  # header
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            user, scale_label, _window, items, counts = line.split("\t")
            key = (int(user), scale_label)
            rows.setdefault(key, []).append(
                Transaction(
                    items=tuple(int(i) for i in items.split(",")),
                    counts=tuple(int(c) for c in counts.split(",")),
                )
            )
    return [
        TransactionSequence(
            user_id=user, scale=TimeScale.parse(label), transactions=tuple(ts)
        )
        for (user, label), ts in sorted(rows.items())
    ]
