"""Generator determinism, planted-pattern contracts, and the repurchase meter."""
import numpy as np
import pytest

from demandrec.data import TimeScale
from demandrec.synthetic import (
    SyntheticError,
    SyntheticSpec,
    generate_synthetic,
    measure_repurchase_rate,
    spec_from_dict,
)

DAY = 86400


def days_of(log, user, item=None):
    return [
        e.timestamp // DAY
        for e in log.user_events(user)
        if item is None or e.item == item
    ]


class TestGenerate:
    def test_deterministic_periodicity(self):
        spec = SyntheticSpec(
            num_users=3,
            num_items=5,
            horizon_days=28,
            periodic_rules=[(1, 7, 0)],
            seed=0,
        )
        log = generate_synthetic(spec).log
        for user in (1, 2, 3):
            assert days_of(log, user) == [0, 7, 14, 21]
            assert all(e.item == 1 for e in log.user_events(user))

    def test_copurchase_prob_one_follows_next_event(self):
        spec = SyntheticSpec(
            num_users=4,
            num_items=6,
            horizon_days=35,
            periodic_rules=[(2, 7, 1), (5, 3, 1)],
            copurchase_rules=[(2, 3, 1, 1.0)],
            noise_rate=0.2,
            seed=9,
        )
        log = generate_synthetic(spec).log
        for user in range(1, 5):
            events = log.user_events(user)
            items = [e.item for e in events]
            for pos, item in enumerate(items):
                if item == 2:
                    assert pos + 1 < len(items) and items[pos + 1] == 3, (
                        f"user {user}: trigger at {pos} not followed by companion"
                    )

    def test_same_seed_byte_identical(self):
        spec = SyntheticSpec(
            num_users=5,
            num_items=10,
            horizon_days=40,
            periodic_rules=[(1, 5, 2), (2, 9, 1)],
            copurchase_rules=[(1, 3, 2, 0.5)],
            noise_rate=0.4,
            seed=42,
        )
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        assert a.log.events == b.log.events
        assert a.annotations == b.annotations

    def test_horizon_too_short_errors(self):
        spec = SyntheticSpec(
            num_users=2, num_items=4, horizon_days=10, periodic_rules=[(1, 8, 0)], seed=1
        )
        with pytest.raises(SyntheticError, match="horizon too short"):
            generate_synthetic(spec)

    def test_zero_jitter_interval_exactly_period(self):
        spec = SyntheticSpec(
            num_users=2,
            num_items=4,
            horizon_days=50,
            periodic_rules=[(1, 6, 0), (2, 11, 0)],
            seed=3,
        )
        log = generate_synthetic(spec).log
        for user in (1, 2):
            for item, period in ((1, 6), (2, 11)):
                days = days_of(log, user, item)
                assert all(b - a == period for a, b in zip(days, days[1:]))

    def test_annotations_tag_sources(self):
        spec = SyntheticSpec(
            num_users=1,
            num_items=8,
            horizon_days=21,
            periodic_rules=[(1, 7, 0)],
            copurchase_rules=[(1, 2, 1, 1.0)],
            noise_rate=0.5,
            seed=5,
        )
        res = generate_synthetic(spec)
        sources = {a.source for a in res.annotations}
        assert "periodic:0" in sources and "copurchase:0" in sources
        assert any(s == "noise" for s in sources)
        by_index = sorted(res.annotations, key=lambda a: a.index)
        assert [a.index for a in by_index] == list(range(len(by_index)))
        # annotated order matches the event order in the log
        items_by_index = [a.item for a in by_index]
        assert items_by_index == [e.item for e in res.log.user_events(1)]

    def test_gap_zero_shares_timestamp(self):
        spec = SyntheticSpec(
            num_users=1,
            num_items=4,
            horizon_days=15,
            periodic_rules=[(1, 5, 0)],
            copurchase_rules=[(1, 2, 0, 1.0)],
            seed=2,
        )
        log = generate_synthetic(spec).log
        events = log.user_events(1)
        stamps = {}
        for e in events:
            stamps.setdefault(e.timestamp, set()).add(e.item)
        assert all(v == {1, 2} for v in stamps.values())


class TestSpecValidation:
    def test_bad_probability(self):
        with pytest.raises(SyntheticError, match="probability"):
            SyntheticSpec(
                num_users=1,
                num_items=4,
                horizon_days=10,
                copurchase_rules=[(1, 2, 1, 1.5)],
            )

    def test_bad_period(self):
        with pytest.raises(SyntheticError, match="period"):
            SyntheticSpec(
                num_users=1, num_items=4, horizon_days=10, periodic_rules=[(1, 0, 0)]
            )

    def test_noise_needs_free_items(self):
        with pytest.raises(SyntheticError, match="free items"):
            SyntheticSpec(
                num_users=1,
                num_items=1,
                horizon_days=10,
                periodic_rules=[(1, 2, 0)],
                noise_rate=0.5,
            )

    def test_self_companion_rejected(self):
        with pytest.raises(SyntheticError, match="differ"):
            SyntheticSpec(
                num_users=1,
                num_items=4,
                horizon_days=10,
                copurchase_rules=[(2, 2, 1, 0.5)],
            )

    def test_spec_from_dict_names_unknown_field(self):
        with pytest.raises(SyntheticError, match="bogus"):
            spec_from_dict(
                {"num_users": 1, "num_items": 2, "horizon_days": 3, "bogus": 1}
            )

    def test_spec_from_dict_missing_field(self):
        with pytest.raises(SyntheticError, match="num_items"):
            spec_from_dict({"num_users": 1, "horizon_days": 3})


class TestRepurchaseRate:
    def test_saturated_user_rate_one(self):
        spec = SyntheticSpec(
            num_users=4, num_items=6, horizon_days=30, periodic_rules=[(1, 1, 0)], seed=0
        )
        log = generate_synthetic(spec).log
        assert measure_repurchase_rate(log, TimeScale("day")) == 1.0

    def test_two_users_one_qualifying(self):
        from demandrec.data import Event, PurchaseLog

        rows = [Event(1, 1, d * DAY) for d in range(4)]  # item 1 every day
        rows += [Event(2, i, d * DAY) for d, i in enumerate((1, 2, 3, 4))]  # all distinct
        log = PurchaseLog(events=rows, num_users=2, num_items=4)
        assert measure_repurchase_rate(log, TimeScale("day")) == 0.5

    def test_pure_periodic_zero_noise_is_one(self):
        spec = SyntheticSpec(
            num_users=10,
            num_items=12,
            horizon_days=60,
            periodic_rules=[(3, 4, 0)],
            noise_rate=0.0,
            seed=8,
        )
        log = generate_synthetic(spec).log
        assert measure_repurchase_rate(log, TimeScale("day")) == 1.0

    def test_rate_decreases_with_noise(self):
        rates = []
        for noise in (0.0, 0.3, 0.6):
            spec = SyntheticSpec(
                num_users=60,
                num_items=12,
                horizon_days=120,
                periodic_rules=[(1, 4, 0)],
                noise_rate=noise,
                seed=13,
            )
            log = generate_synthetic(spec).log
            rates.append(measure_repurchase_rate(log, TimeScale("day")))
        assert rates[0] > rates[1] > rates[2]
