import math
import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import event, make_record
from crmkit.engagement import (
    DEFAULT_WEIGHTS,
    EngagementWeights,
    apply_tiers,
    assign_tiers,
    score_events,
    tier_size,
)
from crmkit.ingestion import EventKind as K
from crmkit.ingestion import Tier

kinds = st.lists(st.sampled_from(list(K)), max_size=40)


def test_default_weights():
    w = DEFAULT_WEIGHTS
    assert (w.read, w.store_click, w.voucher_click, w.product_card_click, w.crm_button, w.unsubscribe) == (1, 3, 3, 4, 2, -5)


@pytest.mark.parametrize(
    "events, expected",
    [
        ([], 0),
        ([K.READ], 1),
        ([K.READ, K.PRODUCT_CARD_CLICK, K.UNSUBSCRIBE], 0),
        ([K.STORE_CLICK, K.VOUCHER_CLICK, K.CRM_BUTTON], 8),
    ],
)
def test_score_examples(events, expected):
    assert score_events(events) == expected


def test_score_accepts_event_objects():
    assert score_events([event("u", "p", K.READ), event("u", "p", K.READ)]) == 2


@given(kinds, kinds)
def test_score_additive(a, b):
    assert score_events(a + b) == score_events(a) + score_events(b)


@given(kinds, st.tuples(*[st.integers(-10, 10)] * 6))
def test_score_custom_weights(events, ws):
    w = EngagementWeights(*ws)
    assert score_events(events, w) == sum(ws[list(K).index(k)] for k in events)


# --- tiers -------------------------------------------------------------------


def test_tier_size_examples():
    assert [tier_size(n, 0.25) for n in (1, 3, 4, 5, 8, 9)] == [0, 0, 1, 2, 2, 3]
    assert tier_size(5, 0.5) == 2  # capped so the ends cannot overlap
    assert tier_size(30, 0.1) == 3


def _seg(scores, segment="New Buyers", merchant_prefix="m"):
    return [make_record(f"{merchant_prefix}{i:02d}", segment, float(s), title=f"T{i}") for i, s in enumerate(scores)]


def test_four_records():
    recs = _seg([1, 2, 3, 4])
    (a,) = assign_tiers(recs)
    assert [r.avg_engagement for r in recs if r.key in a.strong_ids] == [4]
    assert [r.avg_engagement for r in recs if r.key in a.weak_ids] == [1]


def test_small_segment_exempt():
    (a,) = assign_tiers(_seg([1, 2, 3]))
    assert a.strong_ids == () and a.weak_ids == ()
    assert {r.tier for r in apply_tiers(_seg([1, 2, 3]), [a])} == {Tier.MIDDLE}


def test_ties_broken_by_key():
    recs = _seg([5] * 8)
    keys = sorted(r.key for r in recs)
    (a,) = assign_tiers(recs)
    assert list(a.strong_ids) == keys[:2]
    assert set(a.weak_ids) == set(keys[-2:])
    assert not set(a.strong_ids) & set(a.weak_ids)


def test_invalid_fraction():
    with pytest.raises(ValueError):
        assign_tiers([], 0)
    with pytest.raises(ValueError):
        assign_tiers([], 0.75)


def tier_oracle(records, q):
    """Sort-and-slice reference: ceil(q*n) from each end of the (score desc, key asc) order."""
    groups = {}
    for r in records:
        groups.setdefault(r.audience_segment, []).append(r)
    out = {}
    for seg, rs in groups.items():
        n = len(rs)
        ordered = sorted(rs, key=lambda r: r.key)
        ordered = sorted(ordered, key=lambda r: r.avg_engagement, reverse=True)
        m = 0 if n < 4 else min(math.ceil(round(q * n, 9)), n // 2)
        out[seg] = ([r.key for r in ordered[:m]], [r.key for r in ordered[n - m:]] if m else [])
    return out


def random_segment(rng, n, segment="New Buyers"):
    # a small value pool forces plenty of ties
    return [make_record(f"m{rng.randrange(5)}", segment, float(rng.randrange(4)), title=f"T{i}") for i in range(n)]


@pytest.mark.parametrize("seed", range(10))
def test_tiers_match_oracle(seed):
    rng = random.Random(seed)
    for _ in range(20):
        recs = random_segment(rng, rng.randint(1, 50))
        (a,) = assign_tiers(recs)
        strong, weak = tier_oracle(recs, 0.25)["New Buyers"]
        assert list(a.strong_ids) == strong and list(a.weak_ids) == weak


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 40), st.sampled_from([0.1, 0.25, 0.3, 0.5]))
def test_tier_properties(seed, n, q):
    rng = random.Random(seed)
    recs = random_segment(rng, n)
    assignments = assign_tiers(recs, q)
    assert assignments == assign_tiers(list(reversed(recs)), q)
    (a,) = assignments
    m = len(a.strong_ids)
    assert len(a.weak_ids) == m
    if n < 4:
        assert m == 0
    else:
        assert m == min(math.ceil(round(q * n, 9)), n // 2)
        assert not set(a.strong_ids) & set(a.weak_ids)
    tiers = apply_tiers(recs, assignments)
    assert all(t.tier in (Tier.STRONG, Tier.MIDDLE, Tier.WEAK) for t in tiers)
    # rank invariance under positive scaling
    scaled = [replace(r, avg_engagement=r.avg_engagement * 3.5) for r in recs]
    (b,) = assign_tiers(scaled, q)
    assert (b.strong_ids, b.weak_ids) == (a.strong_ids, a.weak_ids)


def test_segments_tiered_independently():
    recs = _seg([1, 2, 3, 4], "New Buyers") + _seg([9, 9, 9], "Repeat Buyers", "x")
    a = {t.segment: t for t in assign_tiers(recs)}
    assert list(a) == ["New Buyers", "Repeat Buyers"]
    assert len(a["New Buyers"].strong_ids) == 1 and a["Repeat Buyers"].strong_ids == ()
    assert a["New Buyers"].tier_of(recs[3].key) is Tier.STRONG
    assert a["New Buyers"].tier_of(recs[1].key) is Tier.MIDDLE
