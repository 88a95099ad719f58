"""Weighted engagement scores and per-segment quartile tiers."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable

from .ingestion import AggregatedPlanRecord, EngagementEvent, EventKind, RecordKey, Tier

MIN_TIERED_SEGMENT = 4


@dataclass(frozen=True)
class EngagementWeights:
    read: int = 1
    store_click: int = 3
    voucher_click: int = 3
    product_card_click: int = 4
    crm_button: int = 2
    unsubscribe: int = -5

    def weight(self, kind: EventKind) -> int:
        return getattr(self, kind.value)


DEFAULT_WEIGHTS = EngagementWeights()


def score_events(events: Iterable[EngagementEvent | EventKind], weights: EngagementWeights = DEFAULT_WEIGHTS) -> int:
    """Sum of behaviour weights. Events must already be windowed by the caller."""
    total = 0
    for ev in events:
        kind = ev if isinstance(ev, EventKind) else ev.event_kind
        total += weights.weight(kind)
    return total


@dataclass(frozen=True)
class TierAssignment:
    segment: str
    strong_ids: tuple[RecordKey, ...]
    weak_ids: tuple[RecordKey, ...]
    quartile_fraction: float

    def tier_of(self, key: RecordKey) -> Tier:
        if key in self.strong_ids:
            return Tier.STRONG
        if key in self.weak_ids:
            return Tier.WEAK
        return Tier.MIDDLE


def tier_size(n: int, quartile_fraction: float) -> int:
    """Records per end; capped at n // 2 so the two ends never overlap."""
    if n < MIN_TIERED_SEGMENT:
        return 0
    # round() guards against 0.1 * 30 == 3.0000000000000004
    return min(math.ceil(round(quartile_fraction * n, 9)), n // 2)


def assign_tiers(records: Iterable[AggregatedPlanRecord], quartile_fraction: float = 0.25) -> list[TierAssignment]:
    """Rank each segment by (avg_engagement desc, key asc); the head is Strong, the tail Weak.

    Segments with fewer than four records get no Strong or Weak members.
    Assignments come back ordered by segment name.
    """
    if not 0 < quartile_fraction <= 0.5:
        raise ValueError("quartile_fraction must be in (0, 0.5]")
    by_segment: dict[str, list[AggregatedPlanRecord]] = defaultdict(list)
    for rec in records:
        by_segment[rec.audience_segment].append(rec)

    out = []
    for segment in sorted(by_segment):
        ranked = sorted(by_segment[segment], key=lambda r: (-r.avg_engagement, r.key))
        m = tier_size(len(ranked), quartile_fraction)
        strong = tuple(r.key for r in ranked[:m])
        weak = tuple(r.key for r in ranked[len(ranked) - m :]) if m else ()
        out.append(TierAssignment(segment, strong, weak, quartile_fraction))
    return out


def apply_tiers(records: Iterable[AggregatedPlanRecord], assignments: Iterable[TierAssignment]) -> list[AggregatedPlanRecord]:
    strong: set[RecordKey] = set()
    weak: set[RecordKey] = set()
    for a in assignments:
        strong.update(a.strong_ids)
        weak.update(a.weak_ids)
    out = []
    for rec in records:
        tier = Tier.STRONG if rec.key in strong else Tier.WEAK if rec.key in weak else Tier.MIDDLE
        out.append(replace(rec, tier=tier))
    return out
