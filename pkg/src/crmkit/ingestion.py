"""Engagement-log parsing, per-plan aggregation, and synthetic corpora."""

from __future__ import annotations

import hashlib
import json
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from decimal import Decimal, InvalidOperation
from enum import Enum
from typing import Iterable, Iterator, Mapping, NamedTuple, TextIO

SEGMENTS: tuple[str, ...] = (
    "Potential New Customers",
    "New Buyers",
    "Lapsing Buyers",
    "Abandoned Cart Buyers",
    "Unpaid Order Buyers",
    "Post-Purchase Group",
    "Price-Drop Group",
    "Active Old Followers",
    "Frequent Buyers",
    "New Followers",
    "Repeat Buyers",
)

# Plan counts per segment from the evaluation table; used as the default synthetic mix.
DEFAULT_SEGMENT_MIX: dict[str, float] = dict(
    zip(SEGMENTS, (701, 681, 515, 493, 439, 352, 267, 186, 140, 125, 58))
)

HEADER_KEY = "_header"


class EventKind(Enum):
    READ = "read"
    STORE_CLICK = "store_click"
    VOUCHER_CLICK = "voucher_click"
    PRODUCT_CARD_CLICK = "product_card_click"
    CRM_BUTTON = "crm_button"
    UNSUBSCRIBE = "unsubscribe"


class VoucherKind(Enum):
    PERCENTAGE = "percentage"
    FIXED_AMOUNT = "fixed_amount"
    FREE_SHIPPING = "free_shipping"
    NONE = "none"


class Tier(Enum):
    STRONG = "strong"
    MIDDLE = "middle"
    WEAK = "weak"
    UNASSIGNED = "unassigned"


def parse_timestamp(value: str) -> datetime:
    """Parse ISO-8601; naive timestamps are taken as UTC."""
    if not isinstance(value, str):
        raise ValueError(f"timestamp must be a string, got {type(value).__name__}")
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    ts = ts.astimezone(timezone.utc)
    fmt = "%Y-%m-%dT%H:%M:%S.%fZ" if ts.microsecond else "%Y-%m-%dT%H:%M:%SZ"
    return ts.strftime(fmt)


def _decimal(value: object, name: str) -> Decimal:
    if isinstance(value, bool) or not isinstance(value, (int, float, str, Decimal)):
        raise ValueError(f"{name} must be numeric")
    try:
        d = Decimal(str(value))
    except InvalidOperation as exc:
        raise ValueError(f"{name} is not a number: {value!r}") from exc
    if not d.is_finite():
        raise ValueError(f"{name} must be finite")
    return d


def format_decimal(d: Decimal) -> str:
    """Shortest plain rendering: 20 for 20.0, 0.5 for 0.50."""
    text = format(d.normalize(), "f")
    return "0" if text in ("-0", "") else text


def _json_number(d: Decimal) -> int | float:
    return int(d) if d == d.to_integral_value() else float(d)


@dataclass(frozen=True)
class MessageTemplate:
    title: str
    body: str

    def is_complete(self) -> bool:
        return bool(self.title.strip()) and bool(self.body.strip())

    def as_text(self) -> str:
        """Title, blank line, body."""
        return f"{self.title}\n\n{self.body}"


@dataclass(frozen=True)
class VoucherInfo:
    voucher_title: str
    voucher_kind: VoucherKind
    value: Decimal = Decimal(0)
    min_spend: Decimal | None = None
    currency: str | None = None

    def __post_init__(self) -> None:
        if self.value < 0:
            raise ValueError("voucher value must be non-negative")
        if self.min_spend is not None and self.min_spend < 0:
            raise ValueError("min_spend must be non-negative")
        if self.voucher_kind is VoucherKind.PERCENTAGE and not (0 < self.value <= 100):
            raise ValueError("percentage voucher value must be in (0, 100]")
        if self.voucher_kind is VoucherKind.NONE and self.value != 0:
            raise ValueError("voucher_kind none requires value 0")

    @classmethod
    def from_json(cls, obj: Mapping[str, object]) -> VoucherInfo:
        if not isinstance(obj, Mapping):
            raise ValueError("voucher must be an object or null")
        try:
            kind = VoucherKind(obj.get("voucher_kind"))
        except ValueError:
            raise ValueError(f"unknown voucher_kind {obj.get('voucher_kind')!r}") from None
        min_spend = obj.get("min_spend")
        currency = obj.get("currency")
        if currency is not None and not isinstance(currency, str):
            raise ValueError("currency must be a string or null")
        return cls(
            voucher_title=str(obj.get("voucher_title") or ""),
            voucher_kind=kind,
            value=_decimal(obj.get("value", 0), "value"),
            min_spend=None if min_spend is None else _decimal(min_spend, "min_spend"),
            currency=currency,
        )

    def to_json(self) -> dict[str, object]:
        return {
            "voucher_title": self.voucher_title,
            "voucher_kind": self.voucher_kind.value,
            "value": _json_number(self.value),
            "min_spend": None if self.min_spend is None else _json_number(self.min_spend),
            "currency": self.currency,
        }


@dataclass(frozen=True)
class EngagementEvent:
    user_id: str
    plan_id: str
    event_kind: EventKind
    occurred_at: datetime

    def to_json(self) -> dict[str, object]:
        return {
            "user_id": self.user_id,
            "plan_id": self.plan_id,
            "event_type": self.event_kind.value,
            "ts": format_timestamp(self.occurred_at),
        }


@dataclass(frozen=True)
class PlanMeta:
    plan_id: str
    merchant_id: str
    audience_segment: str
    template: MessageTemplate
    category_path: tuple[str, ...]
    voucher: VoucherInfo | None
    sent_at: datetime

    def __post_init__(self) -> None:
        if self.audience_segment not in SEGMENTS:
            raise ValueError(f"unknown audience_segment {self.audience_segment!r}")
        if any(not c for c in self.category_path):
            raise ValueError("category_path contains an empty element")

    def to_json(self) -> dict[str, object]:
        return {
            "plan_id": self.plan_id,
            "merchant_id": self.merchant_id,
            "audience_segment": self.audience_segment,
            "template_title": self.template.title,
            "template_body": self.template.body,
            "category_path": list(self.category_path),
            "voucher": None if self.voucher is None else self.voucher.to_json(),
            "sent_at": format_timestamp(self.sent_at),
        }


class RecordKey(NamedTuple):
    """Aggregation key; tuple order is the tie-break order used everywhere."""

    merchant_id: str
    template_id: str
    category: str
    audience_segment: str
    voucher_fingerprint: str

    def as_str(self) -> str:
        return json.dumps(list(self), ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_str(cls, text: str) -> RecordKey:
        return cls(*json.loads(text))


@dataclass(frozen=True)
class AggregatedPlanRecord:
    key: RecordKey
    template: MessageTemplate
    category_path: tuple[str, ...]
    avg_engagement: float
    sample_count: int
    tier: Tier = Tier.UNASSIGNED

    @property
    def merchant_id(self) -> str:
        return self.key.merchant_id

    @property
    def audience_segment(self) -> str:
        return self.key.audience_segment

    @property
    def voucher_fingerprint(self) -> str:
        return self.key.voucher_fingerprint

    @property
    def has_voucher(self) -> bool:
        fp = self.key.voucher_fingerprint
        return fp != NO_VOUCHER and not fp.startswith("voucher_kind: none ")

    def to_json(self) -> dict[str, object]:
        return {
            "merchant_id": self.key.merchant_id,
            "template_id": self.key.template_id,
            "category_path": list(self.category_path),
            "audience_segment": self.key.audience_segment,
            "voucher_fingerprint": self.key.voucher_fingerprint,
            "template_title": self.template.title,
            "template_body": self.template.body,
            "avg_engagement": self.avg_engagement,
            "sample_count": self.sample_count,
            "tier": self.tier.value,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, object]) -> AggregatedPlanRecord:
        category_path = tuple(obj["category_path"])  # type: ignore[arg-type]
        return cls(
            key=RecordKey(
                str(obj["merchant_id"]),
                str(obj["template_id"]),
                category_text(category_path),
                str(obj["audience_segment"]),
                str(obj["voucher_fingerprint"]),
            ),
            template=MessageTemplate(str(obj["template_title"]), str(obj["template_body"])),
            category_path=category_path,
            avg_engagement=float(obj["avg_engagement"]),  # type: ignore[arg-type]
            sample_count=int(obj["sample_count"]),  # type: ignore[call-overload]
            tier=Tier(obj.get("tier", "unassigned")),
        )


NO_VOUCHER = "none"


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("|", "\\|").replace(">", "\\>")


def category_text(category_path: Iterable[str]) -> str:
    # a component literally named "none" must not collide with the empty path
    parts = ["\\none" if c == "none" else _escape(c) for c in category_path]
    return " > ".join(parts) if parts else "none"


def voucher_text(voucher: VoucherInfo | None) -> str:
    if voucher is None:
        return "voucher_kind: none | voucher_value: 0 | min_spend: 0"
    min_spend = "none" if voucher.min_spend is None else format_decimal(voucher.min_spend)
    return (
        f"voucher_kind: {voucher.voucher_kind.value}"
        f" | voucher_value: {format_decimal(voucher.value)}"
        f" | min_spend: {min_spend}"
    )


def voucher_fingerprint(voucher: VoucherInfo | None) -> str:
    return NO_VOUCHER if voucher is None else voucher_text(voucher)


def template_id(template: MessageTemplate) -> str:
    digest = hashlib.sha1(template.as_text().encode("utf-8")).hexdigest()
    return f"t{digest[:12]}"


def record_key(plan: PlanMeta) -> RecordKey:
    return RecordKey(
        plan.merchant_id,
        template_id(plan.template),
        category_text(plan.category_path),
        plan.audience_segment,
        voucher_fingerprint(plan.voucher),
    )


# --- parsing -----------------------------------------------------------------


@dataclass(frozen=True)
class Rejection:
    stream: str
    line_no: int
    reason: str

    def to_json(self) -> dict[str, object]:
        return {"stream": self.stream, "line": self.line_no, "reason": self.reason}


class ParsedLogs(NamedTuple):
    events: list[EngagementEvent]
    plans: list[PlanMeta]
    rejections: list[Rejection]


def _json_lines(stream: Iterable[str], name: str, rejections: list[Rejection]) -> Iterator[tuple[int, dict]]:
    for line_no, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            rejections.append(Rejection(name, line_no, f"malformed json: {exc.msg}"))
            continue
        if not isinstance(obj, dict):
            rejections.append(Rejection(name, line_no, "record is not an object"))
            continue
        if HEADER_KEY in obj:
            continue
        yield line_no, obj


def _require_str(obj: Mapping[str, object], name: str) -> str:
    value = obj.get(name)
    if not isinstance(value, str) or not value:
        raise ValueError(f"missing field {name}")
    return value


def parse_event(obj: Mapping[str, object]) -> EngagementEvent:
    user_id = _require_str(obj, "user_id")
    plan_id = _require_str(obj, "plan_id")
    try:
        kind = EventKind(obj.get("event_type"))
    except ValueError:
        raise ValueError("unknown event_kind") from None
    try:
        ts = parse_timestamp(obj.get("ts"))  # type: ignore[arg-type]
    except (TypeError, ValueError):
        raise ValueError("invalid timestamp") from None
    return EngagementEvent(user_id, plan_id, kind, ts)


def parse_plan(obj: Mapping[str, object]) -> PlanMeta:
    segment = obj.get("audience_segment")
    if segment not in SEGMENTS:
        raise ValueError("unknown audience_segment")
    title, body = obj.get("template_title", ""), obj.get("template_body", "")
    if not isinstance(title, str) or not isinstance(body, str):
        raise ValueError("template_title and template_body must be strings")
    categories = obj.get("category_path") or []
    if not isinstance(categories, list) or not all(isinstance(c, str) for c in categories):
        raise ValueError("category_path must be an array of strings")
    voucher = obj.get("voucher")
    try:
        sent_at = parse_timestamp(obj.get("sent_at"))  # type: ignore[arg-type]
    except (TypeError, ValueError):
        raise ValueError("invalid sent_at") from None
    return PlanMeta(
        plan_id=_require_str(obj, "plan_id"),
        merchant_id=_require_str(obj, "merchant_id"),
        audience_segment=segment,  # type: ignore[arg-type]
        template=MessageTemplate(title, body),
        category_path=tuple(categories),
        voucher=None if voucher is None else VoucherInfo.from_json(voucher),  # type: ignore[arg-type]
        sent_at=sent_at,
    )


def parse_logs(events_stream: Iterable[str], plans_stream: Iterable[str]) -> ParsedLogs:
    """Parse line-delimited events and plans, collecting bad lines instead of failing."""
    rejections: list[Rejection] = []
    events: list[EngagementEvent] = []
    for line_no, obj in _json_lines(events_stream, "events", rejections):
        try:
            events.append(parse_event(obj))
        except ValueError as exc:
            rejections.append(Rejection("events", line_no, str(exc)))
    plans: list[PlanMeta] = []
    for line_no, obj in _json_lines(plans_stream, "plans", rejections):
        try:
            plans.append(parse_plan(obj))
        except ValueError as exc:
            rejections.append(Rejection("plans", line_no, str(exc)))
    return ParsedLogs(events, plans, rejections)


def write_jsonl(stream: TextIO, rows: Iterable[Mapping[str, object]], header: Mapping[str, object] | None = None) -> None:
    if header is not None:
        stream.write(json.dumps({HEADER_KEY: dict(header)}, ensure_ascii=False, sort_keys=True) + "\n")
    for row in rows:
        stream.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_jsonl(stream: Iterable[str]) -> list[dict]:
    rows = []
    for line in stream:
        if not line.strip():
            continue
        obj = json.loads(line)
        if HEADER_KEY not in obj:
            rows.append(obj)
    return rows


# --- aggregation -------------------------------------------------------------


def aggregate_plans(
    events: Iterable[EngagementEvent],
    plans: Iterable[PlanMeta],
    window_days: int = 7,
    weights: object | None = None,
) -> list[AggregatedPlanRecord]:
    """Group plans by key and average per-user windowed engagement.

    Recipients of a plan are the users with at least one event on it; events
    outside ``[sent_at, sent_at + window_days]`` contribute nothing but still
    make the user count. Events for unknown plans are dropped (see
    :func:`count_dangling`).
    """
    from .engagement import DEFAULT_WEIGHTS, score_events

    if window_days < 1:
        raise ValueError("window_days must be >= 1")
    weights = weights or DEFAULT_WEIGHTS
    window = timedelta(days=window_days)
    plan_by_id = {p.plan_id: p for p in plans}

    windowed: dict[tuple[RecordKey, str], list[EngagementEvent]] = defaultdict(list)
    for ev in events:
        plan = plan_by_id.get(ev.plan_id)
        if plan is None:
            continue
        bucket = windowed[(record_key(plan), ev.user_id)]
        if plan.sent_at <= ev.occurred_at <= plan.sent_at + window:
            bucket.append(ev)

    first_plan: dict[RecordKey, PlanMeta] = {}
    for plan in sorted(plan_by_id.values(), key=lambda p: p.plan_id):
        first_plan.setdefault(record_key(plan), plan)

    totals: dict[RecordKey, list[int]] = defaultdict(lambda: [0, 0])
    for (key, _user), evs in windowed.items():
        acc = totals[key]
        acc[0] += score_events(evs, weights)  # type: ignore[arg-type]
        acc[1] += 1

    records = []
    for key in sorted(totals):
        total, count = totals[key]
        plan = first_plan[key]
        records.append(
            AggregatedPlanRecord(
                key=key,
                template=plan.template,
                category_path=plan.category_path,
                avg_engagement=total / count,
                sample_count=count,
            )
        )
    return records


def count_dangling(events: Iterable[EngagementEvent], plans: Iterable[PlanMeta]) -> int:
    known = {p.plan_id for p in plans}
    return sum(1 for ev in events if ev.plan_id not in known)


# --- synthetic corpus --------------------------------------------------------

_CATEGORIES = (
    ("Beauty & Personal Care", "Skincare"),
    ("Beauty & Personal Care", "Makeup"),
    ("Fashion Accessories", "Bags"),
    ("Fashion Accessories", "Jewellery"),
    ("Home & Living", "Kitchenware"),
    ("Electronics", "Mobile Accessories"),
    ("Health", "Supplements"),
    ("Groceries", "Snacks"),
    ("Mom & Baby", "Diapers"),
    ("Sports & Outdoors",),
)

_TITLES = (
    "Check out our bestsellers!",
    "Everyone's loving these!",
    "Did you forget something?",
    "New arrivals just landed",
    "A little something for you",
    "You followed - now treat yourself!",
    "Your favourites are back",
    "Price drop alert",
    "Thanks for shopping with us",
    "Don't miss this",
    "Hello again",
    "Special deals inside",
)

_OPENERS = (
    "It's been a while since we last saw you, we really missed you.",
    "Shoppers love these best-sellers.",
    "Looks like you left something in your cart.",
    "As a thank you for following, here's a special offer for your first order.",
    "Our latest collection is here.",
    "We picked a few items we think you'll like.",
    "Prices just dropped on items you viewed.",
    "Your order is waiting for payment.",
)

_CLOSERS = (
    "Shop now!",
    "Take a look.",
    "Ready to pick up where you left off?",
    "Grab yours before they're gone today!",
    "Visit our store.",
    "Don't miss out.",
    "",
)

_EVENT_PROFILE = (
    (EventKind.READ, 0.55),
    (EventKind.STORE_CLICK, 0.12),
    (EventKind.VOUCHER_CLICK, 0.1),
    (EventKind.PRODUCT_CARD_CLICK, 0.12),
    (EventKind.CRM_BUTTON, 0.08),
    (EventKind.UNSUBSCRIBE, 0.03),
)


@dataclass
class SyntheticCorpus:
    events: list[EngagementEvent] = field(default_factory=list)
    plans: list[PlanMeta] = field(default_factory=list)

    def __iter__(self):
        return iter((self.events, self.plans))


def _synthetic_voucher(rng: random.Random) -> VoucherInfo:
    kind = rng.choice((VoucherKind.PERCENTAGE, VoucherKind.FIXED_AMOUNT, VoucherKind.FREE_SHIPPING))
    if kind is VoucherKind.PERCENTAGE:
        value = Decimal(rng.choice((5, 10, 15, 20, 25, 30)))
        title = f"{value}% off"
    elif kind is VoucherKind.FIXED_AMOUNT:
        value = Decimal(rng.choice((2, 3, 5, 10)))
        title = f"RM{value} off"
    else:
        value = Decimal(0)
        title = "Free shipping"
    min_spend = rng.choice((None, Decimal(15), Decimal(30), Decimal(50)))
    return VoucherInfo(title, kind, value, min_spend, "MYR")


def gen_synthetic_corpus(
    seed: int,
    n_merchants: int = 50,
    n_plans: int = 2000,
    segment_mix: Mapping[str, float] | None = None,
    missing_metadata_fraction: float = 0.15,
) -> SyntheticCorpus:
    """Deterministic synthetic engagement corpus with a right-skewed score distribution."""
    if n_plans < 1:
        raise ValueError("n_plans must be >= 1")
    if n_merchants < 1:
        raise ValueError("n_merchants must be >= 1")
    mix = dict(DEFAULT_SEGMENT_MIX if segment_mix is None else segment_mix)
    unknown = set(mix) - set(SEGMENTS)
    if unknown:
        raise ValueError(f"unknown segments in mix: {sorted(unknown)}")
    if any(w < 0 for w in mix.values()) or not any(w > 0 for w in mix.values()):
        raise ValueError("segment weights must be non-negative and not all zero")
    if not 0 <= missing_metadata_fraction <= 1:
        raise ValueError("missing_metadata_fraction must be in [0, 1]")

    rng = random.Random(seed)
    segments = [s for s in SEGMENTS if mix.get(s, 0) > 0]
    seg_weights = [mix[s] for s in segments]
    merchants = [f"m{i:04d}" for i in range(n_merchants)]
    merchant_skill = {m: rng.lognormvariate(0.0, 0.5) for m in merchants}
    base = datetime(2025, 4, 1, tzinfo=timezone.utc)
    weights = [w for _, w in _EVENT_PROFILE]
    kinds = [k for k, _ in _EVENT_PROFILE]

    corpus = SyntheticCorpus()
    for i in range(n_plans):
        merchant = rng.choice(merchants)
        segment = rng.choices(segments, seg_weights)[0]
        template = MessageTemplate(
            rng.choice(_TITLES),
            " ".join(p for p in (rng.choice(_OPENERS), rng.choice(_CLOSERS)) if p),
        )
        if rng.random() < missing_metadata_fraction:
            category: tuple[str, ...] = ()
            voucher = None
        else:
            has_cat = rng.random() < 0.75
            has_voucher = rng.random() < 0.7 or not has_cat
            category = rng.choice(_CATEGORIES) if has_cat else ()
            voucher = _synthetic_voucher(rng) if has_voucher else None
        sent_at = base + timedelta(minutes=rng.randrange(0, 29 * 24 * 60))
        plan = PlanMeta(f"p{i:06d}", merchant, segment, template, category, voucher, sent_at)
        corpus.plans.append(plan)

        # Heavy right tail: most plans draw few events, a few draw many.
        quality = merchant_skill[merchant] * rng.lognormvariate(-0.6, 0.9)
        for u in range(rng.randint(2, 8)):
            user = f"u{rng.randrange(10**6):06d}"
            n_events = min(int(rng.expovariate(1.0 / quality)), 12)
            for _ in range(n_events):
                kind = rng.choices(kinds, weights)[0]
                # ~1 in 10 events lands after the 7-day window.
                offset = timedelta(minutes=rng.randrange(0, 8 * 24 * 60 + 1152))
                corpus.events.append(EngagementEvent(user, plan.plan_id, kind, sent_at + offset))
            if n_events == 0 and rng.random() < 0.5:
                corpus.events.append(
                    EngagementEvent(user, plan.plan_id, EventKind.READ, sent_at + timedelta(days=9))
                )
    return corpus


def plan_scores(records: Iterable[AggregatedPlanRecord]) -> list[float]:
    return [r.avg_engagement for r in records]


def fraction_below_mean(values: list[float]) -> float:
    if not values:
        return math.nan
    mean = sum(values) / len(values)
    return sum(1 for v in values if v < mean) / len(values)


def with_tier(record: AggregatedPlanRecord, tier: Tier) -> AggregatedPlanRecord:
    return replace(record, tier=tier)
