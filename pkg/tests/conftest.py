from __future__ import annotations

from decimal import Decimal
from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest

from crmkit.ingestion import (
    AggregatedPlanRecord,
    EngagementEvent,
    EventKind,
    MessageTemplate,
    PlanMeta,
    RecordKey,
    Tier,
    VoucherInfo,
    VoucherKind,
    category_text,
    template_id,
    voucher_fingerprint,
)

FIXTURES = Path(__file__).parent / "fixtures"
T0 = datetime(2025, 4, 1, 12, 0, tzinfo=timezone.utc)


def fixture_text(name: str) -> str:
    return (FIXTURES / name).read_text(encoding="utf-8")


def make_plan(
    plan_id: str = "p1",
    merchant: str = "m1",
    segment: str = "New Buyers",
    title: str = "Hello",
    body: str = "Shop now",
    category: tuple[str, ...] = ("Fashion",),
    voucher: VoucherInfo | None = None,
    sent_at: datetime = T0,
) -> PlanMeta:
    return PlanMeta(plan_id, merchant, segment, MessageTemplate(title, body), category, voucher, sent_at)


def event(user: str, plan: str, kind: EventKind, hours: float = 1.0) -> EngagementEvent:
    return EngagementEvent(user, plan, kind, T0 + timedelta(hours=hours))


def make_record(
    merchant: str = "m1",
    segment: str = "New Buyers",
    avg: float = 1.0,
    title: str = "Title",
    body: str = "Body",
    category: tuple[str, ...] = ("Fashion",),
    voucher: VoucherInfo | None = None,
    tier: Tier = Tier.UNASSIGNED,
    n: int = 1,
) -> AggregatedPlanRecord:
    template = MessageTemplate(title, body)
    key = RecordKey(merchant, template_id(template), category_text(category), segment, voucher_fingerprint(voucher))
    return AggregatedPlanRecord(key, template, category, avg, n, tier)


PCT10 = VoucherInfo("10% off", VoucherKind.PERCENTAGE, Decimal(10), Decimal(50), "MYR")


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


# --- acceptance summary -------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class criterion:
    """Record pass/fail for one acceptance criterion; failures still propagate."""

    def __init__(self, number: int, title: str) -> None:
        self.number = number
        self.title = title
        self.detail = ""

    def __enter__(self) -> "criterion":
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        ok = exc_type is None
        detail = self.detail if ok else f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        ACCEPTANCE[self.number] = (self.title, ok, detail)
        print(f"criterion {self.number:>2} {'PASS' if ok else 'FAIL'}  {self.title}  {detail}")
        return False


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})")
