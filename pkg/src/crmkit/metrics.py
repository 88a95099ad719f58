"""chrF and BERTScore kernels, segment tables, and the template error taxonomy."""

from __future__ import annotations

import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .agents import ParseError, PromptBundle, PromptKind, render
from .ingestion import MessageTemplate
from .kernels import char_ngram_stats


class MetricUndefined(ValueError):
    pass


# --- chrF --------------------------------------------------------------------


@dataclass(frozen=True)
class ChrfParams:
    char_order: int = 6
    word_order: int = 0
    beta: float = 2.0

    def __post_init__(self) -> None:
        if self.char_order < 1:
            raise ValueError("char_order must be >= 1")
        if self.word_order < 0:
            raise ValueError("word_order must be >= 0")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")


DEFAULT_CHRF = ChrfParams()


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


def _word_ngram_stats(ref: list[str], hyp: list[str], order: int) -> list[tuple[int, int, int]]:
    stats = []
    for n in range(1, order + 1):
        rc = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
        hc = Counter(tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1))
        matches = sum(min(c, rc[g]) for g, c in hc.items())
        stats.append((matches, max(len(hyp) - n + 1, 0), max(len(ref) - n + 1, 0)))
    return stats


def chrf_score(reference: str, hypothesis: str, params: ChrfParams = DEFAULT_CHRF) -> float:
    """Sentence chrF on a 0-100 scale.

    Precision and recall are each averaged over the n-gram orders that have a
    non-zero total on their side, then combined as an F-beta score.
    """
    ref = normalize_whitespace(reference)
    hyp = normalize_whitespace(hypothesis)
    if not ref and not hyp:
        return 100.0
    if not ref or not hyp:
        return 0.0
    stats = char_ngram_stats(ref, hyp, params.char_order)
    if params.word_order:
        stats = stats + _word_ngram_stats(ref.split(" "), hyp.split(" "), params.word_order)
    precisions = [m / h for m, h, _ in stats if h > 0]
    recalls = [m / r for m, _, r in stats if r > 0]
    p = sum(precisions) / len(precisions)
    r = sum(recalls) / len(recalls)
    if p == 0.0 and r == 0.0:
        return 0.0
    b2 = params.beta**2
    return 100.0 * (1 + b2) * p * r / (b2 * p + r)


# --- BERTScore ---------------------------------------------------------------


def tokenize(text: str) -> list[str]:
    return re.findall(r"\w+|[^\w\s]", text.lower())


def bertscore_f1(
    reference_tokens: Sequence[str],
    hypothesis_tokens: Sequence[str],
    token_embedder: Callable[[str], np.ndarray],
) -> float:
    """Greedy max-cosine matching F1 without idf weighting or rescaling."""
    if not reference_tokens or not hypothesis_tokens:
        raise MetricUndefined("BERTScore needs non-empty token lists")
    ref = np.stack([np.asarray(token_embedder(t), dtype=np.float64) for t in reference_tokens])
    hyp = np.stack([np.asarray(token_embedder(t), dtype=np.float64) for t in hypothesis_tokens])
    return bertscore_from_embeddings(ref, hyp)


def bertscore_from_embeddings(ref: np.ndarray, hyp: np.ndarray) -> float:
    sim = ref @ hyp.T
    recall = float(sim.max(axis=1).mean())
    precision = float(sim.max(axis=0).mean())
    if precision + recall == 0.0:
        return 0.0
    f1 = 2 * precision * recall / (precision + recall)
    return min(1.0, max(-1.0, f1))


# --- score tables ------------------------------------------------------------


def delta_pct(ori_mean: float, gen_mean: float) -> float:
    """Relative change in percent; round with :func:`round_half_up` only when reporting."""
    if ori_mean == 0:
        raise MetricUndefined("relative change from a zero mean")
    return 100.0 * (gen_mean - ori_mean) / ori_mean


def round_half_up(value: float, places: int = 2) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ScoredRow:
    """The per-message numbers the segment tables need, in original/generated terms."""

    segment: str
    audience_ori: int
    audience_gen: int
    market_ori: int
    market_gen: int
    generated_preferred: bool
    bertscore_f1: float
    chrf: float


@dataclass(frozen=True)
class SegmentReport:
    segment: str
    count: int
    audience_ori: float
    audience_gen: float
    market_ori: float
    market_gen: float
    gen_preferred_count: float
    bertscore_f1_mean: float
    chrf_mean: float

    @property
    def audience_delta_pct(self) -> float:
        return delta_pct(self.audience_ori, self.audience_gen)

    @property
    def market_delta_pct(self) -> float:
        return delta_pct(self.market_ori, self.market_gen)

    @property
    def preferred(self) -> str:
        """``Gen`` when the generated side wins at least half; ties report Gen at 50%."""
        return "Gen" if 2 * self.gen_preferred_count >= self.count else "Ori"

    @property
    def preference_rate_pct(self) -> float:
        if self.count == 0:
            return 0.0
        winners = self.gen_preferred_count if self.preferred == "Gen" else self.count - self.gen_preferred_count
        return 100.0 * winners / self.count

    @classmethod
    def from_table_row(
        cls,
        segment: str,
        count: int,
        audience: tuple[float, float],
        market: tuple[float, float],
        preferred: str,
        rate_pct: float,
        bertscore_f1: float = math.nan,
        chrf: float = math.nan,
    ) -> SegmentReport:
        """Rebuild a report from printed table cells (means, preferred side, rate)."""
        gen_share = rate_pct if preferred == "Gen" else 100.0 - rate_pct
        return cls(segment, count, audience[0], audience[1], market[0], market[1],
                   gen_share * count / 100.0, bertscore_f1, chrf)


OVERALL = "Overall"


def combine_segments(reports: Sequence[SegmentReport], name: str = OVERALL) -> SegmentReport:
    """Count-weighted means and pooled preference over segment rows."""
    total = sum(r.count for r in reports)
    if total == 0:
        return SegmentReport(name, 0, math.nan, math.nan, math.nan, math.nan, 0.0, math.nan, math.nan)

    def wmean(attr: str) -> float:
        return sum(getattr(r, attr) * r.count for r in reports) / total

    return SegmentReport(
        name,
        total,
        wmean("audience_ori"),
        wmean("audience_gen"),
        wmean("market_ori"),
        wmean("market_gen"),
        sum(r.gen_preferred_count for r in reports),
        wmean("bertscore_f1_mean"),
        wmean("chrf_mean"),
    )


def aggregate_segment_table(rows: Iterable[ScoredRow]) -> list[SegmentReport]:
    """Per-segment means (largest segment first, then by name) followed by the Overall row."""
    groups: dict[str, list[ScoredRow]] = defaultdict(list)
    for row in rows:
        groups[row.segment].append(row)
    if not groups:
        return []
    reports = []
    for segment, items in groups.items():
        n = len(items)
        reports.append(
            SegmentReport(
                segment,
                n,
                math.fsum(r.audience_ori for r in items) / n,
                math.fsum(r.audience_gen for r in items) / n,
                math.fsum(r.market_ori for r in items) / n,
                math.fsum(r.market_gen for r in items) / n,
                float(sum(1 for r in items if r.generated_preferred)),
                math.fsum(r.bertscore_f1 for r in items) / n,
                math.fsum(r.chrf for r in items) / n,
            )
        )
    reports.sort(key=lambda r: (-r.count, r.segment))
    return reports + [combine_segments(reports)]


def _fmt(value: float) -> str:
    if isinstance(value, float) and math.isnan(value):
        return "n/a"
    return f"{round_half_up(value, 2):.2f}"


def _fmt_delta(ori: float, gen: float) -> str:
    try:
        return _fmt(delta_pct(ori, gen))
    except MetricUndefined:
        return "n/a"


SEGMENT_TABLE_COLUMNS = (
    "Audience Segment",
    "Count",
    "Audience Score Ori",
    "Audience Score Gen",
    "Audience Score Δ (%)",
    "Market Score Ori",
    "Market Score Gen",
    "Market Score Δ (%)",
    "Preference Preferred",
    "Preference Rate (%)",
)

SIMILARITY_TABLE_COLUMNS = ("Audience Segment", "BERTScore-F1", "chrF")

CONFIG_TABLE_COLUMNS = (
    "Content",
    "Template",
    "Evaluate",
    "Audience Score Ori",
    "Audience Score Gen",
    "Audience Score Δ (%)",
    "Market Score Ori",
    "Market Score Gen",
    "Market Score Δ (%)",
    "Preference Preferred",
    "Preference Rate (%)",
)

ERROR_TABLE_COLUMNS = ("Error Type", "Count", "Percentage (%)")


def _score_cells(r: SegmentReport) -> list[str]:
    return [
        _fmt(r.audience_ori),
        _fmt(r.audience_gen),
        _fmt_delta(r.audience_ori, r.audience_gen),
        _fmt(r.market_ori),
        _fmt(r.market_gen),
        _fmt_delta(r.market_ori, r.market_gen),
        r.preferred,
        _fmt(r.preference_rate_pct),
    ]


def segment_table_rows(reports: Sequence[SegmentReport]) -> list[list[str]]:
    return [[r.segment, str(r.count), *_score_cells(r)] for r in reports]


def similarity_table_rows(reports: Sequence[SegmentReport]) -> list[list[str]]:
    return [[r.segment, _fmt(r.bertscore_f1_mean), _fmt(r.chrf_mean)] for r in reports]


def config_table_rows(models: tuple[str, str, str], reports: Sequence[SegmentReport]) -> list[list[str]]:
    overall = [r for r in reports if r.segment == OVERALL]
    if not overall:
        return []
    return [[*models, *_score_cells(overall[0])]]


# --- error taxonomy ----------------------------------------------------------


class ErrorType(Enum):
    AUDIENCE_ASSUMPTION_ERROR = "Audience Assumption Error"
    WEAK_CALL_TO_ACTION = "Weak Call-to-Action"
    VAGUE_INCENTIVE = "Vague Incentive"
    MISALIGNED_TONE = "Misaligned Tone"
    IRRELEVANT_OFFER = "Irrelevant Offer"


def _label_key(text: str) -> str:
    return re.sub(r"[^a-z]", "", text.lower())


_LABELS = {_label_key(e.value): e for e in ErrorType}
_LABELS.update({_label_key(e.name): e for e in ErrorType})
_LABELS[_label_key("Audience Assumption")] = ErrorType.AUDIENCE_ASSUMPTION_ERROR

_ERROR_LINE = re.compile(
    r"^[ \t*\-#]*(?:error\s+type|identified\s+error(?:\(s\)|s)?|label)\s*[:：][ \t]*(.+)$",
    re.IGNORECASE | re.MULTILINE,
)
_FEEDBACK_LINE = re.compile(r"^[ \t*\-#]*feedback\s*[:：][ \t]*", re.IGNORECASE | re.MULTILINE)


def parse_error_label(text: str) -> ErrorType:
    key = _label_key(text)
    if key in _LABELS:
        return _LABELS[key]
    raise ParseError("Error Type", f"unknown label {text.strip()!r}")


def parse_error_response(raw: str) -> tuple[ErrorType, str]:
    """Read ``Error Type:`` (or ``Identified Error(s):``) and ``Feedback:``.

    When several labels are listed the first is the primary one.
    """
    text = raw.replace("**", "")
    m = _ERROR_LINE.search(text)
    if m is None:
        raise ParseError("Error Type")
    first = re.split(r"[,;/]|\band\b", m.group(1))[0]
    label = parse_error_label(first.strip().strip("."))
    f = _FEEDBACK_LINE.search(text)
    feedback = " ".join(text[f.end() :].split()) if f else ""
    return label, feedback


def build_error_prompt(
    template: MessageTemplate,
    segment: str,
    voucher: str | None = None,
    product: str | None = None,
) -> PromptBundle:
    flat = " ".join(f"{template.title} {template.body}".split())
    return render(
        PromptKind.ERROR_REVIEW,
        {
            "template": flat,
            "audience": segment,
            "voucher": voucher or "not applicable",
            "product": product or "not applicable",
        },
    )


def classify_error_type(
    template: MessageTemplate,
    segment: str,
    voucher: str | None,
    product: str | None,
    provider: Callable[[PromptBundle], str],
) -> tuple[ErrorType, str]:
    """Ask the model for exactly one error type. ``provider`` maps a prompt to response text."""
    if not (template.title.strip() or template.body.strip()):
        raise ValueError("template is empty")
    return parse_error_response(provider(build_error_prompt(template, segment, voucher, product)))


def error_distribution(labels: Iterable[ErrorType]) -> dict[ErrorType, int]:
    counts = {e: 0 for e in ErrorType}
    for label in labels:
        counts[label] += 1
    return counts


def error_distribution_rows(counts: Mapping[ErrorType, int]) -> list[tuple[str, int, float]]:
    """(label, count, percent) sorted by count desc, ties in enum order."""
    total = sum(counts.values())
    order = {e: i for i, e in enumerate(ErrorType)}
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], order[kv[0]]))
    return [(e.value, c, 100.0 * c / total if total else 0.0) for e, c in ranked]


def error_mode(counts: Mapping[ErrorType, int]) -> ErrorType | None:
    rows = error_distribution_rows(counts)
    if not rows or rows[0][1] == 0:
        return None
    return ErrorType(rows[0][0])
