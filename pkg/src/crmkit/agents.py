"""Prompt rendering for the four agents and parsers for their responses."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Mapping, Sequence

from .ingestion import MessageTemplate

SCALE = (1, 3, 5)


class PromptKind(Enum):
    CONTENT_DIAGNOSIS = "content_diagnosis"
    EXEMPLAR_REWRITE = "exemplar_rewrite"
    RULE_REWRITE = "rule_rewrite"
    SCORING = "scoring"
    COMPARISON = "comparison"
    ERROR_REVIEW = "error_review"


class PromptError(ValueError):
    """Raised when a prompt cannot be built from the given inputs."""


class ResponseError(ValueError):
    """Base class for model responses that do not fit the expected shape."""


class ParseError(ResponseError):
    def __init__(self, field_name: str, detail: str = "") -> None:
        self.field = field_name
        super().__init__(f"could not parse {field_name}" + (f": {detail}" if detail else ""))


class ScaleError(ResponseError):
    def __init__(self, value: int, field_name: str = "") -> None:
        self.value = value
        self.field = field_name
        super().__init__(f"score {value} not in {{1, 3, 5}}" + (f" ({field_name})" if field_name else ""))


class EmptyRewriteError(ResponseError):
    pass


@dataclass(frozen=True)
class PromptBundle:
    prompt_kind: PromptKind
    rendered_text: str
    placeholders_filled: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class ExemplarLine:
    """One row of the diagnosis prompt: template, category path, voucher."""

    template: MessageTemplate
    category: str = "none"
    voucher: str = "none"


@dataclass(frozen=True)
class DiagnosisReport:
    audience_segment: str
    success_patterns: str
    failure_reasons: str


@dataclass(frozen=True)
class ScorePair:
    audience_score_a: int
    market_score_a: int
    audience_score_b: int
    market_score_b: int
    audience_reason_a: str
    market_reason_a: str
    audience_reason_b: str
    market_reason_b: str

    def __post_init__(self) -> None:
        for name in ("audience_score_a", "market_score_a", "audience_score_b", "market_score_b"):
            value = getattr(self, name)
            if value not in SCALE:
                raise ScaleError(value, name)

    @property
    def scores(self) -> tuple[int, int, int, int]:
        return (self.audience_score_a, self.market_score_a, self.audience_score_b, self.market_score_b)


@dataclass(frozen=True)
class PreferenceDecision:
    preferred: str
    reason: str = ""

    def __post_init__(self) -> None:
        if self.preferred not in ("A", "B"):
            raise ParseError("Preferred Message", f"label {self.preferred!r}")


# --- rendering ---------------------------------------------------------------

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


@lru_cache(maxsize=None)
def load_skeleton(kind: PromptKind, prompt_set: str = "default") -> str:
    """Skeleton text for ``kind``; sets other than ``default`` fall back per file."""
    root = resources.files("crmkit") / "prompts"
    for name in (prompt_set, "default"):
        res = root / name / f"{kind.value}.txt"
        if res.is_file():
            return res.read_text(encoding="utf-8")
    raise PromptError(f"no skeleton for {kind.value}")


def skeleton_placeholders(kind: PromptKind, prompt_set: str = "default") -> list[str]:
    return _PLACEHOLDER.findall(load_skeleton(kind, prompt_set))


def render(kind: PromptKind, values: Mapping[str, str], prompt_set: str = "default") -> PromptBundle:
    """Fill ``{name}`` slots in one pass, so braces inside values stay literal."""
    skeleton = load_skeleton(kind, prompt_set)
    missing = [n for n in _PLACEHOLDER.findall(skeleton) if n not in values]
    if missing:
        raise PromptError(f"unfilled placeholders for {kind.value}: {missing}")
    text = _PLACEHOLDER.sub(lambda m: values[m.group(1)], skeleton)
    used = {n: values[n] for n in _PLACEHOLDER.findall(skeleton)}
    return PromptBundle(kind, text, used)


def message_text(template: MessageTemplate) -> str:
    return template.as_text()


def escape_cell(text: str) -> str:
    flat = " ".join(text.split())
    return flat.replace("\\", "\\\\").replace("|", "\\|")


def exemplar_row(line: ExemplarLine) -> str:
    cell = f"Title: {line.template.title} Body: {line.template.body}"
    return " | ".join(escape_cell(c) for c in (cell, line.category, line.voucher))


def build_content_prompt(
    segment: str,
    strong: Sequence[ExemplarLine],
    weak: Sequence[ExemplarLine],
    prompt_set: str = "default",
) -> PromptBundle:
    if not strong or not weak:
        raise PromptError("content diagnosis needs at least one high- and one low-performing template")
    return render(
        PromptKind.CONTENT_DIAGNOSIS,
        {
            "audience": segment,
            "high_performing": "\n".join(exemplar_row(x) for x in strong),
            "low_performing": "\n".join(exemplar_row(x) for x in weak),
        },
        prompt_set,
    )


def build_rewrite_prompt(
    original: MessageTemplate,
    weakness: str,
    exemplars: Sequence[MessageTemplate],
    success_summary: str,
    prompt_set: str = "default",
) -> PromptBundle:
    if not exemplars:
        raise PromptError("exemplar rewrite needs at least one exemplar")
    if not weakness.strip() or not success_summary.strip():
        raise PromptError("weakness and success summary must be non-empty")
    return render(
        PromptKind.EXEMPLAR_REWRITE,
        {
            "poor_template": message_text(original),
            "poor_reason": weakness.strip(),
            "good_templates": "\n\n".join(message_text(t) for t in exemplars),
            "good_reason": success_summary.strip(),
        },
        prompt_set,
    )


def build_rule_prompt(original: MessageTemplate, prompt_set: str = "default") -> PromptBundle:
    if not (original.title.strip() or original.body.strip()):
        raise PromptError("original message is empty")
    return render(PromptKind.RULE_REWRITE, {"original": message_text(original)}, prompt_set)


def _judge_prompt(kind: PromptKind, segment: str, a: MessageTemplate, b: MessageTemplate, prompt_set: str) -> PromptBundle:
    for slot, msg in (("A", a), ("B", b)):
        if not (msg.title.strip() or msg.body.strip()):
            raise PromptError(f"message {slot} is empty")
    return render(
        kind,
        {"audience_group": segment, "message_a": message_text(a), "message_b": message_text(b)},
        prompt_set,
    )


def build_scoring_prompt(segment: str, message_a: MessageTemplate, message_b: MessageTemplate, prompt_set: str = "default") -> PromptBundle:
    return _judge_prompt(PromptKind.SCORING, segment, message_a, message_b, prompt_set)


def build_comparison_prompt(segment: str, message_a: MessageTemplate, message_b: MessageTemplate, prompt_set: str = "default") -> PromptBundle:
    return _judge_prompt(PromptKind.COMPARISON, segment, message_a, message_b, prompt_set)


_ORIGIN_LABEL = re.compile(
    r"\b(original|generated|rewritten)\b(\s+(message|version|template|title|body))?\s*:",
    re.IGNORECASE,
)


def origin_labels(text: str) -> list[str]:
    """Label-position mentions of original/generated, e.g. ``Original Message:``."""
    return [m.group(0) for m in _ORIGIN_LABEL.finditer(text)]


# --- parsing -----------------------------------------------------------------


def _clean(raw: str) -> str:
    return raw.replace("**", "").replace("__", "").replace("\r\n", "\n")


_SCORE_FIELDS = (
    ("audience_score_a", "Audience Match Score A", r"audience\s+match\s+score\s+a"),
    ("audience_reason_a", "Audience Match Reason A", r"audience\s+match\s+reason\s+a"),
    ("market_score_a", "Marketing Score A", r"marketing\s+score\s+a"),
    ("market_reason_a", "Marketing Reason A", r"marketing\s+reason\s+a"),
    ("audience_score_b", "Audience Match Score B", r"audience\s+match\s+score\s+b"),
    ("audience_reason_b", "Audience Match Reason B", r"audience\s+match\s+reason\s+b"),
    ("market_score_b", "Marketing Score B", r"marketing\s+score\s+b"),
    ("market_reason_b", "Marketing Reason B", r"marketing\s+reason\s+b"),
)

_ANY_LABEL = "|".join(p for _, _, p in _SCORE_FIELDS)
_LABEL_START = re.compile(rf"^[ \t>*\-#]*(?:{_ANY_LABEL})\b\s*[:：]", re.IGNORECASE | re.MULTILINE)


def parse_score_response(raw: str) -> ScorePair:
    """Pull the eight labelled fields out of a scoring response."""
    text = _clean(raw)
    values: dict[str, object] = {}
    for attr, label, pattern in _SCORE_FIELDS:
        m = re.search(rf"\b(?:{pattern})\b\s*[:：][ \t]*", text, re.IGNORECASE)
        if m is None:
            raise ParseError(label)
        rest = text[m.end() :]
        if attr.endswith(("_score_a", "_score_b")):
            tok = re.match(r"(-?\d+)(?:\s*/\s*5)?", rest)
            if tok is None:
                raise ParseError(label, "no integer score")
            value = int(tok.group(1))
            if value not in SCALE:
                raise ScaleError(value, label)
            values[attr] = value
        else:
            nxt = _LABEL_START.search(rest)
            reason = " ".join((rest[: nxt.start()] if nxt else rest).split())
            if not reason:
                raise ParseError(label, "empty reason")
            values[attr] = reason
    return ScorePair(**values)  # type: ignore[arg-type]


def render_score_response(pair: ScorePair) -> str:
    return (
        f"Audience Match Score A: {pair.audience_score_a}\n"
        f"Audience Match Reason A: {pair.audience_reason_a}\n\n"
        f"Marketing Score A: {pair.market_score_a}\n"
        f"Marketing Reason A: {pair.market_reason_a}\n\n"
        f"Audience Match Score B: {pair.audience_score_b}\n"
        f"Audience Match Reason B: {pair.audience_reason_b}\n\n"
        f"Marketing Score B: {pair.market_score_b}\n"
        f"Marketing Reason B: {pair.market_reason_b}\n"
    )


_PREFERRED = re.compile(r"preferred\s+message\s*[:：]\s*([^\s.,;:]*)", re.IGNORECASE)
_REASON = re.compile(r"^[ \t]*reason\s*[:：]\s*", re.IGNORECASE | re.MULTILINE)


def parse_preference_response(raw: str) -> PreferenceDecision:
    text = _clean(raw)
    m = _PREFERRED.search(text)
    if m is None:
        raise ParseError("Preferred Message")
    token = m.group(1).strip("'\"`()[]").upper()
    if token not in ("A", "B"):
        raise ParseError("Preferred Message", f"label {m.group(1)!r}")
    rest = text[m.end() :]
    r = _REASON.search(rest)
    reason = rest[r.end() :] if r else rest
    return PreferenceDecision(token, " ".join(reason.split()))


def render_preference_response(decision: PreferenceDecision) -> str:
    return f"Preferred Message: {decision.preferred}\nReason: {decision.reason}\n"


_TITLE_MARK = re.compile(r"^[ \t]*(?:(?:generated|new|rewritten|improved)\s+)?title\s*[:：][ \t]*", re.IGNORECASE | re.MULTILINE)
_BODY_MARK = re.compile(r"^[ \t]*(?:(?:generated|new|rewritten|improved)\s+)?body\s*[:：][ \t]*", re.IGNORECASE | re.MULTILINE)


def parse_rewrite_response(raw: str) -> MessageTemplate:
    """Split a rewrite into title and body.

    Uses ``Title:``/``Body:`` markers when present, else first line as title and
    the rest as body. A missing body reuses the title text.
    """
    text = _clean(raw).strip()
    if not text:
        raise EmptyRewriteError("rewrite response is blank")
    t = _TITLE_MARK.search(text)
    b = _BODY_MARK.search(text)
    if t and b and t.start() < b.start():
        title = text[t.end() : b.start()]
        body = text[b.end() :]
    elif b and not t:
        title, body = text[: b.start()], text[b.end() :]
    elif t and not b:
        lines = text[t.end() :].split("\n", 1)
        title, body = lines[0], lines[1] if len(lines) > 1 else ""
    else:
        lines = text.split("\n", 1)
        title, body = lines[0], lines[1] if len(lines) > 1 else ""
    title = " ".join(title.split()).strip("\"'")
    body = body.strip().strip("\"'").strip()
    if not title and not body:
        raise EmptyRewriteError("rewrite response has no title or body")
    return MessageTemplate(title or body.split("\n", 1)[0], body or title)


_SUCCESS = re.compile(r"^[ \t#*\-]*(?:success\s+patterns?|what\s+works)\s*[:：]?[ \t]*$|^[ \t#*\-]*success\s+patterns?\s*[:：][ \t]*", re.IGNORECASE | re.MULTILINE)
_FAILURE = re.compile(r"^[ \t#*\-]*(?:failure\s+reasons?|weaknesses)\s*[:：]?[ \t]*$|^[ \t#*\-]*failure\s+reasons?\s*[:：][ \t]*", re.IGNORECASE | re.MULTILINE)


def parse_diagnosis_response(raw: str, segment: str) -> DiagnosisReport:
    """Split a diagnosis into success patterns and failure reasons.

    Without ``Success Patterns:`` / ``Failure Reasons:`` sections the whole
    analysis serves as both.
    """
    text = _clean(raw).strip()
    if not text:
        raise ParseError("diagnosis", "blank response")
    s = _SUCCESS.search(text)
    f = _FAILURE.search(text)
    if s and f:
        if s.start() < f.start():
            success, failure = text[s.end() : f.start()], text[f.end() :]
        else:
            failure, success = text[f.end() : s.start()], text[s.end() :]
        success, failure = success.strip(), failure.strip()
        if success and failure:
            return DiagnosisReport(segment, success, failure)
    return DiagnosisReport(segment, text, text)


def render_diagnosis_response(report: DiagnosisReport) -> str:
    return f"Success Patterns: {report.success_patterns}\nFailure Reasons: {report.failure_reasons}\n"
