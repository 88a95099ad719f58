"""Route weak templates through the three rewrite paths and evaluate the results."""

from __future__ import annotations

import hashlib
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence, TypeVar

from . import agents
from .agents import (
    DiagnosisReport,
    ExemplarLine,
    PreferenceDecision,
    PromptBundle,
    ResponseError,
    ScorePair,
)
from .config import PipelineConfig
from .ingestion import AggregatedPlanRecord, MessageTemplate, RecordKey, Tier
from .metrics import (
    ErrorType,
    MetricUndefined,
    ScoredRow,
    bertscore_f1,
    chrf_score,
    classify_error_type,
    tokenize,
)
from .providers import Provider, ProviderExhausted, ProviderRequest, call_with_retries, digest
from .retrieval import (
    Embedder,
    EmbeddingCache,
    HashEmbedder,
    VectorIndex,
    docs_for_records,
    filter_valid,
    index_build,
    query_topk,
    record_metadata,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class RoutePath(Enum):
    IN_GROUP = "in_group"
    CROSS_MERCHANT = "cross_merchant"
    RULE_BASED = "rule_based"


SKIP_MISSING_METADATA = "missing metadata"
SKIP_NO_CANDIDATES = "no valid candidates"


class RoutingError(ValueError):
    pass


class RewriteFailed(RuntimeError):
    def __init__(self, target_key: RecordKey, reason: str, exhausted: bool = False) -> None:
        self.target_key = target_key
        self.reason = reason
        self.exhausted = exhausted
        super().__init__(f"{target_key.as_str()}: {reason}")


class EvalFailed(RuntimeError):
    def __init__(self, target_key: RecordKey, reason: str, exhausted: bool = False) -> None:
        self.target_key = target_key
        self.reason = reason
        self.exhausted = exhausted
        super().__init__(f"{target_key.as_str()}: {reason}")


@dataclass(frozen=True)
class RoutingDecision:
    path: RoutePath
    exemplar_keys: tuple[str, ...] = ()
    skip_reason: str | None = None


@dataclass(frozen=True)
class RewriteOutcome:
    target_key: RecordKey
    original: MessageTemplate
    generated: MessageTemplate
    routing: RoutingDecision
    diagnosis: DiagnosisReport | None
    provider_trace: tuple[tuple[str, str], ...] = ()

    @property
    def segment(self) -> str:
        return self.target_key.audience_segment


@dataclass(frozen=True)
class EvalResult:
    target_key: RecordKey
    scores: ScorePair
    preference: PreferenceDecision
    chrf: float
    bertscore_f1: float
    generated_slot: str = "B"
    provider_trace: tuple[tuple[str, str], ...] = ()

    def scored_row(self) -> ScoredRow:
        s = self.scores
        if self.generated_slot == "B":
            aud = (s.audience_score_a, s.audience_score_b)
            mkt = (s.market_score_a, s.market_score_b)
        else:
            aud = (s.audience_score_b, s.audience_score_a)
            mkt = (s.market_score_b, s.market_score_a)
        return ScoredRow(
            self.target_key.audience_segment,
            aud[0],
            aud[1],
            mkt[0],
            mkt[1],
            self.preference.preferred == self.generated_slot,
            self.bertscore_f1,
            self.chrf,
        )


@dataclass(frozen=True)
class Failure:
    target_key: RecordKey
    stage: str
    reason: str
    exhausted: bool = False


@dataclass
class BatchResult:
    outcomes: list[RewriteOutcome] = field(default_factory=list)
    evaluations: list[EvalResult] = field(default_factory=list)
    failures: list[Failure] = field(default_factory=list)


# --- corpus ------------------------------------------------------------------


def describe_voucher(fingerprint: str) -> str:
    return fingerprint.replace(" | ", ", ")


class TieredCorpus:
    """Tiered records with lookups for in-group exemplars and retrieval payloads."""

    def __init__(self, records: Iterable[AggregatedPlanRecord]) -> None:
        self.records = sorted(records, key=lambda r: r.key)
        self.by_key = {r.key.as_str(): r for r in self.records}
        self.strong = [r for r in self.records if r.tier is Tier.STRONG]
        self.weak = [r for r in self.records if r.tier is Tier.WEAK]
        groups: dict[tuple[str, str], list[AggregatedPlanRecord]] = defaultdict(list)
        for r in self.strong:
            groups[(r.merchant_id, r.audience_segment)].append(r)
        self.in_group = {
            g: sorted(rs, key=lambda r: (-r.avg_engagement, r.key)) for g, rs in groups.items()
        }
        self.templates = {r.key.as_str(): r.template for r in self.strong}

    def exemplar_line(self, key: str) -> ExemplarLine:
        r = self.by_key[key]
        return ExemplarLine(r.template, r.key.category, describe_voucher(r.voucher_fingerprint))


def build_strong_index(
    corpus: TieredCorpus,
    embedder: Embedder,
    cache: EmbeddingCache | None = None,
) -> VectorIndex | None:
    if not corpus.strong:
        return None
    return index_build(docs_for_records(corpus.strong), embedder, cache)


# --- routing -----------------------------------------------------------------


def route_plan(
    target: AggregatedPlanRecord,
    corpus: TieredCorpus,
    index: VectorIndex | None,
    k: int = 3,
    min_similarity: float = 0.30,
    embedder: Embedder | None = None,
) -> RoutingDecision:
    """In-group strong exemplars, else cross-merchant retrieval, else the rule-based prompt."""
    if target.tier is not Tier.WEAK:
        raise RoutingError(f"only weak records are routed, got {target.tier.value}")
    group = corpus.in_group.get((target.merchant_id, target.audience_segment))
    if group:
        return RoutingDecision(RoutePath.IN_GROUP, tuple(r.key.as_str() for r in group[:k]))
    if not target.category_path and not target.has_voucher:
        return RoutingDecision(RoutePath.RULE_BASED, (), SKIP_MISSING_METADATA)
    if index is not None and len(index):
        embedder = embedder or HashEmbedder(index.dimension)
        candidates = query_topk(
            index,
            embedder(record_metadata(target)),
            k,
            segment=target.audience_segment,
            exclude_merchant=target.merchant_id,
            templates=corpus.templates,
        )
        valid = filter_valid(candidates, min_similarity)
        if valid:
            return RoutingDecision(RoutePath.CROSS_MERCHANT, tuple(c.record_key for c in valid[:k]))
    return RoutingDecision(RoutePath.RULE_BASED, (), SKIP_NO_CANDIDATES)


# --- provider calls ----------------------------------------------------------


class _Caller:
    def __init__(self, provider: Provider, config: PipelineConfig, sleep: Callable[[float], None] | None = None) -> None:
        self.provider = provider
        self.config = config
        self.sleep = sleep

    def __call__(self, prompt: PromptBundle, target_key: RecordKey, agent: str) -> tuple[str, tuple[str, str]]:
        pc = self.config.provider
        request = ProviderRequest(
            prompt=prompt,
            model_id=self.config.model_for(agent),
            temperature=pc.temperature,
            max_retries=pc.max_retries,
            target_key=target_key.as_str(),
        )
        kwargs = {"sleep": self.sleep} if self.sleep else {}
        text = call_with_retries(self.provider, request, pc.backoff_seconds, **kwargs)
        return text, (digest(prompt.rendered_text)[:16], digest(text)[:16])


def run_rewrite(
    decision: RoutingDecision,
    target: AggregatedPlanRecord,
    provider: Provider,
    corpus: TieredCorpus,
    config: PipelineConfig | None = None,
    sleep: Callable[[float], None] | None = None,
) -> RewriteOutcome:
    config = config or PipelineConfig()
    call = _Caller(provider, config, sleep)
    trace: list[tuple[str, str]] = []
    diagnosis = None
    prompt_set = config.template_prompt_set
    try:
        if decision.path is RoutePath.RULE_BASED:
            text, t = call(agents.build_rule_prompt(target.template, prompt_set), target.key, "template")
            trace.append(t)
        else:
            strong = [corpus.exemplar_line(k) for k in decision.exemplar_keys]
            weak = [ExemplarLine(target.template, target.key.category, describe_voucher(target.voucher_fingerprint))]
            content = agents.build_content_prompt(target.audience_segment, strong, weak)
            text, t = call(content, target.key, "content")
            trace.append(t)
            diagnosis = agents.parse_diagnosis_response(text, target.audience_segment)
            rewrite = agents.build_rewrite_prompt(
                target.template,
                diagnosis.failure_reasons,
                [line.template for line in strong],
                diagnosis.success_patterns,
                prompt_set,
            )
            text, t = call(rewrite, target.key, "template")
            trace.append(t)
        generated = agents.parse_rewrite_response(text)
    except ProviderExhausted as exc:
        raise RewriteFailed(target.key, str(exc), exhausted=True) from exc
    except (ResponseError, agents.PromptError, KeyError) as exc:
        raise RewriteFailed(target.key, f"{type(exc).__name__}: {exc}") from exc
    return RewriteOutcome(target.key, target.template, generated, decision, diagnosis, tuple(trace))


def generated_slot(target_key: RecordKey, randomize: bool) -> str:
    if not randomize:
        return "B"
    return "A" if int(hashlib.sha256(target_key.as_str().encode()).hexdigest()[:8], 16) % 2 else "B"


def similarity_metrics(original: MessageTemplate, generated: MessageTemplate, config: PipelineConfig) -> tuple[float, float]:
    chrf = chrf_score(original.as_text(), generated.as_text(), config.chrf)
    embedder = HashEmbedder(config.embed_dimension)
    try:
        bert = bertscore_f1(tokenize(original.as_text()), tokenize(generated.as_text()), embedder)
    except MetricUndefined:
        bert = 0.0
    return chrf, bert


def run_evaluation(
    outcome: RewriteOutcome,
    segment: str,
    provider: Provider,
    config: PipelineConfig | None = None,
    sleep: Callable[[float], None] | None = None,
) -> EvalResult:
    """Scoring and blind comparison prompts plus chrF and BERTScore against the original."""
    config = config or PipelineConfig()
    call = _Caller(provider, config, sleep)
    slot = generated_slot(outcome.target_key, config.randomize_slots)
    a, b = (outcome.original, outcome.generated) if slot == "B" else (outcome.generated, outcome.original)
    prompt_set = config.evaluate_prompt_set
    trace = []
    try:
        text, t = call(agents.build_scoring_prompt(segment, a, b, prompt_set), outcome.target_key, "evaluate")
        trace.append(t)
        scores = agents.parse_score_response(text)
        text, t = call(agents.build_comparison_prompt(segment, a, b, prompt_set), outcome.target_key, "evaluate")
        trace.append(t)
        preference = agents.parse_preference_response(text)
    except ProviderExhausted as exc:
        raise EvalFailed(outcome.target_key, str(exc), exhausted=True) from exc
    except (ResponseError, agents.PromptError) as exc:
        raise EvalFailed(outcome.target_key, f"{type(exc).__name__}: {exc}") from exc
    chrf, bert = similarity_metrics(outcome.original, outcome.generated, config)
    return EvalResult(outcome.target_key, scores, preference, chrf, bert, slot, tuple(trace))


def classify_target(
    record_or_key: AggregatedPlanRecord | RecordKey,
    template: MessageTemplate,
    provider: Provider,
    config: PipelineConfig | None = None,
    category_path: Sequence[str] = (),
) -> tuple[ErrorType, str]:
    config = config or PipelineConfig()
    key = record_or_key.key if isinstance(record_or_key, AggregatedPlanRecord) else record_or_key
    call = _Caller(provider, config)
    voucher = None if key.voucher_fingerprint == "none" else describe_voucher(key.voucher_fingerprint)
    product = " > ".join(category_path) or (None if key.category == "none" else key.category)
    return classify_error_type(
        template,
        key.audience_segment,
        voucher,
        product,
        lambda prompt: call(prompt, key, "evaluate")[0],
    )


# --- batch -------------------------------------------------------------------


def _map(fn: Callable[[T], R], items: Sequence[T], workers: int) -> list[R]:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _workers(provider: Provider, config: PipelineConfig) -> int:
    if getattr(provider, "single_flight", False) or config.provider.single_flight:
        return 1
    return config.workers


def run_rewrites(
    corpus: TieredCorpus,
    config: PipelineConfig,
    provider: Provider,
    index: VectorIndex | None = None,
    embedder: Embedder | None = None,
) -> tuple[list[RewriteOutcome], list[Failure]]:
    embedder = embedder or HashEmbedder(config.embed_dimension)

    def one(target: AggregatedPlanRecord) -> RewriteOutcome | Failure:
        if not target.template.is_complete():
            return Failure(target.key, "rewrite", "template title or body is empty")
        decision = route_plan(target, corpus, index, config.top_k, config.min_similarity, embedder)
        try:
            return run_rewrite(decision, target, provider, corpus, config)
        except RewriteFailed as exc:
            return Failure(target.key, "rewrite", exc.reason, exc.exhausted)

    results = _map(one, corpus.weak, _workers(provider, config))
    outcomes = sorted((r for r in results if isinstance(r, RewriteOutcome)), key=lambda o: o.target_key)
    failures = sorted((r for r in results if isinstance(r, Failure)), key=lambda f: f.target_key)
    return outcomes, failures


def run_evaluations(
    outcomes: Sequence[RewriteOutcome],
    config: PipelineConfig,
    provider: Provider,
) -> tuple[list[EvalResult], list[Failure]]:
    def one(outcome: RewriteOutcome) -> EvalResult | Failure:
        try:
            return run_evaluation(outcome, outcome.segment, provider, config)
        except EvalFailed as exc:
            return Failure(outcome.target_key, "evaluate", exc.reason, exc.exhausted)

    results = _map(one, list(outcomes), _workers(provider, config))
    evals = sorted((r for r in results if isinstance(r, EvalResult)), key=lambda e: e.target_key)
    failures = sorted((r for r in results if isinstance(r, Failure)), key=lambda f: f.target_key)
    return evals, failures


def run_batch(
    records: Iterable[AggregatedPlanRecord],
    config: PipelineConfig,
    provider: Provider,
    embedder: Embedder | None = None,
) -> BatchResult:
    """Rewrite and evaluate every weak record; per-record failures never stop the batch."""
    corpus = records if isinstance(records, TieredCorpus) else TieredCorpus(records)
    embedder = embedder or HashEmbedder(config.embed_dimension)
    index = build_strong_index(corpus, embedder)
    outcomes, rewrite_failures = run_rewrites(corpus, config, provider, index, embedder)
    evals, eval_failures = run_evaluations(outcomes, config, provider)
    failures = sorted(rewrite_failures + eval_failures, key=lambda f: (f.target_key, f.stage))
    return BatchResult(outcomes, evals, failures)
