import json
from decimal import Decimal
import threading
from dataclasses import replace

import httpx
import pytest

from conftest import PCT10, fixture_text, make_record
from prompt_fixtures import POOR, REWRITTEN
from crmkit.agents import PromptBundle, PromptKind
from crmkit.config import PipelineConfig, ProviderConfig
from crmkit.ingestion import MessageTemplate, Tier, VoucherInfo, VoucherKind
from crmkit.orchestrator import (
    SKIP_MISSING_METADATA,
    SKIP_NO_CANDIDATES,
    EvalFailed,
    RewriteFailed,
    RewriteOutcome,
    RoutePath,
    RoutingDecision,
    RoutingError,
    TieredCorpus,
    build_strong_index,
    classify_target,
    generated_slot,
    route_plan,
    run_batch,
    run_evaluation,
    run_rewrite,
)
from crmkit.providers import (
    HttpProvider,
    ProviderError,
    ProviderExhausted,
    ProviderRequest,
    ScriptedProvider,
    call_with_retries,
    synthetic_response,
)
from crmkit.metrics import ErrorType
from crmkit.retrieval import HashEmbedder

FAST = PipelineConfig(provider=ProviderConfig(backoff_seconds=0.0))


class Recorder:
    """Scripted provider wrapper that records each request."""

    single_flight = False

    def __init__(self, inner=None):
        self.inner = inner or ScriptedProvider(fallback=synthetic_response)
        self.requests = []
        self.lock = threading.Lock()

    def complete(self, request):
        with self.lock:
            self.requests.append(request)
        return self.inner.complete(request)

    @property
    def kinds(self):
        return [r.prompt.prompt_kind for r in self.requests]


def weak(merchant="m1", segment="New Buyers", **kw):
    kw.setdefault("title", f"weak {merchant}")
    return make_record(merchant, segment, 0.0, tier=Tier.WEAK, **kw)


def strong(merchant="m2", segment="New Buyers", avg=9.0, **kw):
    kw.setdefault("title", f"strong {merchant} {avg}")
    return make_record(merchant, segment, avg, tier=Tier.STRONG, **kw)


def _route(target, records, **kw):
    corpus = TieredCorpus(records)
    index = build_strong_index(corpus, HashEmbedder())
    return route_plan(target, corpus, index, **kw)


# --- routing ----------------------------------------------------------------------


def test_in_group_route():
    t = weak("m1")
    exemplars = [strong("m1", avg=a) for a in (5, 9, 7, 8)]
    d = _route(t, [t, *exemplars, strong("m2")])
    assert d.path is RoutePath.IN_GROUP
    assert d.exemplar_keys == tuple(r.key.as_str() for r in sorted(exemplars, key=lambda r: -r.avg_engagement)[:3])


def test_missing_metadata_route():
    t = weak("m1", category=(), voucher=None)
    d = _route(t, [t, strong("m2", category=(), voucher=None)])
    assert d == RoutingDecision(RoutePath.RULE_BASED, (), SKIP_MISSING_METADATA)


def test_kind_none_voucher_counts_as_missing():
    none = VoucherInfo("", VoucherKind.NONE, Decimal(0))
    t = weak("m1", category=(), voucher=none)
    assert t.key.voucher_fingerprint != "none"
    d = _route(t, [t, strong("m2", category=(), voucher=none)])
    assert d.skip_reason == SKIP_MISSING_METADATA


def test_voucher_only_is_enough_metadata():
    t = weak("m1", category=(), voucher=PCT10)
    s = strong("m2", category=(), voucher=PCT10)
    assert _route(t, [t, s]).path is RoutePath.CROSS_MERCHANT


def test_cross_merchant_route_single_candidate():
    t = weak("m1", category=("Beauty", "Skincare"), voucher=PCT10)
    s = strong("m2", category=("Beauty", "Skincare"), voucher=PCT10)
    other_segment = strong("m3", segment="Repeat Buyers", category=("Beauty", "Skincare"), voucher=PCT10)
    d = _route(t, [t, s, other_segment])
    assert d.path is RoutePath.CROSS_MERCHANT and d.exemplar_keys == (s.key.as_str(),)


def test_no_valid_candidates_route():
    t = weak("m1", category=("Beauty",))
    s = strong("m2", category=("Beauty",))
    assert _route(t, [t, s], min_similarity=1.01).skip_reason == SKIP_NO_CANDIDATES
    assert _route(t, [t]) == RoutingDecision(RoutePath.RULE_BASED, (), SKIP_NO_CANDIDATES)


def test_route_requires_weak_target():
    s = strong("m1")
    with pytest.raises(RoutingError):
        _route(s, [s])


# --- rewrite ------------------------------------------------------------------------


def test_rule_based_one_call():
    t = weak()
    p = Recorder()
    out = run_rewrite(RoutingDecision(RoutePath.RULE_BASED), t, p, TieredCorpus([t]), FAST)
    assert p.kinds == [PromptKind.RULE_REWRITE]
    assert len(out.provider_trace) == 1 and out.diagnosis is None
    assert out.generated.is_complete()


def test_in_group_two_calls():
    t, s = weak("m1"), strong("m1")
    corpus = TieredCorpus([t, s])
    p = Recorder()
    out = run_rewrite(route_plan(t, corpus, None), t, p, corpus, FAST)
    assert p.kinds == [PromptKind.CONTENT_DIAGNOSIS, PromptKind.EXEMPLAR_REWRITE]
    assert len(out.provider_trace) == 2 and out.diagnosis is not None
    # the strong template is the high performer, the target the low performer
    content = p.requests[0].prompt.rendered_text
    assert content.index(s.template.title) < content.index("=== Low-Performing") < content.index(t.template.title)
    assert s.template.as_text() in p.requests[1].prompt.rendered_text


def test_scripted_exemplar_rewrite():
    t, s = weak("m1"), strong("m1")
    corpus = TieredCorpus([t, s])
    provider = ScriptedProvider({("exemplar_rewrite", "*"): fixture_text("responses/rewrite_exemplar_a.txt")}, fallback=synthetic_response)
    out = run_rewrite(route_plan(t, corpus, None), t, provider, corpus, FAST)
    assert out.generated.title == "Limited-Time Steals on Top Picks!"
    assert out.generated.body.startswith("Discover our bestsellers")


def test_empty_rewrite_becomes_failure():
    t = weak()
    provider = ScriptedProvider({("rule_rewrite", "*"): "   "})
    with pytest.raises(RewriteFailed) as err:
        run_rewrite(RoutingDecision(RoutePath.RULE_BASED), t, provider, TieredCorpus([t]), FAST)
    assert not err.value.exhausted and "EmptyRewriteError" in err.value.reason


def test_exhausted_rewrite():
    t = weak()
    with pytest.raises(RewriteFailed) as err:
        run_rewrite(RoutingDecision(RoutePath.RULE_BASED), t, ScriptedProvider(), TieredCorpus([t]), FAST)
    assert err.value.exhausted


# --- evaluation ------------------------------------------------------------------------


def _outcome(original=POOR, generated=REWRITTEN, record=None):
    record = record or weak()
    return RewriteOutcome(record.key, original, generated, RoutingDecision(RoutePath.RULE_BASED), None)


def _judge(score_text, pref_text):
    return ScriptedProvider({("scoring", "*"): score_text, ("comparison", "*"): pref_text})


def test_evaluation_with_judge_fixtures():
    p = Recorder(_judge(fixture_text("responses/scores_a.txt"), fixture_text("responses/preference_a.txt")))
    res = run_evaluation(_outcome(), "Potential New Customers", p, FAST)
    assert res.scores.scores == (1, 3, 5, 5) and res.preference.preferred == "B"
    assert p.kinds == [PromptKind.SCORING, PromptKind.COMPARISON]
    assert 0 <= res.chrf <= 100 and -1 <= res.bertscore_f1 <= 1
    row = res.scored_row()
    assert (row.audience_ori, row.audience_gen, row.generated_preferred) == (1, 5, True)
    # original in slot A, generated in slot B
    text = p.requests[0].prompt.rendered_text
    assert text.index(POOR.title) < text.index("Message B:") < text.index(REWRITTEN.title)


def test_self_similarity_metrics():
    res = run_evaluation(_outcome(POOR, POOR), "S", Recorder(), FAST)
    assert res.chrf == 100.0 and abs(res.bertscore_f1 - 1.0) < 1e-9


def test_bad_preference_label():
    with pytest.raises(EvalFailed) as err:
        run_evaluation(_outcome(), "S", _judge(fixture_text("responses/scores_a.txt"), "Preferred Message: C"), FAST)
    assert "ParseError" in err.value.reason


def test_scale_error_kept_in_failure():
    bad = fixture_text("responses/scores_a.txt").replace("Marketing Score B: 5", "Marketing Score B: 2")
    with pytest.raises(EvalFailed) as err:
        run_evaluation(_outcome(), "S", _judge(bad, "Preferred Message: B"), FAST)
    assert "ScaleError" in err.value.reason and "Marketing Score B" in err.value.reason


def test_randomized_slots_map_back():
    cfg = replace(FAST, randomize_slots=True)
    records = [weak(f"m{i}") for i in range(12)]
    slots = {generated_slot(r.key, True) for r in records}
    assert slots == {"A", "B"}
    for r in records:
        res = run_evaluation(_outcome(record=r), "S", _judge(fixture_text("responses/scores_a.txt"), "Preferred Message: A"), cfg)
        row = res.scored_row()
        if res.generated_slot == "A":
            assert (row.audience_gen, row.audience_ori, row.generated_preferred) == (1, 5, True)
        else:
            assert (row.audience_gen, row.audience_ori, row.generated_preferred) == (5, 1, False)


def test_classify_target_examples():
    provider = ScriptedProvider(fallback=synthetic_response)
    r1 = weak(segment="Potential New Customers")
    label, _ = classify_target(r1, MessageTemplate("It's been a while—check out our bestsellers!", ""), provider, FAST)
    assert label is ErrorType.AUDIENCE_ASSUMPTION_ERROR
    r2 = weak(segment="Active Old Followers")
    label, _ = classify_target(r2, MessageTemplate("Thanks for following—enjoy your first-order discount!", ""), provider, FAST)
    assert label is ErrorType.IRRELEVANT_OFFER


# --- batch ---------------------------------------------------------------------------


def _corpus():
    recs = [strong("m1", avg=9), weak("m1"), weak("m2", category=(), voucher=None), weak("m3", category=("Beauty",))]
    recs.append(strong("m4", category=("Beauty",)))
    recs.append(make_record("m5", "New Buyers", 3.0, tier=Tier.MIDDLE))
    return recs


def test_batch_no_weak_records():
    res = run_batch([strong("m1")], FAST, Recorder())
    assert res.outcomes == [] and res.evaluations == [] and res.failures == []


def test_batch_paths_and_call_counts():
    p = Recorder()
    res = run_batch(_corpus(), FAST, p)
    paths = {o.target_key.merchant_id: o.routing.path for o in res.outcomes}
    assert paths == {"m1": RoutePath.IN_GROUP, "m2": RoutePath.RULE_BASED, "m3": RoutePath.CROSS_MERCHANT}
    assert len(p.requests) == 2 + 1 + 2 + 3 * 2
    assert len(res.evaluations) == 3 and res.failures == []


def test_batch_failure_isolated():
    a, b = weak("m1", title="aaa"), weak("m2", title="bbb")
    provider = ScriptedProvider({("rule_rewrite", b.key.as_str()): ""}, fallback=synthetic_response)
    res = run_batch([a, b], FAST, provider)
    assert [o.target_key for o in res.outcomes] == [a.key]
    assert [(f.target_key, f.stage) for f in res.failures] == [(b.key, "rewrite")]


def test_incomplete_template_fails_without_calls():
    t = weak("m1", body=" ")
    p = Recorder()
    res = run_batch([t], FAST, p)
    assert p.requests == [] and res.failures[0].reason == "template title or body is empty"


def _serialize(res):
    return json.dumps(
        [[o.target_key, o.generated.title, o.generated.body, o.routing.path.value, o.provider_trace] for o in res.outcomes]
        + [[e.target_key, e.scores.scores, e.preference.preferred, e.chrf, e.bertscore_f1] for e in res.evaluations]
    )


def test_batch_deterministic_and_schedule_independent():
    recs = _corpus() + [weak(f"x{i}", category=("Beauty",)) for i in range(20)]
    one = _serialize(run_batch(recs, replace(FAST, workers=1), Recorder()))
    assert one == _serialize(run_batch(list(reversed(recs)), replace(FAST, workers=8), Recorder()))


def test_single_flight_honoured():
    active, peak = [0], [0]
    lock = threading.Lock()

    class Probe(Recorder):
        single_flight = True

        def complete(self, request):
            with lock:
                active[0] += 1
                peak[0] = max(peak[0], active[0])
            try:
                return super().complete(request)
            finally:
                with lock:
                    active[0] -= 1

    run_batch([weak(f"m{i}", category=()) for i in range(10)], replace(FAST, workers=8), Probe())
    assert peak[0] == 1


# --- providers -------------------------------------------------------------------------


def _request(kind=PromptKind.RULE_REWRITE, text="hello", retries=3, key="k"):
    return ProviderRequest(PromptBundle(kind, text), max_retries=retries, target_key=key)


def test_scripted_lookup_order():
    from crmkit.providers import digest

    p = ScriptedProvider({("rule_rewrite", "k"): "exact", ("rule_rewrite", "*"): "wild"}, {digest("hello"): "digest"})
    assert p.complete(_request()) == "exact"
    assert p.complete(_request(key="other")) == "wild"
    assert p.complete(_request(PromptKind.SCORING)) == "digest"
    with pytest.raises(ProviderError):
        p.complete(_request(PromptKind.SCORING, text="x"))


def test_scripted_from_file(tmp_path):
    path = tmp_path / "f.json"
    path.write_text(json.dumps({"responses": [{"prompt_kind": "scoring", "response": "S"}], "digests": {}}))
    assert ScriptedProvider.from_file(path).complete(_request(PromptKind.SCORING)) == "S"


def test_synthetic_responses_parse():
    from crmkit import agents

    for kind, slots in [(PromptKind.SCORING, {}), (PromptKind.COMPARISON, {}), (PromptKind.CONTENT_DIAGNOSIS, {})]:
        text = synthetic_response(ProviderRequest(PromptBundle(kind, "x", slots)))
        assert text == synthetic_response(ProviderRequest(PromptBundle(kind, "x", slots)))
    assert agents.parse_score_response(synthetic_response(_request(PromptKind.SCORING)))
    assert agents.parse_preference_response(synthetic_response(_request(PromptKind.COMPARISON)))


class Flaky:
    single_flight = False

    def __init__(self, failures):
        self.failures = failures
        self.calls = 0

    def complete(self, request):
        self.calls += 1
        if self.calls <= self.failures:
            raise ProviderError("boom")
        return "ok"


def test_retry_backoff_schedule():
    sleeps = []
    p = Flaky(3)
    assert call_with_retries(p, _request(retries=3), 0.5, sleeps.append) == "ok"
    assert p.calls == 4 and sleeps == [0.5, 1.0, 2.0]


def test_retries_exhausted():
    sleeps = []
    with pytest.raises(ProviderExhausted) as err:
        call_with_retries(Flaky(10), _request(retries=2), 1.0, sleeps.append)
    assert err.value.attempts == 3 and sleeps == [1.0, 2.0]


def test_http_provider(monkeypatch):
    seen = []

    def handler(request):
        seen.append(request)
        if len(seen) == 1:
            return httpx.Response(503)
        return httpx.Response(200, json={"choices": [{"message": {"content": "Preferred Message: B"}}]})

    monkeypatch.setenv("TEST_KEY", "sekret")
    p = HttpProvider("http://llm.local/v1/", "TEST_KEY", transport=httpx.MockTransport(handler))
    req = ProviderRequest(PromptBundle(PromptKind.COMPARISON, "judge this"), model_id="m-x", temperature=0.0)
    assert call_with_retries(p, req, 0.0, lambda s: None) == "Preferred Message: B"
    body = json.loads(seen[-1].content)
    assert str(seen[-1].url) == "http://llm.local/v1/chat/completions"
    assert body == {"model": "m-x", "temperature": 0.0, "messages": [{"role": "user", "content": "judge this"}]}
    assert seen[-1].headers["Authorization"] == "Bearer sekret"


@pytest.mark.parametrize("response", [httpx.Response(400, text="bad"), httpx.Response(200, json={"nope": 1}), httpx.Response(200, text="<html>")])
def test_http_provider_errors(response):
    p = HttpProvider("http://x", transport=httpx.MockTransport(lambda r: response))
    with pytest.raises(ProviderError):
        p.complete(_request())


def test_http_transport_error():
    def boom(request):
        raise httpx.ConnectError("down")

    p = HttpProvider("http://x", transport=httpx.MockTransport(boom))
    with pytest.raises(ProviderError):
        p.complete(_request())
