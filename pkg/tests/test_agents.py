import re
import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fixture_text
from prompt_fixtures import FOLLOWER, POOR, REWRITTEN, SEGMENT, rendered_goldens
from crmkit import agents
from crmkit.agents import (
    DiagnosisReport,
    EmptyRewriteError,
    ExemplarLine,
    ParseError,
    PreferenceDecision,
    PromptError,
    PromptKind,
    ScaleError,
    ScorePair,
)
from crmkit.ingestion import MessageTemplate

M1 = MessageTemplate("Title one", "Body one")
M2 = MessageTemplate("Title two", "Body two")


@pytest.mark.parametrize("name", ["content_diagnosis", "exemplar_rewrite", "rule_rewrite", "scoring", "comparison"])
def test_prompt_golden(name):
    bundle = rendered_goldens()[name]
    assert bundle.prompt_kind is PromptKind(name)
    assert bundle.rendered_text == fixture_text(f"prompts/{name}.txt")


def test_no_residual_placeholders():
    for bundle in rendered_goldens().values():
        assert not re.search(r"\{[a-z_]+\}", bundle.rendered_text)


def test_braces_in_values_stay_literal():
    b = agents.build_rule_prompt(MessageTemplate("{original}", "{audience_group} {x}"))
    assert b.rendered_text.endswith("{original}\n\n{audience_group} {x}\n")


def test_render_requires_all_slots():
    with pytest.raises(PromptError):
        agents.render(PromptKind.RULE_REWRITE, {})


# --- content diagnosis ----------------------------------------------------------


def test_content_prompt_sections_and_segment():
    b = agents.build_content_prompt("New Buyers", [ExemplarLine(M1)], [ExemplarLine(M2)])
    assert b.rendered_text.count("=== High-Performing Templates ===") == 1
    assert b.rendered_text.count("=== Low-Performing Templates ===") == 1
    assert "audience segment New Buyers." in b.rendered_text


def test_content_prompt_escapes_pipe():
    b = agents.build_content_prompt("S", [ExemplarLine(MessageTemplate("A|B", "x"))], [ExemplarLine(M2)])
    assert "Title: A\\|B Body: x | none | none" in b.rendered_text


def test_content_prompt_needs_both_lists():
    with pytest.raises(PromptError):
        agents.build_content_prompt("S", [], [ExemplarLine(M2)])
    with pytest.raises(PromptError):
        agents.build_content_prompt("S", [ExemplarLine(M1)], [])


# --- rewrite prompts --------------------------------------------------------------


def test_rewrite_prompt_instruction_and_order():
    ex = [MessageTemplate(f"T{i}", f"body number {i}") for i in range(3)]
    text = agents.build_rewrite_prompt(M1, "weak", ex, "good").rendered_text
    assert "rewrite the original message into a short, action-driven, persuasive push notification" in text
    positions = [text.index(f"body number {i}") for i in range(3)]
    assert positions == sorted(positions)


def test_rewrite_prompt_keeps_language_of_slots():
    malay = MessageTemplate("Jom beli sekarang!", "Diskaun hebat menanti anda, jangan lepaskan peluang ini.")
    a = agents.build_rewrite_prompt(malay, "w", [M2], "g").rendered_text
    b = agents.build_rewrite_prompt(M1, "w", [M2], "g").rendered_text
    assert a.replace(malay.as_text(), "@") == b.replace(M1.as_text(), "@")
    assert "Respond in the similar language style as the Original Poor Template." in a


def test_rewrite_prompt_errors():
    with pytest.raises(PromptError):
        agents.build_rewrite_prompt(M1, "weak", [], "good")
    with pytest.raises(PromptError):
        agents.build_rewrite_prompt(M1, " ", [M2], "good")


def test_rule_prompt():
    text = agents.build_rule_prompt(M1).rendered_text
    assert text.count("=== Original Message ===") == 1
    assert text.endswith("=== Original Message ===\nTitle one\n\nBody one\n")
    assert agents.build_rule_prompt(M1) == agents.build_rule_prompt(MessageTemplate("Title one", "Body one"))
    with pytest.raises(PromptError):
        agents.build_rule_prompt(MessageTemplate(" ", ""))


# --- judge prompts ----------------------------------------------------------------


def test_scoring_prompt_layout():
    text = agents.build_scoring_prompt("Repeat Buyers", M1, M2).rendered_text
    assert text.index("Message A:") < text.index("Message B:")
    assert "suit the audience segment: Repeat Buyers?" in text
    assert "Audience Segment: Repeat Buyers\n" in text


def test_comparison_prompt_task_sentence():
    assert "Which message is more persuasive" in agents.build_comparison_prompt("S", M1, M2).rendered_text


@pytest.mark.parametrize("build", [agents.build_scoring_prompt, agents.build_comparison_prompt])
def test_slot_swap_symmetry(build):
    ab = build("S", M1, M2).rendered_text
    ba = build("S", M2, M1).rendered_text
    assert ab.replace(M1.as_text(), "@1").replace(M2.as_text(), "@2") == ba.replace(M1.as_text(), "@2").replace(M2.as_text(), "@1")


@pytest.mark.parametrize("build", [agents.build_scoring_prompt, agents.build_comparison_prompt])
def test_anonymized(build):
    for a, b in [(POOR, REWRITTEN), (REWRITTEN, POOR), (FOLLOWER, POOR)]:
        assert agents.origin_labels(build(SEGMENT, a, b).rendered_text) == []


def test_origin_label_scan_detects_labels():
    assert agents.origin_labels("Original Message:\nfoo\nGenerated: bar") == ["Original Message:", "Generated:"]
    assert agents.origin_labels("preserving the original intent") == []


def test_empty_judge_message_rejected():
    with pytest.raises(PromptError):
        agents.build_scoring_prompt("S", MessageTemplate("", ""), M2)


def test_cot_prompt_set():
    base = agents.build_scoring_prompt("S", M1, M2).rendered_text
    cot = agents.build_scoring_prompt("S", M1, M2, "cot").rendered_text
    assert cot.startswith(base) and "step by step" in cot[len(base):]
    # sets without their own file fall back to the default skeleton
    assert agents.load_skeleton(PromptKind.CONTENT_DIAGNOSIS, "cot") == agents.load_skeleton(PromptKind.CONTENT_DIAGNOSIS)
    assert agents.load_skeleton(PromptKind.SCORING, "no-such-set") == agents.load_skeleton(PromptKind.SCORING)


# --- parsers ----------------------------------------------------------------------


def test_parse_scores_a():
    pair = agents.parse_score_response(fixture_text("responses/scores_a.txt"))
    assert pair.scores == (1, 3, 5, 5)
    assert pair.audience_reason_a.startswith("Message A refers to seeing the audience again")
    assert pair.market_reason_b.endswith("motivate immediate action.")


def test_parse_scores_b():
    assert agents.parse_score_response(fixture_text("responses/scores_b.txt")).scores == (1, 3, 5, 5)


def test_parse_preference_fixtures():
    d = agents.parse_preference_response(fixture_text("responses/preference_a.txt"))
    assert d.preferred == "B" and d.reason.startswith("Message B is more persuasive")
    assert agents.parse_preference_response(fixture_text("responses/preference_b.txt")).preferred == "B"


def test_score_out_of_scale():
    text = fixture_text("responses/scores_a.txt").replace("Audience Match Score A: 1", "Audience Match Score A: 4")
    with pytest.raises(ScaleError) as err:
        agents.parse_score_response(text)
    assert err.value.value == 4


def test_score_missing_field():
    with pytest.raises(ParseError) as err:
        agents.parse_score_response("")
    assert err.value.field == "Audience Match Score A"
    text = fixture_text("responses/scores_a.txt").replace("Marketing Reason B", "Notes")
    with pytest.raises(ParseError) as err:
        agents.parse_score_response(text)
    assert err.value.field == "Marketing Reason B"


def test_score_tolerates_markdown_and_case():
    text = "**audience match score a:** 3/5\naudience match reason a: ok\nMARKETING SCORE A: 1\nMarketing Reason A: meh\n" \
           "Audience Match Score B: 5\nAudience Match Reason B: good\nMarketing Score B : 5\nMarketing Reason B: great"
    assert agents.parse_score_response(text).scores == (3, 1, 5, 5)


def test_preference_errors_and_variants():
    with pytest.raises(ParseError):
        agents.parse_preference_response("Preferred Message: C")
    with pytest.raises(ParseError):
        agents.parse_preference_response("I like both")
    assert agents.parse_preference_response("preferred message:   a").preferred == "A"
    assert agents.parse_preference_response("Preferred Message: **B**.").preferred == "B"


def test_rewrite_parse_markers():
    assert agents.parse_rewrite_response("Generated Title: X\nGenerated Body: Y") == MessageTemplate("X", "Y")
    out = agents.parse_rewrite_response(fixture_text("responses/rewrite_exemplar_a.txt"))
    assert out.title == "Limited-Time Steals on Top Picks!"
    assert out.body.startswith("Discover our bestsellers")


def test_rewrite_parse_fallbacks():
    assert agents.parse_rewrite_response("Shop now!") == MessageTemplate("Shop now!", "Shop now!")
    assert agents.parse_rewrite_response("Big sale\nEverything 50% off\ntoday") == MessageTemplate("Big sale", "Everything 50% off\ntoday")
    for blank in ("", "   \n\t"):
        with pytest.raises(EmptyRewriteError):
            agents.parse_rewrite_response(blank)


def test_diagnosis_parse():
    d = agents.parse_diagnosis_response("Success Patterns: urgency\nFailure Reasons: vague", "S")
    assert d == DiagnosisReport("S", "urgency", "vague")
    free = agents.parse_diagnosis_response("High performers use numbers.", "S")
    assert free.success_patterns == free.failure_reasons == "High performers use numbers."
    with pytest.raises(ParseError):
        agents.parse_diagnosis_response("  ", "S")


# --- round trips -------------------------------------------------------------------

reason = st.text(alphabet=string.ascii_letters + string.digits + " ,.'!?-", min_size=1, max_size=80).filter(lambda s: s.strip())
score = st.sampled_from([1, 3, 5])


@settings(max_examples=200)
@given(score, score, score, score, reason, reason, reason, reason)
def test_score_round_trip(a1, m1, a2, m2, r1, r2, r3, r4):
    pair = ScorePair(a1, m1, a2, m2, " ".join(r1.split()), " ".join(r2.split()), " ".join(r3.split()), " ".join(r4.split()))
    assert agents.parse_score_response(agents.render_score_response(pair)) == pair


@given(st.sampled_from(["A", "B"]), reason)
def test_preference_round_trip(label, why):
    d = PreferenceDecision(label, " ".join(why.split()))
    assert agents.parse_preference_response(agents.render_preference_response(d)) == d


@given(reason, reason)
def test_diagnosis_round_trip(s, f):
    d = DiagnosisReport("S", " ".join(s.split()), " ".join(f.split()))
    assert agents.parse_diagnosis_response(agents.render_diagnosis_response(d), "S") == d


def test_scorepair_validates():
    with pytest.raises(ScaleError):
        ScorePair(2, 3, 5, 5, "a", "b", "c", "d")
