"""On-disk artifacts: results.jsonl rows and the report tables."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import __version__
from .agents import DiagnosisReport, PreferenceDecision, ScorePair
from .config import PipelineConfig
from .ingestion import AggregatedPlanRecord, MessageTemplate, RecordKey
from .metrics import (
    CONFIG_TABLE_COLUMNS,
    ERROR_TABLE_COLUMNS,
    SEGMENT_TABLE_COLUMNS,
    SIMILARITY_TABLE_COLUMNS,
    ErrorType,
    ScoredRow,
    aggregate_segment_table,
    config_table_rows,
    error_distribution,
    error_distribution_rows,
    segment_table_rows,
    similarity_table_rows,
)
from .orchestrator import EvalResult, Failure, RewriteOutcome, RoutePath, RoutingDecision

EVAL_FIELDS = (
    "generated_slot",
    "audience_score_a",
    "audience_reason_a",
    "market_score_a",
    "market_reason_a",
    "audience_score_b",
    "audience_reason_b",
    "market_score_b",
    "market_reason_b",
    "preferred",
    "preference_reason",
    "chrf",
    "bertscore_f1",
    "eval_trace",
)


def header(config: PipelineConfig) -> dict[str, Any]:
    return {"tool": "crmkit", "version": __version__, "config_digest": config.digest(), "seed": config.seed}


def header_line(config: PipelineConfig) -> str:
    h = header(config)
    return f"crmkit {h['version']} config={h['config_digest']} seed={h['seed']}"


def _key_fields(key: RecordKey, category_path: Sequence[str]) -> dict[str, Any]:
    return {
        "target_key": key.as_str(),
        "merchant_id": key.merchant_id,
        "template_id": key.template_id,
        "category_path": list(category_path),
        "audience_segment": key.audience_segment,
        "voucher_fingerprint": key.voucher_fingerprint,
    }


def _empty_eval() -> dict[str, Any]:
    return {name: None for name in EVAL_FIELDS}


def outcome_row(outcome: RewriteOutcome, record: AggregatedPlanRecord) -> dict[str, Any]:
    diag = outcome.diagnosis
    row = _key_fields(outcome.target_key, record.category_path)
    row.update(
        {
            "path": outcome.routing.path.value,
            "skip_reason": outcome.routing.skip_reason,
            "exemplar_keys": list(outcome.routing.exemplar_keys),
            "original_title": outcome.original.title,
            "original_body": outcome.original.body,
            "generated_title": outcome.generated.title,
            "generated_body": outcome.generated.body,
            "diagnosis_success": diag.success_patterns if diag else None,
            "diagnosis_failure": diag.failure_reasons if diag else None,
            "rewrite_trace": [list(t) for t in outcome.provider_trace],
        }
    )
    row.update(_empty_eval())
    row.update({"error_type": None, "error_feedback": None, "failure_stage": None, "failure_reason": None})
    return row


def failure_row(failure: Failure, record: AggregatedPlanRecord) -> dict[str, Any]:
    row = _key_fields(failure.target_key, record.category_path)
    row.update(
        {
            "path": None,
            "skip_reason": None,
            "exemplar_keys": [],
            "original_title": record.template.title,
            "original_body": record.template.body,
            "generated_title": None,
            "generated_body": None,
            "diagnosis_success": None,
            "diagnosis_failure": None,
            "rewrite_trace": [],
        }
    )
    row.update(_empty_eval())
    row.update(
        {"error_type": None, "error_feedback": None, "failure_stage": failure.stage, "failure_reason": failure.reason}
    )
    return row


def outcome_from_row(row: Mapping[str, Any]) -> RewriteOutcome:
    key = RecordKey.from_str(row["target_key"])
    diag = None
    if row.get("diagnosis_success") is not None:
        diag = DiagnosisReport(key.audience_segment, row["diagnosis_success"], row["diagnosis_failure"])
    return RewriteOutcome(
        target_key=key,
        original=MessageTemplate(row["original_title"], row["original_body"]),
        generated=MessageTemplate(row["generated_title"], row["generated_body"]),
        routing=RoutingDecision(RoutePath(row["path"]), tuple(row["exemplar_keys"]), row.get("skip_reason")),
        diagnosis=diag,
        provider_trace=tuple(tuple(t) for t in row.get("rewrite_trace", [])),
    )


def is_rewritten(row: Mapping[str, Any]) -> bool:
    return row.get("generated_title") is not None and row.get("failure_stage") != "rewrite"


def apply_eval(row: dict[str, Any], result: EvalResult) -> None:
    s = result.scores
    row.update(
        {
            "generated_slot": result.generated_slot,
            "audience_score_a": s.audience_score_a,
            "audience_reason_a": s.audience_reason_a,
            "market_score_a": s.market_score_a,
            "market_reason_a": s.market_reason_a,
            "audience_score_b": s.audience_score_b,
            "audience_reason_b": s.audience_reason_b,
            "market_score_b": s.market_score_b,
            "market_reason_b": s.market_reason_b,
            "preferred": result.preference.preferred,
            "preference_reason": result.preference.reason,
            "chrf": result.chrf,
            "bertscore_f1": result.bertscore_f1,
            "eval_trace": [list(t) for t in result.provider_trace],
        }
    )


def eval_from_row(row: Mapping[str, Any]) -> EvalResult | None:
    if row.get("preferred") is None or row.get("audience_score_a") is None:
        return None
    scores = ScorePair(
        row["audience_score_a"],
        row["market_score_a"],
        row["audience_score_b"],
        row["market_score_b"],
        row["audience_reason_a"],
        row["market_reason_a"],
        row["audience_reason_b"],
        row["market_reason_b"],
    )
    return EvalResult(
        RecordKey.from_str(row["target_key"]),
        scores,
        PreferenceDecision(row["preferred"], row.get("preference_reason") or ""),
        float(row["chrf"]),
        float(row["bertscore_f1"]),
        row.get("generated_slot") or "B",
    )


# --- report ------------------------------------------------------------------

REPORT_FILES = ("segments.tsv", "similarity.tsv", "configuration.tsv", "errors.tsv", "report.md")


def _tsv(columns: Sequence[str], rows: Iterable[Sequence[str]], first_line: str) -> str:
    buf = io.StringIO()
    buf.write(f"# {first_line}\n")
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return buf.getvalue()


def _markdown(title: str, columns: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    lines = [f"## {title}", "", "| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def build_report(rows: Sequence[Mapping[str, Any]], config: PipelineConfig) -> dict[str, str]:
    """Render every report file from results rows; returns file name -> contents."""
    scored: list[ScoredRow] = []
    for row in rows:
        result = eval_from_row(row)
        if result is not None:
            scored.append(result.scored_row())
    reports = aggregate_segment_table(scored)
    labels = [ErrorType(r["error_type"]) for r in rows if r.get("error_type")]
    counts = error_distribution(labels)

    seg_rows = segment_table_rows(reports)
    sim_rows = similarity_table_rows(reports)
    models = (config.model_for("content"), config.model_for("template"), config.model_for("evaluate"))
    cfg_rows = config_table_rows(models, reports)
    err_rows = [[label, str(c), f"{pct:.2f}"] for label, c, pct in error_distribution_rows(counts)] if labels else []

    first = header_line(config)
    paths = {p.value: 0 for p in RoutePath}
    failures = 0
    for row in rows:
        if row.get("path") in paths:
            paths[row["path"]] += 1
        if row.get("failure_stage"):
            failures += 1
    summary = [
        f"<!-- {first} -->",
        "# CRM template rewrite report",
        "",
        f"- weak templates: {len(rows)}",
        f"- evaluated: {len(scored)}",
        f"- failures: {failures}",
        "- routing: " + ", ".join(f"{k}={v}" for k, v in paths.items()),
        "",
        _markdown("Scores by audience segment", SEGMENT_TABLE_COLUMNS, seg_rows),
        _markdown("Similarity to the original", SIMILARITY_TABLE_COLUMNS, sim_rows),
        _markdown("Model configuration", CONFIG_TABLE_COLUMNS, cfg_rows),
        _markdown("Template error types", ERROR_TABLE_COLUMNS, err_rows),
    ]
    return {
        "segments.tsv": _tsv(SEGMENT_TABLE_COLUMNS, seg_rows, first),
        "similarity.tsv": _tsv(SIMILARITY_TABLE_COLUMNS, sim_rows, first),
        "configuration.tsv": _tsv(CONFIG_TABLE_COLUMNS, cfg_rows, first),
        "errors.tsv": _tsv(ERROR_TABLE_COLUMNS, err_rows, first),
        "report.md": "\n".join(summary),
    }


def write_report(files: Mapping[str, str], directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (directory / name).write_text(text, encoding="utf-8")
