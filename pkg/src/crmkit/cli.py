"""Command-line entry point: synth, ingest, tier, rewrite, evaluate, report."""

from __future__ import annotations

import argparse
import fcntl
import json
import logging
import sys
from collections import Counter
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Sequence

from . import artifacts
from .config import PipelineConfig, load_config
from .engagement import apply_tiers, assign_tiers
from .ingestion import (
    AggregatedPlanRecord,
    Tier,
    aggregate_plans,
    count_dangling,
    gen_synthetic_corpus,
    parse_logs,
    read_jsonl,
    write_jsonl,
)
from .orchestrator import (
    TieredCorpus,
    build_strong_index,
    classify_target,
    run_evaluations,
    run_rewrites,
)
from .providers import HttpProvider, Provider, ProviderExhausted, ScriptedProvider, synthetic_response
from .retrieval import EmbeddingCache, HashEmbedder, write_index

logger = logging.getLogger("crmkit")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PROVIDER = 3


class CommandError(RuntimeError):
    def __init__(self, message: str, exit_code: int = EXIT_USAGE) -> None:
        super().__init__(message)
        self.exit_code = exit_code


@contextmanager
def artifact_lock(workdir: Path) -> Iterator[None]:
    workdir.mkdir(parents=True, exist_ok=True)
    with open(workdir / ".crmkit.lock", "w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise CommandError(f"{workdir} is in use by another crmkit process") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


class Context:
    def __init__(self, config: PipelineConfig, workdir: Path) -> None:
        self.config = config
        self.workdir = workdir

    def path(self, name: str) -> Path:
        p = Path(getattr(self.config.paths, name))
        return p if p.is_absolute() else self.workdir / p

    def require(self, name: str, stage: str | None = None) -> Path:
        p = self.path(name)
        if not p.is_file():
            hint = f" (run `{stage}` first)" if stage else ""
            raise CommandError(f"{p.name} not found: no such input {p}{hint}")
        return p

    def write_jsonl(self, name: str, rows: Sequence[dict]) -> Path:
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            write_jsonl(fh, rows, artifacts.header(self.config))
        return p

    def read_jsonl(self, name: str, stage: str | None = None) -> list[dict]:
        with open(self.require(name, stage), encoding="utf-8") as fh:
            return read_jsonl(fh)

    def provider(self) -> Provider:
        pc = self.config.provider
        if pc.kind == "http":
            if not pc.endpoint:
                raise CommandError("provider kind 'http' needs an endpoint")
            return HttpProvider(pc.endpoint, pc.api_key_env, pc.timeout_seconds)
        fallback = synthetic_response if pc.fallback == "synthetic" else None
        if pc.fixtures:
            fixtures = Path(pc.fixtures)
            if not fixtures.is_absolute():
                fixtures = self.workdir / fixtures
            if not fixtures.is_file():
                raise CommandError(f"no such input {fixtures}")
            return ScriptedProvider.from_file(fixtures, fallback)
        return ScriptedProvider(fallback=fallback)


def _load_records(ctx: Context) -> list[AggregatedPlanRecord]:
    return [AggregatedPlanRecord.from_json(r) for r in ctx.read_jsonl("aggregated", "ingest")]


# --- commands ----------------------------------------------------------------


def cmd_synth(ctx: Context, args: argparse.Namespace) -> int:
    cfg = ctx.config
    try:
        events, plans = gen_synthetic_corpus(
            cfg.seed, cfg.n_merchants, cfg.n_plans, missing_metadata_fraction=cfg.missing_metadata_fraction
        )
    except ValueError as exc:
        raise CommandError(f"precondition failed: {exc}") from exc
    ctx.write_jsonl("events", [e.to_json() for e in events])
    ctx.write_jsonl("plans", [p.to_json() for p in plans])
    print(f"synth: plans={len(plans)} events={len(events)} seed={cfg.seed}")
    return EXIT_OK


def cmd_ingest(ctx: Context, args: argparse.Namespace) -> int:
    events_path = ctx.require("events")
    plans_path = ctx.require("plans")
    try:
        with open(events_path, encoding="utf-8") as ev, open(plans_path, encoding="utf-8") as pl:
            parsed = parse_logs(ev, pl)
    except (OSError, UnicodeDecodeError) as exc:
        raise CommandError(f"cannot read input: {exc}") from exc
    records = aggregate_plans(parsed.events, parsed.plans, ctx.config.window_days)
    dangling = count_dangling(parsed.events, parsed.plans)
    ctx.write_jsonl("aggregated", [r.to_json() for r in records])
    ctx.write_jsonl("rejections", [r.to_json() for r in parsed.rejections])
    print(
        f"ingest: events={len(parsed.events)} plans={len(parsed.plans)} "
        f"rejected={len(parsed.rejections)} dangling={dangling} records={len(records)}"
    )
    for rej in parsed.rejections[:20]:
        print(f"  rejected {rej.stream}:{rej.line_no}: {rej.reason}")
    return EXIT_OK


def cmd_tier(ctx: Context, args: argparse.Namespace) -> int:
    records = _load_records(ctx)
    assignments = assign_tiers(records, ctx.config.quartile_fraction)
    tiered = apply_tiers(records, assignments)
    ctx.write_jsonl("aggregated", [r.to_json() for r in tiered])
    total_strong = total_weak = 0
    for a in assignments:
        print(f"{a.segment}\tstrong={len(a.strong_ids)}\tweak={len(a.weak_ids)}")
        total_strong += len(a.strong_ids)
        total_weak += len(a.weak_ids)
    print(f"tier: records={len(tiered)} strong={total_strong} weak={total_weak}")
    if records and total_strong == 0:
        print("warning: every segment has fewer than 4 records; nothing was tiered", file=sys.stderr)
    return EXIT_OK


def cmd_rewrite(ctx: Context, args: argparse.Namespace) -> int:
    records = _load_records(ctx)
    if records and all(r.tier is Tier.UNASSIGNED for r in records):
        raise CommandError("aggregated.jsonl has no tiers (run `tier` first)")
    cfg = ctx.config
    corpus = TieredCorpus(records)
    embedder = HashEmbedder(cfg.embed_dimension)
    cache_path = ctx.path("embedding_cache")
    cache = EmbeddingCache.load(cache_path, cfg.embed_dimension) if cache_path.is_file() else EmbeddingCache(cfg.embed_dimension)
    index = build_strong_index(corpus, embedder, cache)
    if index is not None:
        write_index(index, ctx.path("index"))
        cache.save(cache_path)
    outcomes, failures = run_rewrites(corpus, cfg, ctx.provider(), index, embedder)
    by_key = {r.key: r for r in corpus.records}
    rows = [artifacts.outcome_row(o, by_key[o.target_key]) for o in outcomes]
    rows += [artifacts.failure_row(f, by_key[f.target_key]) for f in failures]
    rows.sort(key=lambda r: r["target_key"])
    ctx.write_jsonl("results", rows)
    paths = Counter(o.routing.path.value for o in outcomes)
    print(
        f"rewrite: weak={len(corpus.weak)} rewritten={len(outcomes)} failed={len(failures)} "
        + " ".join(f"{k}={paths.get(k, 0)}" for k in ("in_group", "cross_merchant", "rule_based"))
    )
    return EXIT_PROVIDER if any(f.exhausted for f in failures) else EXIT_OK


def cmd_evaluate(ctx: Context, args: argparse.Namespace) -> int:
    rows = ctx.read_jsonl("results", "rewrite")
    cfg = ctx.config
    provider = ctx.provider()
    pending = [artifacts.outcome_from_row(r) for r in rows if artifacts.is_rewritten(r)]
    evals, failures = run_evaluations(pending, cfg, provider)
    eval_by_key = {e.target_key.as_str(): e for e in evals}
    fail_by_key = {f.target_key.as_str(): f for f in failures}
    exhausted = any(f.exhausted for f in failures)
    for row in rows:
        key = row["target_key"]
        if key in eval_by_key:
            artifacts.apply_eval(row, eval_by_key[key])
            row["failure_stage"] = row["failure_reason"] = None
        elif key in fail_by_key:
            row.update(artifacts._empty_eval())
            row["failure_stage"] = "evaluate"
            row["failure_reason"] = fail_by_key[key].reason
        if cfg.classify_errors:
            exhausted |= _classify_row(row, provider, cfg)
    ctx.write_jsonl("results", rows)
    print(f"evaluate: evaluated={len(evals)} failed={len(failures)}")
    return EXIT_PROVIDER if exhausted else EXIT_OK


def _classify_row(row: dict[str, Any], provider: Provider, cfg: PipelineConfig) -> bool:
    from .agents import ResponseError
    from .ingestion import MessageTemplate, RecordKey

    key = RecordKey.from_str(row["target_key"])
    original = MessageTemplate(row["original_title"], row["original_body"])
    try:
        label, feedback = classify_target(key, original, provider, cfg, row.get("category_path") or ())
    except ProviderExhausted as exc:
        row["error_type"], row["error_feedback"] = None, f"classification failed: {exc}"
        return True
    except (ResponseError, ValueError) as exc:
        row["error_type"], row["error_feedback"] = None, f"classification failed: {exc}"
        return False
    row["error_type"], row["error_feedback"] = label.value, feedback
    return False


def cmd_report(ctx: Context, args: argparse.Namespace) -> int:
    rows = ctx.read_jsonl("results", "rewrite")
    files = artifacts.build_report(rows, ctx.config)
    out = ctx.path("report_dir")
    artifacts.write_report(files, out)
    evaluated = sum(1 for r in rows if artifacts.eval_from_row(r) is not None)
    print(f"report: rows={len(rows)} evaluated={evaluated} -> {out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "tier": cmd_tier,
    "rewrite": cmd_rewrite,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}

# flag dest -> dotted config key
_OVERRIDES = {
    "seed": "seed",
    "window_days": "window_days",
    "quartile_fraction": "quartile_fraction",
    "embed_dimension": "embed_dimension",
    "top_k": "top_k",
    "min_similarity": "min_similarity",
    "workers": "workers",
    "n_plans": "n_plans",
    "n_merchants": "n_merchants",
    "missing_metadata_fraction": "missing_metadata_fraction",
    "char_order": "chrf.char_order",
    "word_order": "chrf.word_order",
    "beta": "chrf.beta",
    "provider_kind": "provider.kind",
    "endpoint": "provider.endpoint",
    "model_id": "provider.model_id",
    "fixtures": "provider.fixtures",
    "max_retries": "provider.max_retries",
    "template_prompt_set": "template_prompt_set",
    "evaluate_prompt_set": "evaluate_prompt_set",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--workdir", help="artifact directory (default: current)")
    common.add_argument("--seed", type=int)
    common.add_argument("--window-days", type=int)
    common.add_argument("--quartile-fraction", type=float)
    common.add_argument("--embed-dimension", type=int)
    common.add_argument("--top-k", type=int)
    common.add_argument("--min-similarity", type=float)
    common.add_argument("--workers", type=int)
    common.add_argument("--char-order", type=int)
    common.add_argument("--word-order", type=int)
    common.add_argument("--beta", type=float)
    common.add_argument("--provider-kind", choices=("scripted", "http"))
    common.add_argument("--endpoint")
    common.add_argument("--model-id")
    common.add_argument("--fixtures", help="scripted provider fixture file")
    common.add_argument("--max-retries", type=int)
    common.add_argument("--template-prompt-set")
    common.add_argument("--evaluate-prompt-set")
    common.add_argument("--randomize-slots", action="store_true")
    common.add_argument("--no-classify", dest="classify_errors", action="store_false")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="crmkit", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic events/plans corpus")
    sub.add_parser("ingest", parents=[common], help="parse logs and aggregate per plan key")
    sub.add_parser("tier", parents=[common], help="assign strong/middle/weak tiers per segment")
    sub.add_parser("rewrite", parents=[common], help="route and rewrite weak templates")
    sub.add_parser("evaluate", parents=[common], help="score, compare, and classify rewrites")
    sub.add_parser("report", parents=[common], help="write segment, similarity, and error tables")
    for name in ("synth",):
        p = sub.choices[name]
        p.add_argument("--n-plans", type=int)
        p.add_argument("--n-merchants", type=int)
        p.add_argument("--missing-metadata-fraction", type=float)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides: dict[str, Any] = {
        dotted: getattr(args, dest) for dest, dotted in _OVERRIDES.items() if getattr(args, dest, None) is not None
    }
    if getattr(args, "randomize_slots", False):
        overrides["randomize_slots"] = True
    if getattr(args, "classify_errors", True) is False:
        overrides["classify_errors"] = False
    try:
        config = load_config(getattr(args, "config", None), overrides)
    except FileNotFoundError as exc:
        print(f"error: no such input {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    ctx = Context(config, Path(getattr(args, "workdir", ".")))
    try:
        with artifact_lock(ctx.workdir):
            return COMMANDS[args.command](ctx, args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
