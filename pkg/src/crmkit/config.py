"""Pipeline configuration: JSON file plus command-line overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .metrics import ChrfParams


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "scripted"  # "scripted" | "http"
    endpoint: str | None = None
    model_id: str = "scripted"
    api_key_env: str = "CRMKIT_API_KEY"
    temperature: float = 0.0
    max_retries: int = 3
    backoff_seconds: float = 0.5
    timeout_seconds: float = 60.0
    fixtures: str | None = None
    fallback: str = "synthetic"  # "synthetic" | "none"
    single_flight: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("scripted", "http"):
            raise ValueError(f"provider kind must be 'scripted' or 'http', got {self.kind!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.fallback not in ("synthetic", "none"):
            raise ValueError("fallback must be 'synthetic' or 'none'")


@dataclass(frozen=True)
class Paths:
    events: str = "events.jsonl"
    plans: str = "plans.jsonl"
    aggregated: str = "aggregated.jsonl"
    rejections: str = "rejections.jsonl"
    index: str = "strong.idx"
    embedding_cache: str = "strong.idx.cache.npz"
    results: str = "results.jsonl"
    report_dir: str = "report"


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 42
    window_days: int = 7
    quartile_fraction: float = 0.25
    embed_dimension: int = 256
    top_k: int = 3
    min_similarity: float = 0.30
    chrf: ChrfParams = field(default_factory=ChrfParams)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    content_model: str | None = None
    template_model: str | None = None
    evaluate_model: str | None = None
    template_prompt_set: str = "default"
    evaluate_prompt_set: str = "default"
    randomize_slots: bool = False
    classify_errors: bool = True
    workers: int = 4
    n_merchants: int = 50
    n_plans: int = 2000
    missing_metadata_fraction: float = 0.15
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self) -> None:
        if self.window_days < 1:
            raise ValueError("window_days must be >= 1")
        if not 0 < self.quartile_fraction <= 0.5:
            raise ValueError("quartile_fraction must be in (0, 0.5]")
        if self.embed_dimension < 8:
            raise ValueError("embed_dimension must be >= 8")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not -1.0 <= self.min_similarity <= 1.0:
            raise ValueError("min_similarity must be in [-1, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def model_for(self, agent: str) -> str:
        value = getattr(self, f"{agent}_model")
        return value or self.provider.model_id

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


_NESTED = {"chrf": ChrfParams, "provider": ProviderConfig, "paths": Paths}


def _build(cls: type, data: Mapping[str, Any], where: str) -> Any:
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {where} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        nested = _NESTED.get(key) if cls is PipelineConfig else None
        kwargs[key] = _build(nested, value, key) if nested else value
    return cls(**kwargs)


def config_from_dict(data: Mapping[str, Any]) -> PipelineConfig:
    return _build(PipelineConfig, data, "config")


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Read the JSON config (if any) and apply dotted-key overrides; overrides win."""
    data: dict[str, Any] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("config file must hold a JSON object")
    cfg = config_from_dict(data)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        head, _, tail = dotted.partition(".")
        if tail:
            cfg = replace(cfg, **{head: replace(getattr(cfg, head), **{tail: value})})
        else:
            cfg = replace(cfg, **{head: value})
    return cfg
