"""Text-in/text-out model providers: scripted (deterministic) and HTTP."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol

import httpx

from .agents import PromptBundle, PromptKind

logger = logging.getLogger(__name__)

WILDCARD = "*"


class ProviderError(RuntimeError):
    """Transport-level failure; retried by :func:`call_with_retries`."""


class ProviderExhausted(ProviderError):
    def __init__(self, attempts: int, last: Exception) -> None:
        self.attempts = attempts
        self.last = last
        super().__init__(f"provider failed after {attempts} attempts: {last}")


@dataclass(frozen=True)
class ProviderRequest:
    prompt: PromptBundle
    model_id: str = "scripted"
    temperature: float = 0.0
    max_retries: int = 3
    target_key: str = ""


class Provider(Protocol):
    single_flight: bool

    def complete(self, request: ProviderRequest) -> str: ...


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def call_with_retries(
    provider: Provider,
    request: ProviderRequest,
    backoff_seconds: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Call ``provider`` with up to ``request.max_retries`` retries and exponential backoff."""
    attempts = request.max_retries + 1
    last: Exception | None = None
    for attempt in range(attempts):
        try:
            return provider.complete(request)
        except ProviderError as exc:
            last = exc
            if attempt + 1 < attempts:
                delay = backoff_seconds * (2**attempt)
                logger.warning("provider call failed (%s); retrying in %.2fs", exc, delay)
                sleep(delay)
    assert last is not None
    raise ProviderExhausted(attempts, last)


# --- scripted ----------------------------------------------------------------


class ScriptedProvider:
    """Answers from fixtures keyed by (prompt kind, target key), then by prompt digest.

    A target key of ``"*"`` matches any target for that prompt kind. Prompts with
    no fixture go to ``fallback``; without one, the call fails.
    """

    single_flight = False

    def __init__(
        self,
        fixtures: Mapping[tuple[str, str], str] | None = None,
        digests: Mapping[str, str] | None = None,
        fallback: Callable[[ProviderRequest], str] | None = None,
    ) -> None:
        self.fixtures = dict(fixtures or {})
        self.digests = dict(digests or {})
        self.fallback = fallback

    def complete(self, request: ProviderRequest) -> str:
        kind = request.prompt.prompt_kind.value
        for key in ((kind, request.target_key), (kind, WILDCARD)):
            if key in self.fixtures:
                return self.fixtures[key]
        by_digest = self.digests.get(digest(request.prompt.rendered_text))
        if by_digest is not None:
            return by_digest
        if self.fallback is not None:
            return self.fallback(request)
        raise ProviderError(f"no scripted response for {kind} / {request.target_key}")

    @classmethod
    def from_file(cls, path: str | Path, fallback: Callable[[ProviderRequest], str] | None = None) -> ScriptedProvider:
        """Load ``{"responses": [{prompt_kind, target_key, response}], "digests": {sha256: text}}``."""
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        fixtures = {
            (item["prompt_kind"], item.get("target_key", WILDCARD)): item["response"]
            for item in data.get("responses", [])
        }
        return cls(fixtures, data.get("digests", {}), fallback)


_SUCCESS_PHRASES = (
    "High performers lead with a concrete benefit and a time limit.",
    "Strong templates name the discount amount and close with a direct call to action.",
    "Successful messages are short, mention the product category, and create urgency.",
    "Top templates frame the voucher as exclusive and tell the reader exactly what to do next.",
)
_FAILURE_PHRASES = (
    "The weak template is generic and gives no reason to act now.",
    "The low performer hides the incentive and has no clear next step.",
    "The message assumes familiarity the audience does not have and lacks urgency.",
    "The copy is long, vague about the offer, and ends without a call to action.",
)
_REWRITE_TITLES = (
    "Limited-Time Deals Inside!",
    "Don't Miss Out - Today Only!",
    "Your Exclusive Offer Is Here!",
    "Hurry, Top Picks Are Going Fast!",
    "Save Big Before It Ends!",
)
_CALLS_TO_ACTION = (
    "Shop now before it's gone!",
    "Grab yours today!",
    "Tap to claim your deal now!",
    "Don't wait - order today!",
)


def _draw(rng: random.Random, weights: tuple[float, float, float]) -> int:
    return rng.choices((1, 3, 5), weights)[0]


def _split_message(text: str) -> tuple[str, str]:
    title, _, body = text.partition("\n\n")
    return title.strip(), body.strip()


def _heuristic_error(template: str, audience: str) -> tuple[str, str]:
    text = template.lower()
    newcomer = audience.lower().startswith(("potential new", "new follower", "new buyer"))
    loyal = audience.lower().startswith(("active old", "frequent", "repeat", "post-purchase"))
    if newcomer and re.search(r"been a while|missed you|welcome back|again", text):
        return "Audience Assumption Error", "Implies a prior relationship that does not exist."
    if loyal and re.search(r"first[- ]order|first purchase|new customer", text):
        return "Irrelevant Offer", "This audience is not new; avoid first-order wording."
    if re.search(r"special offer|deal|something for you", text) and not re.search(r"\d", text):
        return "Vague Incentive", "Mentions a promotion without saying what it is."
    if not re.search(r"\b(now|today|hurry|before)\b", text):
        return "Weak Call-to-Action", "No clear or time-sensitive prompt to act."
    return "Misaligned Tone", "Tone does not match the audience's familiarity level."


def synthetic_response(request: ProviderRequest) -> str:
    """Deterministic, well-formed stand-in answer for any prompt kind."""
    bundle = request.prompt
    seed = int(digest(bundle.rendered_text)[:16], 16)
    rng = random.Random(seed)
    slots = bundle.placeholders_filled
    kind = bundle.prompt_kind
    if kind is PromptKind.CONTENT_DIAGNOSIS:
        return (
            f"Success Patterns: {rng.choice(_SUCCESS_PHRASES)}\n"
            f"Failure Reasons: {rng.choice(_FAILURE_PHRASES)}\n"
        )
    if kind in (PromptKind.EXEMPLAR_REWRITE, PromptKind.RULE_REWRITE):
        source = slots.get("poor_template") or slots.get("original") or ""
        _, body = _split_message(source)
        body = body.rstrip(" .!?") or "Discover our bestsellers"
        return (
            f"Generated Title: {rng.choice(_REWRITE_TITLES)}\n"
            f"Generated Body: {body}! {rng.choice(_CALLS_TO_ACTION)}\n"
        )
    if kind is PromptKind.SCORING:
        return (
            f"Audience Match Score A: {_draw(rng, (0.25, 0.45, 0.30))}\n"
            "Audience Match Reason A: Message A is only loosely tailored to this audience.\n\n"
            f"Marketing Score A: {_draw(rng, (0.30, 0.50, 0.20))}\n"
            "Marketing Reason A: The offer is present but the call to action is weak.\n\n"
            f"Audience Match Score B: {_draw(rng, (0.05, 0.25, 0.70))}\n"
            "Audience Match Reason B: Message B speaks directly to this audience.\n\n"
            f"Marketing Score B: {_draw(rng, (0.02, 0.18, 0.80))}\n"
            "Marketing Reason B: Clear benefit, urgency, and a direct call to action.\n"
        )
    if kind is PromptKind.COMPARISON:
        choice = "B" if rng.random() < 0.8 else "A"
        return f"Preferred Message: {choice}\nReason: Message {choice} is clearer and more persuasive for this segment.\n"
    if kind is PromptKind.ERROR_REVIEW:
        label, feedback = _heuristic_error(slots.get("template", ""), slots.get("audience", ""))
        return f"Error Type: {label}\nFeedback: {feedback}\n"
    raise ProviderError(f"no synthetic response for {kind}")


# --- HTTP --------------------------------------------------------------------


class HttpProvider:
    """OpenAI-style ``/chat/completions`` client. The API key comes from the environment."""

    single_flight = False

    def __init__(
        self,
        endpoint: str,
        api_key_env: str = "CRMKIT_API_KEY",
        timeout_seconds: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.api_key_env = api_key_env
        self._client = httpx.Client(timeout=timeout_seconds, transport=transport)

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.api_key_env)
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, request: ProviderRequest) -> str:
        payload = {
            "model": request.model_id,
            "temperature": request.temperature,
            "messages": [{"role": "user", "content": request.prompt.rendered_text}],
        }
        try:
            resp = self._client.post(f"{self.endpoint}/chat/completions", json=payload, headers=self._headers())
        except httpx.HTTPError as exc:
            raise ProviderError(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise ProviderError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed completion payload: {exc}") from exc

    def close(self) -> None:
        self._client.close()
