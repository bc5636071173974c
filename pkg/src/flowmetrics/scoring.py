"""Per-token log-probability scoring of a target string under conditioning.

A scoring backend takes a full text and returns one log-probability per
token, with character offsets (the echo-style completions interface of
common local inference servers). ``score_target`` joins conditioning and
target, scores the concatenation, keeps only the tokens that fall in the
target region, and reduces them to a mean per-token negative
log-likelihood.

Scoring a large corpus is expensive, so an on-disk JSONL cache keyed by
(backend id, conditioning hash, target hash) makes reruns free; cached and
uncached calls return bit-identical results.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable


class TransportError(RuntimeError):
    """Endpoint unreachable, timed out, or returned a server error. Retryable."""


class ProtocolError(RuntimeError):
    """Endpoint response is missing tokens, logprobs, or character offsets."""


class ContextOverflowError(RuntimeError):
    """Combined token length exceeds the backend's context window."""

    def __init__(self, message: str, token_count: int | None = None, limit: int | None = None):
        super().__init__(message)
        self.token_count = token_count
        self.limit = limit


class AlignmentError(RuntimeError):
    """No tokens could be assigned to the requested span."""


@dataclass(frozen=True)
class TokenLogprob:
    token_text: str
    char_start: int
    logprob: float


@dataclass(frozen=True)
class ScoredText:
    conditioning: str
    target: str
    tokens: tuple[TokenLogprob, ...]
    nll: float

    @property
    def token_count(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class LmEndpointConfig:
    base_url: str
    model_name: str
    max_context_tokens: int = 4096
    request_timeout: float = 120.0
    max_inflight: int = 1

    def __post_init__(self):
        if self.max_inflight < 1:
            raise ValueError("max_inflight must be >= 1")


@runtime_checkable
class ScoringBackend(Protocol):
    backend_id: str
    max_context_tokens: int | None

    def score(self, text: str) -> list[TokenLogprob]:
        """Return one TokenLogprob per token of ``text``, covering it exactly."""
        ...


def join_context(conditioning: str, target: str) -> tuple[str, int]:
    """Concatenate conditioning and target, inserting a single separating
    space when the conditioning is non-empty and does not end in whitespace.

    Returns (full_text, target_start_offset).
    """
    if conditioning and not conditioning[-1].isspace():
        full = conditioning + " " + target
        return full, len(conditioning) + 1
    return conditioning + target, len(conditioning)


def assign_tokens_to_span(
    all_tokens: list[TokenLogprob] | tuple[TokenLogprob, ...],
    span: tuple[int, int],
    text_length: int | None = None,
) -> list[TokenLogprob]:
    """Select the tokens belonging to a character span.

    A token belongs if its char_start lies within the span; a token
    straddling the span's start boundary is included iff the majority of
    its characters fall inside.
    """
    start, end = span
    if start < 0 or end < start or (text_length is not None and end > text_length):
        raise ValueError(f"span ({start},{end}) outside scored string")

    picked = []
    for tok in all_tokens:
        tok_end = tok.char_start + len(tok.token_text)
        if start <= tok.char_start < end:
            picked.append(tok)
        elif tok.char_start < start < tok_end:
            inside = min(tok_end, end) - start
            if 2 * inside > len(tok.token_text):
                picked.append(tok)
    if not picked:
        raise AlignmentError(f"no tokens assigned to span ({start},{end})")
    return picked


def _validate_token_stream(tokens: list[TokenLogprob], text: str) -> None:
    pos = 0
    for tok in tokens:
        if tok.char_start != pos:
            raise ProtocolError(
                f"token offsets do not tile the text: expected {pos}, got {tok.char_start}"
            )
        pos += len(tok.token_text)
    if pos != len(text):
        raise ProtocolError(f"tokens cover {pos} chars of a {len(text)}-char text")


def score_target(conditioning: str, target: str, backend: ScoringBackend) -> ScoredText:
    """Score ``target`` under ``conditioning`` and return its mean NLL.

    The NLL is the mean of -logprob over the tokens assigned to the target
    region of the concatenated text. Deterministic for a fixed backend.
    """
    if not target:
        raise ValueError("target must be non-empty")
    full, target_start = join_context(conditioning, target)
    all_tokens = backend.score(full)
    _validate_token_stream(all_tokens, full)
    tokens = assign_tokens_to_span(all_tokens, (target_start, len(full)), len(full))
    for tok in tokens:
        if not math.isfinite(tok.logprob):
            raise ProtocolError(f"non-finite logprob for target token {tok.token_text!r}")
    nll = -sum(t.logprob for t in tokens) / len(tokens)
    return ScoredText(conditioning=conditioning, target=target, tokens=tuple(tokens), nll=nll)


# ---------------------------------------------------------------------------
# Response cache
# ---------------------------------------------------------------------------


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _scored_to_jsonable(scored: ScoredText) -> dict:
    return {
        "conditioning": scored.conditioning,
        "target": scored.target,
        "tokens": [[t.token_text, t.char_start, t.logprob] for t in scored.tokens],
        "nll": scored.nll,
    }


def _scored_from_jsonable(d: dict) -> ScoredText:
    return ScoredText(
        conditioning=d["conditioning"],
        target=d["target"],
        tokens=tuple(TokenLogprob(t, int(s), float(lp)) for t, s, lp in d["tokens"]),
        nll=float(d["nll"]),
    )


class ResponseCache:
    """Append-only JSONL cache of ScoredText values, one record per line.

    Keys are (backend_id, sha256(conditioning), sha256(target)). Floats
    round-trip bit-exactly through JSON's repr-based encoding.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._index: dict[tuple[str, str, str], ScoredText] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    key = (rec["backend_id"], rec["conditioning_sha"], rec["target_sha"])
                    self._index[key] = _scored_from_jsonable(rec["value"])

    def __len__(self) -> int:
        return len(self._index)

    def get(self, backend_id: str, conditioning: str, target: str) -> ScoredText | None:
        return self._index.get((backend_id, _sha(conditioning), _sha(target)))

    def put(self, backend_id: str, scored: ScoredText) -> None:
        key = (backend_id, _sha(scored.conditioning), _sha(scored.target))
        rec = {
            "backend_id": key[0],
            "conditioning_sha": key[1],
            "target_sha": key[2],
            "value": _scored_to_jsonable(scored),
        }
        with self._lock:
            if key in self._index:
                return
            self._index[key] = scored
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


class CachingBackend:
    """Wrap score_target calls with a ResponseCache.

    Not itself a ScoringBackend: caching keys on (conditioning, target)
    pairs, which only exist at the score_target level.
    """

    def __init__(self, backend: ScoringBackend, cache: ResponseCache):
        self.backend = backend
        self.cache = cache
        self.hits = 0
        self.misses = 0

    @property
    def backend_id(self) -> str:
        return self.backend.backend_id

    def score_target(self, conditioning: str, target: str) -> ScoredText:
        cached = self.cache.get(self.backend.backend_id, conditioning, target)
        if cached is not None:
            self.hits += 1
            return cached
        scored = score_target(conditioning, target, self.backend)
        self.cache.put(self.backend.backend_id, scored)
        self.misses += 1
        return scored


# ---------------------------------------------------------------------------
# HTTP completions backend
# ---------------------------------------------------------------------------

ENV_BASE_URL = "FLOWMETRICS_LM_BASE_URL"
ENV_API_KEY = "FLOWMETRICS_LM_API_KEY"


class HttpCompletionsBackend:
    """Client for a completions-style endpoint that echoes input logprobs.

    Request: POST {base_url}/v1/completions with
    {model, prompt, echo: true, max_tokens: 0, logprobs: true}.
    The response must carry token strings, token logprobs, and character
    offsets under choices[0].logprobs.{tokens, token_logprobs, text_offset}.
    """

    def __init__(self, config: LmEndpointConfig, api_key: str | None = None, session=None):
        import requests

        self.config = config
        self.backend_id = f"http:{config.base_url}:{config.model_name}"
        self.max_context_tokens = config.max_context_tokens
        self._api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY)
        self._session = session or requests.Session()
        self._semaphore = threading.Semaphore(config.max_inflight)

    @classmethod
    def from_environment(cls, model_name: str, **kwargs) -> "HttpCompletionsBackend":
        base_url = os.environ.get(ENV_BASE_URL)
        if not base_url:
            raise ValueError(f"environment variable {ENV_BASE_URL} is not set")
        return cls(LmEndpointConfig(base_url=base_url, model_name=model_name, **kwargs))

    def score(self, text: str) -> list[TokenLogprob]:
        import requests

        payload = {
            "model": self.config.model_name,
            "prompt": text,
            "echo": True,
            "max_tokens": 0,
            "logprobs": True,
        }
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        url = self.config.base_url.rstrip("/") + "/v1/completions"
        with self._semaphore:
            try:
                resp = self._session.post(
                    url, json=payload, headers=headers, timeout=self.config.request_timeout
                )
            except requests.RequestException as exc:
                raise TransportError(f"request to {url} failed: {exc}") from exc
        if resp.status_code == 400 and "context" in resp.text.lower():
            raise ContextOverflowError(f"endpoint rejected request: {resp.text[:500]}")
        if resp.status_code >= 500:
            raise TransportError(f"endpoint returned {resp.status_code}: {resp.text[:500]}")
        if resp.status_code != 200:
            raise ProtocolError(f"endpoint returned {resp.status_code}: {resp.text[:500]}")
        return self._parse_response(resp.json(), text)

    @staticmethod
    def _parse_response(body: dict, text: str) -> list[TokenLogprob]:
        try:
            lp = body["choices"][0]["logprobs"]
            token_texts = lp["tokens"]
            logprobs = lp["token_logprobs"]
            offsets = lp["text_offset"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"response missing logprob fields: {exc}") from exc
        if offsets is None:
            raise ProtocolError("endpoint returned tokens without character offsets")
        if not (len(token_texts) == len(logprobs) == len(offsets)):
            raise ProtocolError("tokens, logprobs, and offsets have mismatched lengths")
        tokens = []
        for tok, logprob, off in zip(token_texts, logprobs, offsets):
            if logprob is None:
                # First token of an unconditioned text has no logprob; give it
                # a stand-in that will fail loudly if it lands in a target.
                logprob = float("nan")
            tokens.append(TokenLogprob(tok, int(off), float(logprob)))
        _validate_token_stream(tokens, text)
        return tokens
