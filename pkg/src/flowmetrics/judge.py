"""Zero-shot trait scoring by a chat-capable LLM.

The judge renders a fixed grading template (rubric + topic + essay) into a
single user message, requests a near-deterministic generation (temperature
0.0001 by default), and parses the first in-scale standalone number from
the reply, preferring numbers that follow the word "score". Parse failures
retry with an appended clarification; exhausted retries leave the essay
unjudged rather than guessing.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path

from .corpus import PromptSpec, TraitScale
from .scoring import ProtocolError, TransportError

TEMPLATES = {
    "cohesion": (
        "You are an annotator highly competent in grading English essays. "
        "Your task is to grade the following essay, given the topic the essay "
        "was written on and a rubric to grade the essay.\n"
        "\n"
        "Rubric: {rubric}\n"
        "Topic: {topic}\n"
        "Essay: {essay}"
    ),
    "organization": (
        "You are an annotator highly competent in grading English essays. "
        "Your task is to grade the following essay, given the prompt used to "
        "write the essay and a rubric to grade the essay. Additionally "
        "consider that all the essays are anonymized. This means that the "
        "named entities (people, places, dates, times, organizations, etc.) "
        "are replaced by placeholders (Eg. @NAME1, @LOCATION1, etc.). In "
        "addition to this, capitalized phrases are anonymized as @CAP1, "
        "@CAP2, etc. These anonymizations should not affect your scoring. "
        "You are free to replace the anonymizations with any placeholders.\n"
        "\n"
        "Rubric: {rubric}\n"
        "Prompt: {topic}\n"
        "Essay: {essay}"
    ),
}

CLARIFICATION = "Respond with only the numeric score."


class TemplateError(ValueError):
    pass


class ScoreParseError(ValueError):
    """The generation contains no standalone in-scale number."""


@dataclass(frozen=True)
class RubricPrompt:
    template_id: str
    rubric_text: str
    topic_text: str
    essay_text: str
    rendered: str


@dataclass(frozen=True)
class JudgeConfig:
    scale: TraitScale
    temperature: float = 0.0001
    max_new_tokens: int = 64
    retries: int = 2

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


def render_prompt(template_id: str, rubric: str, topic: str, essay: str) -> RubricPrompt:
    """Substitute rubric/topic/essay into the named grading template.

    Each placeholder occurs exactly once in every template, so each
    component text lands in the rendering exactly once.
    """
    if template_id not in TEMPLATES:
        raise TemplateError(f"unknown template {template_id!r}; known: {sorted(TEMPLATES)}")
    template = TEMPLATES[template_id]
    for label, value in (("rubric", rubric), ("topic", topic), ("essay", essay)):
        if not value or not value.strip():
            raise ValueError(f"{label} text must be non-empty")
        if template.count("{%s}" % label) != 1:
            raise TemplateError(f"template {template_id!r} must use {{{label}}} exactly once")
    rendered = template.format(rubric=rubric, topic=topic, essay=essay)
    return RubricPrompt(template_id, rubric, topic, essay, rendered)


_NUMBER = re.compile(r"(?<![\w.])\d+(?:\.\d+)?(?![A-Za-z0-9])")
_SCORE_WORD = re.compile(r"score", re.IGNORECASE)


def parse_score(generation: str, scale: TraitScale) -> float:
    """Extract the first standalone in-scale number from a generation.

    Numbers appearing after the word "score" take precedence over earlier
    in-scale numbers.
    """
    candidates = [
        (m.start(), float(m.group(0)))
        for m in _NUMBER.finditer(generation)
        if scale.contains(float(m.group(0)))
    ]
    if not candidates:
        raise ScoreParseError(f"no in-scale number in generation: {generation[:200]!r}")
    score_positions = [m.start() for m in _SCORE_WORD.finditer(generation)]
    if score_positions:
        first_mention = min(score_positions)
        following = [(pos, val) for pos, val in candidates if pos > first_mention]
        if following:
            return following[0][1]
    return candidates[0][1]


# ---------------------------------------------------------------------------
# Generation backends
# ---------------------------------------------------------------------------

ENV_JUDGE_BASE_URL = "FLOWMETRICS_JUDGE_BASE_URL"
ENV_JUDGE_API_KEY = "FLOWMETRICS_JUDGE_API_KEY"


class HttpChatBackend:
    """Chat-completions client: one user message, first choice's text back."""

    def __init__(self, base_url: str, model_name: str, api_key: str | None = None,
                 timeout: float = 120.0, session=None):
        import requests

        self.base_url = base_url
        self.model_name = model_name
        self.backend_id = f"http-chat:{base_url}:{model_name}"
        self._api_key = api_key if api_key is not None else os.environ.get(ENV_JUDGE_API_KEY)
        self._timeout = timeout
        self._session = session or requests.Session()

    def generate(self, prompt: str, temperature: float, max_new_tokens: int) -> str:
        import requests

        payload = {
            "model": self.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "max_tokens": max_new_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        url = self.base_url.rstrip("/") + "/v1/chat/completions"
        try:
            resp = self._session.post(url, json=payload, headers=headers, timeout=self._timeout)
        except requests.RequestException as exc:
            raise TransportError(f"request to {url} failed: {exc}") from exc
        if resp.status_code >= 500:
            raise TransportError(f"endpoint returned {resp.status_code}")
        if resp.status_code != 200:
            raise ProtocolError(f"endpoint returned {resp.status_code}: {resp.text[:300]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed chat response: {exc}") from exc


class FunctionJudgeBackend:
    """Adapter for tests: any prompt -> str function."""

    def __init__(self, fn, backend_id: str = "mock-judge:function"):
        self._fn = fn
        self.backend_id = backend_id
        self.calls = 0

    def generate(self, prompt: str, temperature: float, max_new_tokens: int) -> str:
        self.calls += 1
        return self._fn(prompt)


class DeterministicMockJudge:
    """Scores deterministically from a hash of the prompt, for pipeline
    tests without any endpoint."""

    def __init__(self, levels):
        self.levels = [float(v) for v in levels]
        self.backend_id = f"mock-judge:hash:{len(self.levels)}"
        self.calls = 0

    def generate(self, prompt: str, temperature: float, max_new_tokens: int) -> str:
        self.calls += 1
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        level = self.levels[digest[0] % len(self.levels)]
        return f"Score: {level:g}"


class GenerationCache:
    """JSONL cache of raw generations keyed by (backend id, prompt hash)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._index: dict[tuple[str, str], str] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    self._index[(rec["backend_id"], rec["prompt_sha"])] = rec["generation"]

    def get(self, backend_id: str, prompt: str) -> str | None:
        key = (backend_id, hashlib.sha256(prompt.encode("utf-8")).hexdigest())
        return self._index.get(key)

    def put(self, backend_id: str, prompt: str, generation: str) -> None:
        sha = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        with self._lock:
            if (backend_id, sha) in self._index:
                return
            self._index[(backend_id, sha)] = generation
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(
                    json.dumps(
                        {"backend_id": backend_id, "prompt_sha": sha, "generation": generation},
                        sort_keys=True,
                    )
                    + "\n"
                )


class CachingJudgeBackend:
    def __init__(self, backend, cache: GenerationCache):
        self.backend = backend
        self.cache = cache
        self.backend_id = backend.backend_id
        self.hits = 0
        self.misses = 0

    def generate(self, prompt: str, temperature: float, max_new_tokens: int) -> str:
        cached = self.cache.get(self.backend_id, prompt)
        if cached is not None:
            self.hits += 1
            return cached
        out = self.backend.generate(prompt, temperature, max_new_tokens)
        self.cache.put(self.backend_id, prompt, out)
        self.misses += 1
        return out


# ---------------------------------------------------------------------------
# Judging
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeResult:
    essay_id: str
    trait: str
    score: float | None
    attempts: int
    generation_sha: str | None

    @property
    def judged(self) -> bool:
        return self.score is not None


def judge_essay(
    essay,
    prompt_spec: PromptSpec,
    trait: str,
    rubric_text: str,
    template_id: str,
    config: JudgeConfig,
    backend,
) -> JudgeResult:
    """Render, generate, parse; retry with a clarification on failure."""
    return judge_essay_text(
        essay_id=essay.essay_id,
        essay_text=essay.text,
        rubric_text=rubric_text,
        topic_text=prompt_spec.topic_text,
        trait=trait,
        template_id=template_id,
        config=config,
        backend=backend,
    )


def judge_essay_text(
    essay_id: str,
    essay_text: str,
    rubric_text: str,
    topic_text: str,
    trait: str,
    template_id: str,
    config: JudgeConfig,
    backend,
) -> JudgeResult:
    prompt = render_prompt(template_id, rubric_text, topic_text, essay_text)
    attempts = 0
    request_text = prompt.rendered
    last_generation = None
    while attempts <= config.retries:
        attempts += 1
        try:
            generation = backend.generate(request_text, config.temperature, config.max_new_tokens)
        except TransportError:
            continue
        last_generation = generation
        try:
            score = parse_score(generation, config.scale)
        except ScoreParseError:
            request_text = prompt.rendered + "\n\n" + CLARIFICATION
            continue
        return JudgeResult(
            essay_id=essay_id,
            trait=trait,
            score=score,
            attempts=attempts,
            generation_sha=hashlib.sha256(generation.encode("utf-8")).hexdigest(),
        )
    sha = (
        hashlib.sha256(last_generation.encode("utf-8")).hexdigest()
        if last_generation is not None
        else None
    )
    return JudgeResult(essay_id=essay_id, trait=trait, score=None, attempts=attempts,
                       generation_sha=sha)


def judge_dataset(
    dataset,
    trait: str,
    rubric_text: str,
    template_id: str,
    config: JudgeConfig,
    backend,
    max_workers: int = 1,
) -> list[JudgeResult]:
    """Judge every essay; results keep dataset order regardless of workers."""
    topics = {p.prompt_id: p.topic_text for p in dataset.prompts}

    def work(essay):
        return judge_essay_text(
            essay_id=essay.essay_id,
            essay_text=essay.text,
            rubric_text=rubric_text,
            topic_text=topics[essay.prompt_id],
            trait=trait,
            template_id=template_id,
            config=config,
            backend=backend,
        )

    if max_workers <= 1:
        return [work(essay) for essay in dataset.essays]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(work, dataset.essays))


def write_judge_csv(results: list[JudgeResult], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["essay_id", "trait", "judged_score", "attempts", "generation_sha"])
        for r in results:
            writer.writerow(
                [
                    r.essay_id,
                    r.trait,
                    "" if r.score is None else repr(r.score),
                    r.attempts,
                    r.generation_sha or "",
                ]
            )


def read_judge_csv(path: str | Path) -> dict[str, float]:
    """Judged scores by essay id; unjudged rows are omitted."""
    scores = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["judged_score"]:
                scores[row["essay_id"]] = float(row["judged_score"])
    return scores
