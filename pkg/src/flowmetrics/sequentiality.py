"""Per-sentence narrative-flow metrics from LM log-probabilities.

For sentence i of an essay, two mean per-token NLLs are computed: one
conditioned on the writing topic alone, and one conditioned on the topic
followed by all preceding sentences. Their difference (topic minus
context) is the sentence's flow score: positive values mean the
accumulated context made the sentence more predictable than the topic
alone did. An essay aggregates to the mean over its sentences.

Sentence 0 has no preceding context, so both conditionings coincide and
its difference is exactly zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .corpus import Dataset, EssayRecord
from .scoring import CachingBackend, ContextOverflowError, ScoringBackend, score_target


class SequentialityError(RuntimeError):
    """Scoring failed for one sentence; carries essay id and sentence index."""

    def __init__(self, essay_id: str, sentence_index: int, cause: Exception):
        super().__init__(f"essay {essay_id!r}, sentence {sentence_index}: {cause}")
        self.essay_id = essay_id
        self.sentence_index = sentence_index
        self.cause = cause


@dataclass(frozen=True)
class SentenceSequentiality:
    essay_id: str
    sentence_index: int
    nll_topic: float
    nll_context: float
    delta: float
    token_count: int
    truncated: bool = False
    dropped_context_sentences: int = 0


@dataclass(frozen=True)
class EssaySequentiality:
    essay_id: str
    mean_nll_topic: float
    mean_nll_context: float
    mean_delta: float
    sentence_count: int
    truncated: bool = False


def _score(scorer, conditioning: str, target: str):
    if isinstance(scorer, CachingBackend):
        return scorer.score_target(conditioning, target)
    return score_target(conditioning, target, scorer)


def _context_string(topic: str, sentences: list[str], upto: int, dropped: int) -> str:
    return " ".join([topic] + sentences[dropped:upto])


def sentence_nll_topic(
    essay: EssayRecord, i: int, topic: str, scorer: ScoringBackend | CachingBackend
) -> float:
    """Mean per-token NLL of sentence i conditioned on the topic alone."""
    try:
        return _score(scorer, topic, essay.sentence_text(i)).nll
    except Exception as exc:
        raise SequentialityError(essay.essay_id, i, exc) from exc


def sentence_nll_context(
    essay: EssayRecord, i: int, topic: str, scorer: ScoringBackend | CachingBackend
) -> float:
    """Mean per-token NLL of sentence i conditioned on topic + sentences 0..i-1."""
    try:
        scored, _ = _score_with_truncation(essay, i, topic, scorer)
        return scored.nll
    except SequentialityError:
        raise
    except Exception as exc:
        raise SequentialityError(essay.essay_id, i, exc) from exc


def _score_with_truncation(essay, i, topic, scorer):
    """Score sentence i under full preceding context, dropping the oldest
    context sentences (never the topic) on overflow."""
    sentences = essay.sentence_texts()
    dropped = 0
    while True:
        ctx = _context_string(topic, sentences, i, dropped)
        try:
            return _score(scorer, ctx, sentences[i]), dropped
        except ContextOverflowError as exc:
            if dropped >= i:
                raise SequentialityError(essay.essay_id, i, exc) from exc
            dropped += 1


def essay_sequentiality(
    essay: EssayRecord, topic: str, scorer: ScoringBackend | CachingBackend
) -> tuple[list[SentenceSequentiality], EssaySequentiality]:
    """Score every sentence of an essay and aggregate to essay means.

    Raises SequentialityError (with the failing index) if any sentence
    fails; no partial aggregate is produced.
    """
    if not essay.sentences:
        raise SequentialityError(essay.essay_id, 0, ValueError("essay has no sentences"))
    records = []
    for i in range(len(essay.sentences)):
        try:
            topic_scored = _score(scorer, topic, essay.sentence_text(i))
            context_scored, dropped = _score_with_truncation(essay, i, topic, scorer)
        except SequentialityError:
            raise
        except Exception as exc:
            raise SequentialityError(essay.essay_id, i, exc) from exc
        records.append(
            SentenceSequentiality(
                essay_id=essay.essay_id,
                sentence_index=i,
                nll_topic=topic_scored.nll,
                nll_context=context_scored.nll,
                delta=topic_scored.nll - context_scored.nll,
                token_count=context_scored.token_count,
                truncated=dropped > 0,
                dropped_context_sentences=dropped,
            )
        )
    n = len(records)
    aggregate = EssaySequentiality(
        essay_id=essay.essay_id,
        mean_nll_topic=sum(r.nll_topic for r in records) / n,
        mean_nll_context=sum(r.nll_context for r in records) / n,
        mean_delta=sum(r.delta for r in records) / n,
        sentence_count=n,
        truncated=any(r.truncated for r in records),
    )
    return records, aggregate


@dataclass
class DatasetSequentiality:
    backend_id: str
    sentences: list[SentenceSequentiality]
    essays: list[EssaySequentiality]
    failures: list[dict]


def score_dataset(
    dataset: Dataset,
    scorer: ScoringBackend | CachingBackend,
    max_workers: int = 1,
) -> DatasetSequentiality:
    """Compute sequentiality for every essay; failures are collected, not
    raised. Results keep the dataset's essay order regardless of workers."""
    topics = {p.prompt_id: p.topic_text for p in dataset.prompts}

    def work(essay):
        return essay_sequentiality(essay, topics[essay.prompt_id], scorer)

    results: list = [None] * len(dataset.essays)
    failures = []
    if max_workers <= 1:
        for idx, essay in enumerate(dataset.essays):
            try:
                results[idx] = work(essay)
            except SequentialityError as exc:
                failures.append(
                    {"essay_id": exc.essay_id, "sentence_index": exc.sentence_index,
                     "error": str(exc.cause)}
                )
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [pool.submit(work, essay) for essay in dataset.essays]
            for idx, fut in enumerate(futures):
                try:
                    results[idx] = fut.result()
                except SequentialityError as exc:
                    failures.append(
                        {"essay_id": exc.essay_id, "sentence_index": exc.sentence_index,
                         "error": str(exc.cause)}
                    )

    backend_id = scorer.backend_id
    sentences, essays = [], []
    for res in results:
        if res is None:
            continue
        per_sentence, aggregate = res
        sentences.extend(per_sentence)
        essays.append(aggregate)
    return DatasetSequentiality(backend_id, sentences, essays, failures)


def write_sequentiality_jsonl(
    result: DatasetSequentiality, essay_path: str | Path, sentence_path: str | Path
) -> None:
    with open(essay_path, "w", encoding="utf-8") as fh:
        for agg in result.essays:
            fh.write(
                json.dumps(
                    {
                        "essay_id": agg.essay_id,
                        "mean_nll_topic": agg.mean_nll_topic,
                        "mean_nll_context": agg.mean_nll_context,
                        "mean_delta": agg.mean_delta,
                        "sentence_count": agg.sentence_count,
                        "truncated": agg.truncated,
                        "backend_id": result.backend_id,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    with open(sentence_path, "w", encoding="utf-8") as fh:
        for rec in result.sentences:
            fh.write(
                json.dumps(
                    {
                        "essay_id": rec.essay_id,
                        "sentence_index": rec.sentence_index,
                        "nll_topic": rec.nll_topic,
                        "nll_context": rec.nll_context,
                        "delta": rec.delta,
                        "token_count": rec.token_count,
                        "truncated": rec.truncated,
                        "dropped_context_sentences": rec.dropped_context_sentences,
                        "backend_id": result.backend_id,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_essay_sequentiality_jsonl(path: str | Path) -> list[EssaySequentiality]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(
                EssaySequentiality(
                    essay_id=d["essay_id"],
                    mean_nll_topic=float(d["mean_nll_topic"]),
                    mean_nll_context=float(d["mean_nll_context"]),
                    mean_delta=float(d["mean_delta"]),
                    sentence_count=int(d["sentence_count"]),
                    truncated=bool(d["truncated"]),
                )
            )
    return out
