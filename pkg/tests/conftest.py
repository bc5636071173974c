"""Shared fixtures: the standard mock LM and synthetic flow corpora.

The standard mock has 64 chain symbols, 8 topic symbols, a strong chain
bonus, and near-uniform base rows; it is the oracle backend used across
scoring, sequentiality, evaluation, CLI, and acceptance tests. Synthetic
corpora vary per-essay chain continuity, which moves context-conditioned
NLL without touching topic-conditioned NLL, so ordinal models fitted on
the resulting columns have a decorrelated signal to find.
"""

from __future__ import annotations

import numpy as np
import pytest

from flowmetrics.corpus import Dataset, EssayRecord, PromptSpec, TraitScale
from flowmetrics.mocklm import MockBigramModel, default_vocabulary
from flowmetrics.segmentation import segment_sentences
from flowmetrics.sequentiality import essay_sequentiality

MOCK_SEED = 17
MOCK_PARAMS = dict(boost=0.5, chain_bonus=4.0, concentration=8.0)


def make_standard_mock(max_context_tokens=None) -> MockBigramModel:
    vocab, topics = default_vocabulary(64, 8)
    return MockBigramModel(
        MOCK_SEED, vocab, topic_symbols=topics, max_context_tokens=max_context_tokens,
        **MOCK_PARAMS,
    )


@pytest.fixture(scope="session")
def standard_mock() -> MockBigramModel:
    return make_standard_mock()


def make_essay(model, rng, essay_id, n_sentences=6, sentence_tokens=(6, 10),
               wander=0.15, continuity=1.0) -> tuple[EssayRecord, str]:
    text = model.generate_essay(rng, n_sentences, sentence_tokens,
                                wander=wander, continuity=continuity)
    topic = model.sample_topic(rng, 3)
    record = EssayRecord(essay_id, "p1", text, tuple(segment_sentences(text)), {})
    return record, topic


def build_flow_corpus(model, n_essays, seed, n_sentences=10):
    """Essays with per-essay continuity and sentence-length variation,
    scored for sequentiality. Returns (records, topics, T, C, D) arrays."""
    rng = np.random.default_rng(seed)
    records, topics = [], []
    T, C, D = [], [], []
    for e in range(n_essays):
        continuity = float(rng.uniform(0.0, 1.0))
        base = int(rng.integers(5, 14))
        text = model.generate_essay(
            rng, n_sentences, (max(3, base - 2), base + 2), wander=0.15, continuity=continuity
        )
        topic = model.sample_topic(rng, 3)
        record = EssayRecord(f"e{e:05d}", "p1", text, tuple(segment_sentences(text)), {})
        _, agg = essay_sequentiality(record, topic, model)
        records.append(record)
        topics.append(topic)
        T.append(agg.mean_nll_topic)
        C.append(agg.mean_nll_context)
        D.append(agg.mean_delta)
    return records, topics, np.array(T), np.array(C), np.array(D)


def quantile_labels(latent: np.ndarray, n_levels: int) -> np.ndarray:
    """Ordinal labels 1..n_levels by quantile-binning a latent score."""
    qs = np.quantile(latent, np.linspace(0, 1, n_levels + 1)[1:-1])
    return np.digitize(latent, qs).astype(float) + 1.0


def scored_mock_dataset(model, n_essays, seed, trait="Quality", n_levels=4,
                        n_sentences=6) -> tuple[Dataset, np.ndarray, np.ndarray]:
    """A Dataset with trait scores derived from context NLL quantiles.

    All essays share one prompt whose topic is built from the mock's topic
    symbols. Returns (dataset, mean_nll_context, mean_nll_topic).
    """
    rng = np.random.default_rng(seed)
    topic = model.sample_topic(rng, 3)
    raw_records, C, T = [], [], []
    for e in range(n_essays):
        continuity = float(rng.uniform(0.0, 1.0))
        base = int(rng.integers(5, 12))
        text = model.generate_essay(
            rng, n_sentences, (max(3, base - 2), base + 2), wander=0.15, continuity=continuity
        )
        record = EssayRecord(f"e{e:04d}", "p1", text, tuple(segment_sentences(text)), {})
        _, agg = essay_sequentiality(record, topic, model)
        raw_records.append(record)
        C.append(agg.mean_nll_context)
        T.append(agg.mean_nll_topic)
    C = np.array(C)
    T = np.array(T)
    latent = -(C - C.mean()) / C.std() + rng.logistic(size=n_essays) * 0.5
    labels = quantile_labels(latent, n_levels)
    levels = tuple(float(v) for v in range(1, n_levels + 1))
    scale = TraitScale(trait, levels)
    prompt = PromptSpec("p1", topic, {trait: scale})
    essays = [
        EssayRecord(r.essay_id, r.prompt_id, r.text, r.sentences, {trait: float(labels[i])})
        for i, r in enumerate(raw_records)
    ]
    dataset = Dataset("mock-corpus", [prompt], essays)
    dataset.validate()
    return dataset, C, T
