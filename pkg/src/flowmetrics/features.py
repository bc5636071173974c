"""Surface linguistic features used as an essay-scoring baseline.

Ten counts per essay: word types occurring exactly once, total words,
sentences, long words, characters (alphanumeric-only and all), distinct
lemmas, nouns, stopwords, and difficult words (absent from a bundled
familiar-word list).

Lemmatization and noun tagging are deliberately rule-based and
deterministic: a suffix-stripping lemmatizer (plural -s/-es, -ing, -ed
with consonant-doubling undo, plus a small irregular table) and
lexicon-based noun tagging with a default-noun fallback for unknown
non-stopwords. Absolute values will differ from tagger-based pipelines;
downstream modeling only needs internal consistency, and the word lists
are versioned in-repo (overridable by path).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .segmentation import EmptyTextError, segment_sentences

_TOKEN = re.compile(r"[a-z0-9]+(?:'[a-z]+)*")

FEATURE_COLUMNS = [
    "unique_words",
    "total_words",
    "total_sentences",
    "long_words",
    "chars_no_space_punct",
    "chars_all",
    "total_lemmas",
    "total_nouns",
    "total_stopwords",
    "dale_chall_difficult",
]

_IRREGULAR_LEMMAS = {
    "children": "child",
    "men": "man",
    "women": "woman",
    "feet": "foot",
    "teeth": "tooth",
    "mice": "mouse",
    "geese": "goose",
    "wolves": "wolf",
    "knives": "knife",
    "leaves": "leaf",
    "lives": "life",
    "went": "go",
    "gone": "go",
    "did": "do",
    "done": "do",
    "said": "say",
    "made": "make",
    "got": "get",
    "was": "be",
    "were": "be",
    "is": "be",
    "are": "be",
    "am": "be",
    "been": "be",
    "has": "have",
    "had": "have",
    "better": "good",
    "best": "good",
    "worse": "bad",
    "worst": "bad",
}

_VOWELS = set("aeiou")


def _read_wordlist(name: str, override_dir: str | Path | None = None) -> frozenset[str]:
    if override_dir is not None:
        raw = (Path(override_dir) / name).read_text("utf-8")
    else:
        raw = resources.files("flowmetrics.data").joinpath(name).read_text("utf-8")
    return frozenset(
        line.strip().lower()
        for line in raw.splitlines()
        if line.strip() and not line.startswith("#")
    )


def tokenize_words(text: str) -> list[tuple[str, int]]:
    """Lowercased alphanumeric word tokens with offsets; punctuation is
    excluded but internal apostrophes are kept ("don't")."""
    return [(m.group(0), m.start()) for m in _TOKEN.finditer(text.lower())]


def _undo_doubling(stem: str) -> str:
    if (
        len(stem) >= 3
        and stem[-1] == stem[-2]
        and stem[-1] not in _VOWELS
        and stem[-1] not in "sl"
    ):
        return stem[:-1]
    return stem


def lemmatize(word: str) -> str:
    """Deterministic suffix-stripping lemma; not a linguistic tagger."""
    if word in _IRREGULAR_LEMMAS:
        return _IRREGULAR_LEMMAS[word]
    if len(word) > 4 and word.endswith("ies"):
        return word[:-3] + "y"
    if len(word) > 4 and word.endswith(("sses", "shes", "ches", "xes", "zes")):
        return word[:-2]
    if len(word) > 3 and word.endswith("s") and not word.endswith(("ss", "us", "is", "'s")):
        return word[:-1]
    if len(word) > 5 and word.endswith("ing"):
        return _undo_doubling(word[:-3])
    if len(word) > 4 and word.endswith("ed"):
        return _undo_doubling(word[:-2])
    return word


@dataclass(frozen=True)
class FeatureVector:
    unique_words: int
    total_words: int
    total_sentences: int
    long_words: int
    chars_no_space_punct: int
    chars_all: int
    total_lemmas: int
    total_nouns: int
    total_stopwords: int
    dale_chall_difficult: int

    def __post_init__(self):
        checks = [
            self.unique_words <= self.total_words,
            self.total_stopwords <= self.total_words,
            self.total_nouns <= self.total_words,
            self.dale_chall_difficult <= self.total_words,
            self.chars_no_space_punct <= self.chars_all,
            self.total_sentences >= 1,
        ]
        if not all(checks):
            raise ValueError(f"inconsistent feature counts: {self}")

    def to_dict(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in FEATURE_COLUMNS}

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FEATURE_COLUMNS], dtype=float)


class FeatureExtractor:
    """Computes the ten counts with configurable word lists and thresholds."""

    def __init__(self, long_word_min_chars: int = 7, wordlist_dir: str | Path | None = None):
        self.long_word_min_chars = long_word_min_chars
        self.stopwords = _read_wordlist("stopwords.txt", wordlist_dir)
        self.familiar_words = _read_wordlist("dale_chall.txt", wordlist_dir)
        self.noun_lexicon = _read_wordlist("nouns.txt", wordlist_dir)

    def is_noun(self, word: str) -> bool:
        lemma = lemmatize(word)
        if lemma in self.noun_lexicon:
            return True
        if word in self.stopwords:
            return False
        if word in self.familiar_words or lemma in self.familiar_words:
            return False
        return True  # default-noun fallback for unknown words

    def is_difficult(self, word: str) -> bool:
        return word not in self.familiar_words and lemmatize(word) not in self.familiar_words

    def extract(self, text: str) -> FeatureVector:
        if not text or not text.strip():
            raise EmptyTextError("cannot extract features from empty text")
        words = [w for w, _ in tokenize_words(text)]
        type_counts: dict[str, int] = {}
        for w in words:
            type_counts[w] = type_counts.get(w, 0) + 1
        return FeatureVector(
            unique_words=sum(1 for c in type_counts.values() if c == 1),
            total_words=len(words),
            total_sentences=len(segment_sentences(text)),
            long_words=sum(
                1 for w in words if sum(ch.isalnum() for ch in w) >= self.long_word_min_chars
            ),
            chars_no_space_punct=sum(ch.isalnum() for ch in text),
            chars_all=len(text),
            total_lemmas=len({lemmatize(w) for w in words}),
            total_nouns=sum(1 for w in words if self.is_noun(w)),
            total_stopwords=sum(1 for w in words if w in self.stopwords),
            dale_chall_difficult=sum(1 for w in words if self.is_difficult(w)),
        )


_DEFAULT_EXTRACTOR: FeatureExtractor | None = None


def extract_features(text: str) -> FeatureVector:
    """Extract the ten counts with the bundled word lists."""
    global _DEFAULT_EXTRACTOR
    if _DEFAULT_EXTRACTOR is None:
        _DEFAULT_EXTRACTOR = FeatureExtractor()
    return _DEFAULT_EXTRACTOR.extract(text)


class LinguisticFeatureExtractor(BaseEstimator, TransformerMixin):
    """sklearn-style transformer: iterable of texts -> (n, 10) count matrix.

    Stateless (fit is a no-op); standardization belongs to the downstream
    model so the extractor always emits raw counts.
    """

    def __init__(self, long_word_min_chars: int = 7, wordlist_dir: str | None = None):
        self.long_word_min_chars = long_word_min_chars
        self.wordlist_dir = wordlist_dir

    def fit(self, X, y=None):
        self._extractor = FeatureExtractor(self.long_word_min_chars, self.wordlist_dir)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "_extractor"):
            self.fit(X)
        return np.vstack([self._extractor.extract(text).as_array() for text in X])

    def get_feature_names_out(self, input_features=None):
        return np.array(FEATURE_COLUMNS, dtype=object)
