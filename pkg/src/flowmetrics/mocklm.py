"""Deterministic in-process language models for testing and calibration.

The centerpiece is MockBigramModel: a seeded word-level bigram whose full
transition table is inspectable, so every log-probability it emits can be
recomputed independently by summing table lookups. On top of the base
table it layers a "chain" bonus: each vocabulary symbol has a designated
successor, and the probability of the successor grows strictly with the
length of the chain-consistent context suffix. Text generated by the model
is therefore "coherent" in a measurable way: conditioning on the true
preceding context lowers NLL relative to a shuffled or truncated context.

UniformLM and TableBigramLM are smaller fixtures: exact uniform
probabilities, and a hand-specified transition table.
"""

from __future__ import annotations

import math
import re

import numpy as np

from .scoring import ContextOverflowError, TokenLogprob

_WORD = re.compile(r"\S+")
_TRAILING_PUNCT = re.compile(r"[.!?,;:]+$")

BOS = "<s>"


def word_tokens(text: str) -> list[tuple[str, int]]:
    """Tokenize into whitespace-prefixed word tokens that tile the text.

    Each token is (token_text, char_start); inter-word whitespace attaches
    to the following word, trailing whitespace to the last token.
    """
    words = list(_WORD.finditer(text))
    if not words:
        return [(text, 0)] if text else []
    tokens = []
    start = 0
    for cur, nxt in zip(words, words[1:]):
        tokens.append((text[start : nxt.start()], start))
        start = nxt.start()
    tokens.append((text[start:], start))
    # Leading whitespace of the whole text belongs to the first token by
    # construction; re-anchor so offsets tile from 0.
    if tokens[0][1] != 0:
        tokens[0] = (text[: tokens[0][1] + len(tokens[0][0])], 0)
    return tokens


def symbol_of(token_text: str) -> str:
    """Normalize a token to its table symbol: strip whitespace and trailing
    sentence punctuation."""
    return _TRAILING_PUNCT.sub("", token_text.strip())


class UniformLM:
    """Every token gets probability 1/V. The trivial closed-form oracle."""

    def __init__(self, vocabulary_size: int):
        if vocabulary_size < 1:
            raise ValueError("vocabulary_size must be >= 1")
        self.vocabulary_size = vocabulary_size
        self.backend_id = f"mock-uniform:v={vocabulary_size}"
        self.max_context_tokens = None
        self._logprob = -math.log(vocabulary_size)

    def score(self, text: str) -> list[TokenLogprob]:
        return [TokenLogprob(tok, start, self._logprob) for tok, start in word_tokens(text)]


class TableBigramLM:
    """Bigram over an explicit transition table, word- or character-level.

    ``table`` maps previous symbol -> {next symbol: probability}. The first
    token's previous symbol is BOS. Missing transitions fall back to a tiny
    floor probability so arbitrary text stays scoreable.
    """

    FLOOR_LOGPROB = math.log(1e-9)

    def __init__(self, table: dict[str, dict[str, float]], level: str = "word"):
        if level not in ("word", "char"):
            raise ValueError("level must be 'word' or 'char'")
        self.table = table
        self.level = level
        self.backend_id = f"mock-table:{level}:{len(table)}"
        self.max_context_tokens = None

    def _tokens(self, text: str) -> list[tuple[str, int]]:
        if self.level == "char":
            return [(ch, i) for i, ch in enumerate(text)]
        return word_tokens(text)

    def lookup(self, prev_symbol: str, symbol: str) -> float:
        row = self.table.get(prev_symbol)
        if row is None or symbol not in row:
            return self.FLOOR_LOGPROB
        return math.log(row[symbol])

    def score(self, text: str) -> list[TokenLogprob]:
        out = []
        prev = BOS
        for tok, start in self._tokens(text):
            sym = tok if self.level == "char" else symbol_of(tok)
            out.append(TokenLogprob(tok, start, self.lookup(prev, sym)))
            prev = sym
        return out


class MockBigramModel:
    """Seeded bigram with a successor chain and context-length bonus.

    Base rows are Dirichlet(concentration) draws over the chain vocabulary.
    Each chain symbol s has successor succ(s) (a seeded cyclic permutation).
    When the last L tokens of the context form a chain path ending at the
    previous symbol, the successor's probability is re-weighted:

        P(w | prev, L) = B[prev][w] * exp(bonus(L) * [w == succ(prev)]) / Z
        bonus(L) = chain_bonus + boost * L
        Z = 1 - B[prev][succ] + B[prev][succ] * exp(bonus(L))

    with L capped at ``max_run``. P(succ | prev, L) is strictly increasing
    in L, so longer matching context always helps; chain_bonus keeps the
    successor likely even at L = 1 so that sampled text is coherent. Topic
    symbols sit outside the chain with uniform rows: scoring under
    different topics built from them yields identical NLLs.
    """

    def __init__(
        self,
        seed: int,
        vocabulary: list[str],
        topic_symbols: tuple[str, ...] = (),
        boost: float = 0.8,
        chain_bonus: float = 1.5,
        max_run: int = 6,
        concentration: float = 1.0,
        max_context_tokens: int | None = None,
    ):
        if not vocabulary:
            raise ValueError("vocabulary must be non-empty")
        if len(set(vocabulary) | set(topic_symbols)) != len(vocabulary) + len(topic_symbols):
            raise ValueError("vocabulary and topic symbols must be distinct")
        self.seed = seed
        self.vocabulary = list(vocabulary)
        self.topic_symbols = tuple(topic_symbols)
        self.boost = float(boost)
        self.chain_bonus = float(chain_bonus)
        self.max_run = int(max_run)
        self.max_context_tokens = max_context_tokens
        self.backend_id = (
            f"mock-bigram:seed={seed},v={len(vocabulary)},t={len(topic_symbols)},"
            f"boost={boost},bonus={chain_bonus},run={max_run}"
        )

        rng = np.random.default_rng(seed)
        self._all_symbols = self.vocabulary + list(self.topic_symbols)
        uniform = 1.0 / len(self._all_symbols)

        # Successor chain: one seeded cycle over the vocabulary.
        order = list(rng.permutation(len(self.vocabulary)))
        self.successor = {
            self.vocabulary[order[i]]: self.vocabulary[order[(i + 1) % len(order)]]
            for i in range(len(order))
        }

        # Base transition rows over the chain vocabulary.
        self.table: dict[str, dict[str, float]] = {}
        for sym in self.vocabulary:
            weights = rng.gamma(concentration, size=len(self.vocabulary))
            weights /= weights.sum()
            self.table[sym] = {w: float(p) for w, p in zip(self.vocabulary, weights)}
        for sym in self.topic_symbols:
            self.table[sym] = {w: uniform for w in self._all_symbols}
        self.table[BOS] = {w: uniform for w in self._all_symbols}

        self.oov_logprob = -math.log(4.0 * len(self._all_symbols))

    # -- conditional probabilities -------------------------------------

    def run_length(self, context_symbols: list[str]) -> int:
        """Length of the chain-consistent suffix of the context, capped."""
        if not context_symbols:
            return 0
        run = 1
        for j in range(len(context_symbols) - 1, 0, -1):
            if run >= self.max_run:
                break
            if self.successor.get(context_symbols[j - 1]) == context_symbols[j]:
                run += 1
            else:
                break
        return min(run, self.max_run)

    def _conditional_logprob(self, prev: str, run: int, sym: str) -> float:
        row = self.table.get(prev)
        if row is None:
            row = self.table[BOS]
        succ = self.successor.get(prev)
        if succ is None:
            return math.log(row[sym]) if sym in row else self._oov_logprob
        if sym not in row:
            return self.oov_logprob
        bonus = self.chain_bonus + self.boost * run
        b_succ = row[succ]
        log_z = math.log(1.0 - b_succ + b_succ * math.exp(bonus))
        if sym == succ:
            return math.log(b_succ) + bonus - log_z
        return math.log(row[sym]) - log_z

    def token_logprob(self, context_symbols: list[str], symbol: str) -> float:
        """Conditional log-probability of ``symbol`` after a symbol context."""
        if not context_symbols:
            return self._conditional_logprob(BOS, 0, symbol)
        return self._conditional_logprob(
            context_symbols[-1], self.run_length(context_symbols), symbol
        )

    # -- backend interface ----------------------------------------------

    def tokenize(self, text: str) -> list[tuple[str, int]]:
        return word_tokens(text)

    def count_tokens(self, text: str) -> int:
        return len(word_tokens(text))

    def score(self, text: str) -> list[TokenLogprob]:
        tokens = word_tokens(text)
        if self.max_context_tokens is not None and len(tokens) > self.max_context_tokens:
            raise ContextOverflowError(
                f"{len(tokens)} tokens exceed the {self.max_context_tokens}-token window",
                token_count=len(tokens),
                limit=self.max_context_tokens,
            )
        out = []
        prev = BOS
        run = 0
        for tok, start in tokens:
            sym = symbol_of(tok)
            out.append(TokenLogprob(tok, start, self._conditional_logprob(prev, run, sym)))
            if self.successor.get(prev) == sym:
                run = min(run + 1, self.max_run)
            else:
                run = 1
            prev = sym
        return out

    # -- generation -------------------------------------------------------

    def _distribution(self, prev: str, run: int) -> tuple[list[str], np.ndarray]:
        syms = list(self.table.get(prev, self.table[BOS]).keys())
        probs = np.array([math.exp(self._conditional_logprob(prev, run, s)) for s in syms])
        probs /= probs.sum()
        return syms, probs

    def _next_symbol(self, rng, prev, run, wander):
        if wander is None:
            syms, probs = self._distribution(prev, run)
            return syms[int(rng.choice(len(syms), p=probs))]
        succ = self.successor[prev]
        if rng.random() >= wander:
            return succ
        syms = [s for s in self.table[prev] if s != succ]
        weights = np.array([self.table[prev][s] for s in syms])
        weights /= weights.sum()
        return syms[int(rng.choice(len(syms), p=weights))]

    def generate_tokens(
        self,
        rng: np.random.Generator,
        n: int,
        start: str | None = None,
        wander: float | None = None,
    ) -> list[str]:
        """Sample ``n`` symbols. With ``wander`` unset, sampling follows the
        model's own conditional distribution; otherwise each step follows
        the chain with probability 1 - wander and jumps to a base-table
        draw (excluding the successor) with probability wander."""
        if start is None:
            start = self.vocabulary[int(rng.integers(len(self.vocabulary)))]
        out = [start]
        prev, run = start, 1
        for _ in range(n - 1):
            sym = self._next_symbol(rng, prev, run, wander)
            out.append(sym)
            run = min(run + 1, self.max_run) if self.successor.get(prev) == sym else 1
            prev = sym
        return out

    def generate_essay(
        self,
        rng: np.random.Generator,
        n_sentences: int,
        sentence_tokens: int | tuple[int, int] = 8,
        wander: float | None = None,
        continuity: float = 1.0,
    ) -> str:
        """Generate an essay of '.'-terminated sentences.

        ``continuity`` is the probability that a sentence continues the
        chain from where the previous sentence stopped; otherwise it
        restarts at a fresh random symbol. Restarts leave topic-conditioned
        NLLs untouched but deny the context conditioning its advantage at
        that seam, so continuity controls how much the essay "flows".
        """
        if isinstance(sentence_tokens, tuple):
            lengths = [
                int(rng.integers(sentence_tokens[0], sentence_tokens[1] + 1))
                for _ in range(n_sentences)
            ]
        else:
            lengths = [sentence_tokens] * n_sentences
        sentences = []
        prev, run = None, 0
        for ln in lengths:
            if prev is None or rng.random() >= continuity:
                sym = self.vocabulary[int(rng.integers(len(self.vocabulary)))]
                run = 1
            else:
                sym = self._next_symbol(rng, prev, run, wander)
                run = min(run + 1, self.max_run) if self.successor.get(prev) == sym else 1
            toks = [sym]
            prev = sym
            for _ in range(ln - 1):
                sym = self._next_symbol(rng, prev, run, wander)
                toks.append(sym)
                run = min(run + 1, self.max_run) if self.successor.get(prev) == sym else 1
                prev = sym
            sentences.append(" ".join(toks) + ".")
        return " ".join(sentences)

    def sample_topic(self, rng: np.random.Generator, n_tokens: int = 3) -> str:
        """Build a topic string from the designated topic symbols."""
        pool = self.topic_symbols or tuple(self.vocabulary)
        picks = [pool[int(rng.integers(len(pool)))] for _ in range(n_tokens)]
        return " ".join(picks)


def mock_model(
    seed: int,
    vocabulary: list[str],
    **kwargs,
) -> MockBigramModel:
    """Build the deterministic bigram backend used as a scoring oracle."""
    return MockBigramModel(seed, vocabulary, **kwargs)


def default_vocabulary(size: int = 64, n_topics: int = 0) -> tuple[list[str], tuple[str, ...]]:
    """Capitalized symbol vocabulary (segmentation-friendly) plus topic symbols."""
    vocab = [f"W{i:02d}" for i in range(size)]
    topics = tuple(f"T{i:02d}" for i in range(n_topics))
    return vocab, topics
