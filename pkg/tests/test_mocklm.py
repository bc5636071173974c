import math

import numpy as np
import pytest

from flowmetrics.mocklm import (
    BOS,
    MockBigramModel,
    TableBigramLM,
    UniformLM,
    default_vocabulary,
    mock_model,
    symbol_of,
    word_tokens,
)


def oracle_logprob(model, context_symbols, symbol):
    """Independent recomputation of a conditional from the inspectable
    table, successor map, boost constants, and documented OOV floor."""
    n_all = len(model.vocabulary) + len(model.topic_symbols)
    floor = -math.log(4.0 * n_all)
    prev = context_symbols[-1] if context_symbols else BOS
    row = model.table.get(prev, model.table[BOS])
    succ = model.successor.get(prev)
    if succ is None:
        return math.log(row[symbol]) if symbol in row else floor
    if symbol not in row:
        return floor
    run = 1
    j = len(context_symbols) - 1
    while j > 0 and run < model.max_run:
        if model.successor.get(context_symbols[j - 1]) == context_symbols[j]:
            run += 1
            j -= 1
        else:
            break
    bonus = model.chain_bonus + model.boost * run
    z = 1.0 - row[succ] + row[succ] * math.exp(bonus)
    if symbol == succ:
        return math.log(row[succ]) + bonus - math.log(z)
    return math.log(row[symbol]) - math.log(z)


def test_word_tokens_tile_text():
    for text in ("a bb  ccc", "  lead", "trail  x", "one"):
        toks = word_tokens(text)
        rebuilt = "".join(t for t, _ in toks)
        assert rebuilt == text
        pos = 0
        for t, start in toks:
            assert start == pos
            pos += len(t)


def test_symbol_normalization():
    assert symbol_of(" W03.") == "W03"
    assert symbol_of("W03!?") == "W03"
    assert symbol_of("  plain ") == "plain"


def test_same_seed_identical_logprobs():
    vocab, topics = default_vocabulary(16, 2)
    a = mock_model(5, vocab, topic_symbols=topics)
    b = mock_model(5, vocab, topic_symbols=topics)
    text = "W01 W02 W03. W04 W05."
    assert [t.logprob for t in a.score(text)] == [t.logprob for t in b.score(text)]
    assert a.table == b.table
    assert a.successor == b.successor


def test_different_seed_differs():
    vocab, _ = default_vocabulary(16)
    a = mock_model(5, vocab)
    b = mock_model(6, vocab)
    assert a.table != b.table


def test_logprob_equals_direct_table_lookup():
    vocab, topics = default_vocabulary(16, 2)
    model = mock_model(1, vocab, topic_symbols=topics)
    rng = np.random.default_rng(2)
    pool = vocab + list(topics)
    for _ in range(300):
        k = int(rng.integers(0, 6))
        ctx = [pool[int(rng.integers(len(pool)))] for _ in range(k)]
        sym = pool[int(rng.integers(len(pool)))]
        assert model.token_logprob(ctx, sym) == pytest.approx(
            oracle_logprob(model, ctx, sym), abs=1e-12
        )


def test_vocabulary_of_size_one_gives_zero_logprob():
    model = mock_model(3, ["Only"])
    tokens = model.score("Only Only Only")
    assert all(t.logprob == pytest.approx(0.0, abs=1e-12) for t in tokens)


def test_rows_are_normalized_distributions():
    vocab, topics = default_vocabulary(32, 4)
    model = mock_model(9, vocab, topic_symbols=topics)
    for prev, row in model.table.items():
        assert sum(row.values()) == pytest.approx(1.0, abs=1e-9)
        assert all(p > 0 for p in row.values())


def test_boosted_distribution_normalizes():
    vocab, _ = default_vocabulary(16)
    model = mock_model(4, vocab)
    prev = vocab[0]
    for run in (1, 3, model.max_run):
        total = sum(
            math.exp(model._conditional_logprob(prev, run, sym)) for sym in vocab
        )
        assert total == pytest.approx(1.0, abs=1e-9)


def test_longer_matching_context_strictly_increases_successor_probability():
    vocab, _ = default_vocabulary(16)
    model = mock_model(4, vocab)
    prev = vocab[3]
    succ = model.successor[prev]
    probs = [model._conditional_logprob(prev, run, succ) for run in range(1, model.max_run + 1)]
    assert all(b > a for a, b in zip(probs, probs[1:]))


def test_every_logprob_nonpositive():
    vocab, topics = default_vocabulary(16, 2)
    model = mock_model(8, vocab, topic_symbols=topics)
    rng = np.random.default_rng(0)
    text = model.generate_essay(rng, 5, (4, 9))
    assert all(t.logprob <= 0.0 for t in model.score(text))


def test_generation_is_deterministic_per_seed():
    vocab, topics = default_vocabulary(16, 2)
    model = mock_model(8, vocab, topic_symbols=topics)
    a = model.generate_essay(np.random.default_rng(42), 4, (5, 8), wander=0.2, continuity=0.5)
    b = model.generate_essay(np.random.default_rng(42), 4, (5, 8), wander=0.2, continuity=0.5)
    assert a == b


def test_topic_symbols_are_outside_chain():
    vocab, topics = default_vocabulary(8, 3)
    model = mock_model(2, vocab, topic_symbols=topics)
    for t in topics:
        assert t not in model.successor
        row = model.table[t]
        values = set(row.values())
        assert len(values) == 1  # uniform row


def test_uniform_lm_closed_form():
    u = UniformLM(64)
    tokens = u.score("W00 W01 W02 W03 W04")
    assert all(t.logprob == pytest.approx(-math.log(64)) for t in tokens)
    with pytest.raises(ValueError):
        UniformLM(0)


def test_table_bigram_word_level():
    model = TableBigramLM({"the": {"cat": 0.5}, "cat": {"sat": 0.25}}, level="word")
    tokens = model.score("the cat sat")
    assert tokens[1].logprob == pytest.approx(math.log(0.5))
    assert tokens[2].logprob == pytest.approx(math.log(0.25))
    # unknown transition falls to the floor
    assert model.score("sat the")[1].logprob == TableBigramLM.FLOOR_LOGPROB


def test_table_bigram_char_level_chain():
    model = TableBigramLM({"A": {"B": 1.0}, "B": {"A": 1.0}}, level="char")
    tokens = model.score("ABAB")
    assert [t.token_text for t in tokens] == ["A", "B", "A", "B"]
    assert all(t.logprob == pytest.approx(0.0) for t in tokens[1:])


def test_invalid_construction():
    with pytest.raises(ValueError):
        MockBigramModel(1, [])
    with pytest.raises(ValueError):
        MockBigramModel(1, ["A"], topic_symbols=("A",))
    with pytest.raises(ValueError):
        TableBigramLM({}, level="subword")
