import numpy as np
import pytest

from evomoe.data import (
    bigram_perplexity,
    eval_windows,
    make_corpus,
    mask_tokens,
    sample_batch,
    unigram_perplexity,
)
from evomoe.errors import EmptyBatchError, ParameterError


@pytest.mark.parametrize("kind", ["markov", "copy", "mixture"])
def test_corpus_is_deterministic_and_split(kind):
    first = make_corpus(kind, 5000, 16, seed=3)
    second = make_corpus(kind, 5000, 16, seed=3)
    assert np.array_equal(first.tokens, second.tokens)
    assert first.tokens.min() >= 0 and first.tokens.max() < 16
    sizes = [len(first.split(name)) for name in ("train", "valid", "test")]
    assert sizes == [4500, 250, 250]
    with pytest.raises(ParameterError):
        first.split("dev")


def test_mixture_languages_own_vocab_blocks():
    corpus = make_corpus("mixture", 20000, 16, seed=0, n_languages=4)
    owners = np.array([corpus.language_of(t) for t in corpus.tokens])
    assert np.array_equal(owners, corpus.languages), "each sub-language emits only its own block"
    assert corpus.language_of(16) is None, "the encoder mask id belongs to no sub-language"
    assert set(np.unique(corpus.languages)) == {0, 1, 2, 3}
    with pytest.raises(ParameterError):
        make_corpus("mixture", 100, 4, seed=0, n_languages=5)
    with pytest.raises(ParameterError):
        make_corpus("zipf", 100, 4, seed=0)


def test_batches_are_shifted_windows():
    tokens = np.arange(100)
    inputs, targets = sample_batch(tokens, 4, 8, np.random.default_rng(0))
    assert inputs.shape == targets.shape == (4, 8)
    assert np.array_equal(targets, inputs + 1)
    with pytest.raises(EmptyBatchError):
        sample_batch(np.arange(8), 2, 8, np.random.default_rng(0))
    windows = list(eval_windows(np.arange(50), 8, 4))
    assert sum(w[0].shape[0] for w in windows) == 6
    assert windows[1][0][0, 0] == 32, "eval windows do not overlap"
    with pytest.raises(EmptyBatchError):
        list(eval_windows(np.arange(5), 8, 4))


def test_mask_tokens_uses_mask_id():
    inputs = np.zeros((2, 8), dtype=np.int64)
    masked, where = mask_tokens(inputs, 16, 0.0, np.random.default_rng(0))
    assert where.sum() == 1 and masked[where][0] == 16, "one position is always masked"
    masked, where = mask_tokens(inputs, 16, 1.0, np.random.default_rng(0))
    assert (masked == 16).all()


def test_count_baselines():
    corpus = make_corpus("markov", 20000, 8, seed=1)
    train, valid = corpus.split("train"), corpus.split("valid")
    bigram = bigram_perplexity(train, valid, 8)
    unigram = unigram_perplexity(train, valid, 8)
    assert 1.0 < bigram < unigram, f"bigram {bigram} vs unigram {unigram}"
    uniform = np.tile(np.arange(8), 500)
    assert abs(unigram_perplexity(uniform, uniform, 8) - 8.0) < 1e-9
