"""
Synthetic token corpora standing in for web-scale text.

- markov:  one sparse first-order Markov chain over the whole vocabulary
- copy:    a random pattern repeated end to end
- mixture: K sub-languages, each a Markov chain over its own vocabulary block,
           emitted as documents of random length (the signal experts can specialise on)
"""

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatchError, ParameterError

SPLITS = ("train", "valid", "test")
SPLIT_FRACTIONS = (0.90, 0.05, 0.05)
DOC_LENGTH = (32, 128)
DIRICHLET_CONCENTRATION = 0.1
COPY_PERIOD = 16


@dataclass
class Corpus:
    kind: str
    vocab: int
    tokens: np.ndarray
    splits: dict
    n_languages: int = 1
    languages: np.ndarray = None

    def split(self, name):
        try:
            return self.splits[name]
        except KeyError:
            raise ParameterError(f"unknown split {name!r}; expected one of {SPLITS}") from None

    def language_of(self, token):
        """Sub-language owning a token id in a mixture corpus; None for ids outside the vocabulary (the mask id)."""
        if not 0 <= int(token) < self.vocab:
            return None
        block = self.vocab // self.n_languages
        return min(int(token) // block, self.n_languages - 1)


def _markov_chain(rng, states, length):
    transitions = rng.dirichlet(np.full(states, DIRICHLET_CONCENTRATION), size=states)
    cdf = np.cumsum(transitions, axis=1)
    draws = rng.random(length)
    out = np.empty(length, dtype=np.int64)
    current = int(rng.integers(states))
    for i in range(length):
        out[i] = current
        current = min(int(np.searchsorted(cdf[current], draws[i], side="right")), states - 1)
    return out


def _mixture(rng, size, vocab, n_languages):
    block = vocab // n_languages
    bounds = [(k * block, vocab if k == n_languages - 1 else (k + 1) * block) for k in range(n_languages)]
    chains = []
    for lo, hi in bounds:
        states = hi - lo
        transitions = rng.dirichlet(np.full(states, DIRICHLET_CONCENTRATION), size=states)
        chains.append(np.cumsum(transitions, axis=1))
    tokens = np.empty(size, dtype=np.int64)
    languages = np.empty(size, dtype=np.int64)
    pos = 0
    while pos < size:
        lang = int(rng.integers(n_languages))
        length = min(int(rng.integers(DOC_LENGTH[0], DOC_LENGTH[1] + 1)), size - pos)
        cdf, (lo, hi) = chains[lang], bounds[lang]
        draws = rng.random(length)
        current = int(rng.integers(hi - lo))
        for i in range(length):
            tokens[pos + i] = lo + current
            current = min(int(np.searchsorted(cdf[current], draws[i], side="right")), hi - lo - 1)
        languages[pos:pos + length] = lang
        pos += length
    return tokens, languages


def make_corpus(kind, size, vocab, seed, n_languages=4):
    """Deterministic synthetic corpus with a 90/5/5 train/valid/test split."""
    if size < 1:
        raise ParameterError(f"corpus size must be >= 1, got {size}")
    if vocab < 1:
        raise ParameterError(f"vocab must be >= 1, got {vocab}")
    rng = np.random.default_rng(seed)
    languages = None
    if kind == "markov":
        tokens = _markov_chain(rng, vocab, size)
        n_languages = 1
    elif kind == "copy":
        pattern = rng.integers(0, vocab, size=min(COPY_PERIOD, size))
        tokens = np.resize(pattern, size).astype(np.int64)
        n_languages = 1
    elif kind == "mixture":
        if not 1 <= n_languages <= vocab:
            raise ParameterError(f"n_languages must be in [1, vocab], got {n_languages}")
        tokens, languages = _mixture(rng, size, vocab, n_languages)
    else:
        raise ParameterError(f"unknown corpus kind {kind!r}")
    cut_train = int(size * SPLIT_FRACTIONS[0])
    cut_valid = cut_train + int(size * SPLIT_FRACTIONS[1])
    splits = {"train": tokens[:cut_train], "valid": tokens[cut_train:cut_valid], "test": tokens[cut_valid:]}
    return Corpus(kind=kind, vocab=vocab, tokens=tokens, splits=splits, n_languages=n_languages, languages=languages)


def sample_batch(tokens, batch_size, context, rng):
    """Random windows: inputs [B x T] and next-token targets [B x T]."""
    if len(tokens) < context + 1:
        raise EmptyBatchError(f"split of {len(tokens)} tokens is shorter than context + 1 = {context + 1}")
    starts = rng.integers(0, len(tokens) - context, size=batch_size)
    idx = starts[:, None] + np.arange(context + 1)[None, :]
    windows = tokens[idx]
    return windows[:, :-1], windows[:, 1:]


def eval_windows(tokens, context, batch_size):
    """Non-overlapping windows covering the split, yielded in batches."""
    n_windows = (len(tokens) - 1) // context
    if n_windows < 1:
        raise EmptyBatchError(f"split of {len(tokens)} tokens holds no window of {context + 1}")
    starts = np.arange(n_windows) * context
    for lo in range(0, n_windows, batch_size):
        batch = starts[lo:lo + batch_size]
        idx = batch[:, None] + np.arange(context + 1)[None, :]
        windows = tokens[idx]
        yield windows[:, :-1], windows[:, 1:]


def mask_tokens(inputs, vocab, mask_prob, rng):
    """Masked-token inputs for the encoder objective; at least one position per batch is masked."""
    masked = rng.random(inputs.shape) < mask_prob
    if not masked.any():
        masked.reshape(-1)[0] = True
    return np.where(masked, vocab, inputs), masked


def bigram_perplexity(train, valid, vocab, smoothing=1.0):
    """Add-k smoothed bigram perplexity of ``valid`` under counts from ``train``."""
    counts = np.full((vocab, vocab), smoothing)
    np.add.at(counts, (train[:-1], train[1:]), 1.0)
    probs = counts / counts.sum(axis=1, keepdims=True)
    return float(np.exp(-np.log(probs[valid[:-1], valid[1:]]).mean()))


def unigram_perplexity(train, valid, vocab, smoothing=1.0):
    counts = np.bincount(train, minlength=vocab) + smoothing
    probs = counts / counts.sum()
    return float(np.exp(-np.log(probs[valid[1:]]).mean()))
