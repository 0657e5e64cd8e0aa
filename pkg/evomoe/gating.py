"""
Routing functions: Top-K, hash, and the Dense-to-Sparse gate with Gumbel noise,
temperature schedule, content-based threshold, and the balance loss.

Ties are always broken toward the lowest expert index.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import EmptyBatchError, ParameterError

SCHEDULE_SHAPES = ("linear", "exponential")


@dataclass
class GateDecision:
    """Per-token expert selection.

    ``selected`` is a boolean [S x N] mask (the id sets), ``weights`` the combine
    weights (zero off the mask, never renormalised) and ``dense_probs`` the full
    pre-threshold distribution kept for the balance loss.
    """

    selected: np.ndarray
    weights: nx.Tensor
    dense_probs: nx.Tensor

    @property
    def n_tokens(self):
        return self.selected.shape[0]

    @property
    def n_experts(self):
        return self.selected.shape[1]

    @property
    def ids(self):
        return [tuple(int(i) for i in np.flatnonzero(row)) for row in self.selected]

    @property
    def loads(self):
        return self.selected.sum(axis=0).astype(np.int64)

    def mean_selected(self):
        return float(self.selected.sum(axis=1).mean())


@dataclass(frozen=True)
class TemperatureSchedule:
    max_temp: float = 2.0
    min_temp: float = 0.3
    decay_iters: int = 15000
    dense_iters: int = 15000
    shape: str = "linear"

    def __post_init__(self):
        if not self.max_temp >= self.min_temp > 0:
            raise ParameterError(f"need max_temp >= min_temp > 0, got {self.max_temp} / {self.min_temp}")
        if self.decay_iters < 0 or self.dense_iters < 0:
            raise ParameterError("decay_iters and dense_iters must be non-negative")
        if self.shape not in SCHEDULE_SHAPES:
            raise ParameterError(f"schedule shape must be one of {SCHEDULE_SHAPES}, got {self.shape!r}")


@dataclass
class GateParams:
    w_g: nx.Tensor
    threshold: float = 0.001
    alpha: float = 0.1
    noise_enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.threshold < 1.0:
            raise ParameterError(f"threshold c must be in [0, 1), got {self.threshold}")
        if self.alpha < 0.0:
            raise ParameterError(f"balance coefficient must be >= 0, got {self.alpha}")

    @property
    def n_experts(self):
        return self.w_g.shape[1]


def temperature_at(schedule, iteration):
    if iteration < 0:
        raise ParameterError(f"iteration must be >= 0, got {iteration}")
    if schedule.decay_iters == 0:
        return schedule.min_temp
    frac = min(iteration, schedule.decay_iters) / schedule.decay_iters
    if schedule.shape == "exponential":
        return schedule.max_temp * (schedule.min_temp / schedule.max_temp) ** frac
    return schedule.max_temp - (schedule.max_temp - schedule.min_temp) * frac


def gumbel_sample(shape, rng, enabled=True):
    """Gumbel(0, 1) noise -log(-log(u)), u drawn from the open interval (0, 1)."""
    if not enabled or rng is None:
        return nx.constant(np.zeros(shape))
    u = rng.random(shape)
    u = np.where(u == 0.0, np.finfo(np.float64).tiny, u)
    return nx.constant(-np.log(-np.log(u)))


def _one_hot_argmax(probs):
    selected = np.zeros(probs.shape, dtype=bool)
    selected[np.arange(probs.shape[0]), np.argmax(probs, axis=1)] = True
    return selected


def threshold_select(probs, c):
    """Mask of entries strictly above ``c``; each row's argmax is always kept."""
    probs = np.asarray(probs)
    selected = probs > c
    selected[np.arange(probs.shape[0]), np.argmax(probs, axis=1)] = True
    return selected


def _decision(probs, selected):
    weights = nx.mul(probs, nx.constant(selected.astype(np.float64)))
    return GateDecision(selected=selected, weights=weights, dense_probs=probs)


def topk_gate(x, w_g, k):
    """Keep the k largest logits per token and softmax over exactly those."""
    logits = nx.matmul(x, w_g)
    n = logits.shape[1]
    if not 1 <= k <= n:
        raise ParameterError(f"k must be in [1, {n}], got {k}")
    top = np.argsort(-logits.data, axis=1, kind="stable")[:, :k]
    selected = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(selected, top, True, axis=1)
    offsets = nx.constant(np.where(selected, 0.0, nx.MASK_VALUE))
    weights = nx.softmax_temp(nx.add(logits, offsets), 1.0)
    # a selected logit far below the row best underflows to 0; selected weights stay positive
    underflow = selected & (weights.data == 0.0)
    if underflow.any():
        weights = nx.add(weights, nx.constant(np.where(underflow, np.finfo(np.float64).tiny, 0.0)))
    return GateDecision(selected=selected, weights=weights, dense_probs=nx.softmax_temp(logits, 1.0))


def _mix64(values):
    z = np.asarray(values, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def hash_experts(token_ids, n_experts):
    token_ids = np.atleast_1d(np.asarray(token_ids, dtype=np.int64))
    if (token_ids < 0).any():
        raise ParameterError("token ids must be non-negative")
    return (_mix64(token_ids) % np.uint64(n_experts)).astype(np.int64)


def hash_gate(token_id, n_experts):
    """Fixed routing of a token id to one expert with weight 1; nothing is learned."""
    return hash_gate_batch([token_id], n_experts)


def hash_gate_batch(token_ids, n_experts):
    experts = hash_experts(token_ids, n_experts)
    selected = np.zeros((experts.shape[0], n_experts), dtype=bool)
    selected[np.arange(experts.shape[0]), experts] = True
    one_hot = nx.constant(selected.astype(np.float64))
    return GateDecision(selected=selected, weights=one_hot, dense_probs=one_hot)


def dts_gate(x, params, tau, iteration, dense_iters, rng=None):
    """Dense-to-Sparse gate.

    Before ``dense_iters`` every expert whose probability exceeds the threshold
    is kept (argmax always included); afterwards only the argmax. Noise is drawn
    only when ``rng`` is given and noise is enabled, i.e. in training.
    """
    if not tau > 0.0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    logits = nx.matmul(x, params.w_g)
    if params.noise_enabled and rng is not None:
        logits = nx.add(logits, gumbel_sample(logits.shape, rng))
    probs = nx.softmax_temp(logits, tau)
    if iteration < dense_iters:
        selected = threshold_select(probs.data, params.threshold)
    else:
        selected = _one_hot_argmax(probs.data)
    return _decision(probs, selected)


def balance_loss(decision, alpha):
    """alpha * N * sum_i (count_i / |B|^2) * sum_s p_si; counts carry no gradient."""
    n_tokens, n_experts = decision.selected.shape
    if n_tokens == 0:
        raise EmptyBatchError("balance loss over an empty batch")
    counts = decision.selected.sum(axis=0).astype(np.float64)
    coef = alpha * n_experts * counts / float(n_tokens) ** 2
    return nx.weighted_total(decision.dense_probs, np.broadcast_to(coef, decision.selected.shape))
