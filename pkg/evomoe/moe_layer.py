"""
The expert network: shared-expert phase, random-mask diversification and
dispatch/combine of routed tokens.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import InvariantViolation, ParameterError, PhaseError
from .gating import GateParams

INIT_STD = 0.02


@dataclass
class Expert:
    w1: nx.Tensor
    b1: nx.Tensor
    w2: nx.Tensor
    b2: nx.Tensor

    @classmethod
    def init(cls, d_model, d_ff, rng):
        return cls(
            w1=nx.parameter(rng.normal(0.0, INIT_STD, (d_model, d_ff))),
            b1=nx.parameter(np.zeros(d_ff)),
            w2=nx.parameter(rng.normal(0.0, INIT_STD, (d_ff, d_model))),
            b2=nx.parameter(np.zeros(d_model)),
        )

    def __call__(self, x, kind="relu"):
        return nx.ffn(x, self.w1, self.b1, self.w2, self.b2, kind)

    def named(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def spawn_diverse(shared, n_experts, mask_ratio, seed):
    """N copies of ``shared`` with an independent Bernoulli zero-mask on each weight matrix.

    Expert i draws its masks from a generator seeded by (seed, i), where ``seed`` is
    an int or a sequence of ints; biases are copied as is.
    """
    if not 0.0 <= mask_ratio <= 1.0:
        raise ParameterError(f"mask_ratio must be in [0, 1], got {mask_ratio}")
    if n_experts < 2:
        raise ParameterError(f"diversify needs at least 2 experts, got {n_experts}")
    base = [int(s) for s in np.atleast_1d(seed)]
    experts = []
    for i in range(n_experts):
        rng = np.random.default_rng(base + [i])
        masked = {}
        for name in ("w1", "w2"):
            weight = getattr(shared, name).data
            keep = rng.random(weight.shape) >= mask_ratio
            masked[name] = nx.parameter(np.where(keep, weight, 0.0))
        experts.append(
            Expert(
                w1=masked["w1"],
                b1=nx.parameter(shared.b1.data),
                w2=masked["w2"],
                b2=nx.parameter(shared.b2.data),
            )
        )
    return experts


@dataclass
class Dispatch:
    """Tokens grouped by expert; ``expert_rows[i]`` lists token indices (ascending) routed to expert i."""

    n_tokens: int
    expert_rows: list

    @property
    def permutation(self):
        return np.concatenate([rows for rows in self.expert_rows if rows.size] or [np.zeros(0, np.int64)])

    def restore(self, grouped):
        """Sum rows given in grouped (expert-major) order back onto their token positions."""
        grouped = np.asarray(grouped)
        out = np.zeros((self.n_tokens,) + grouped.shape[1:])
        np.add.at(out, self.permutation, grouped)
        return out


def dispatch_combine(x, decision):
    """Split ``x`` into per-expert batches; returns (batches, dispatch) with None for idle experts."""
    expert_rows = [np.flatnonzero(decision.selected[:, i]) for i in range(decision.n_experts)]
    batches = [nx.take_rows(x, rows) if rows.size else None for rows in expert_rows]
    return batches, Dispatch(n_tokens=x.shape[0], expert_rows=expert_rows)


def combine(outputs, decision, dispatch):
    """y_s = sum over selected i, ascending, of weights[s, i] * outputs_i[s]."""
    y = None
    for i, (out, rows) in enumerate(zip(outputs, dispatch.expert_rows)):
        if out is None:
            continue
        weighted = nx.scale_rows(out, nx.select_column(decision.weights, rows, i))
        contribution = nx.scatter_rows(weighted, rows, dispatch.n_tokens)
        y = contribution if y is None else nx.add(y, contribution)
    return y


def check_decision(decision, n_tokens, n_experts):
    if decision.selected.shape != (n_tokens, n_experts):
        raise InvariantViolation(
            f"decision covers {decision.selected.shape}, layer expects {(n_tokens, n_experts)}"
        )
    if np.any((decision.weights.data != 0.0) & ~decision.selected):
        raise InvariantViolation("combine weight on an expert outside the selected ids")
    if np.any((decision.weights.data == 0.0) & decision.selected):
        raise InvariantViolation("selected expert with a zero combine weight")
    if not decision.selected.any(axis=1).all():
        raise InvariantViolation("token with no selected expert")


def moe_forward(x, decision, experts, kind="relu", counter=None):
    """Weighted combination of the selected experts' outputs; unselected experts are never run."""
    check_decision(decision, x.shape[0], len(experts))
    batches, dispatch = dispatch_combine(x, decision)
    outputs = []
    for expert, batch in zip(experts, batches):
        if batch is None:
            outputs.append(None)
            continue
        if counter is not None:
            counter.append(batch.shape[0])
        outputs.append(expert(batch, kind))
    return combine(outputs, decision, dispatch)


def shared_forward(x, shared, kind="relu"):
    return shared(x, kind)


class MoELayer:
    """One MoE FFN slot. In shared mode a single expert runs and no gate exists."""

    def __init__(self, shared=None, experts=None, gate=None, activation="relu"):
        if (shared is None) == (experts is None):
            raise InvariantViolation("a layer holds either one shared expert or a list of experts")
        if experts is not None and len(experts) < 2:
            raise InvariantViolation(f"sparse mode needs at least 2 experts, got {len(experts)}")
        self.shared = shared
        self.experts = experts
        self.gate = gate
        self.activation = activation
        self.expert_calls = 0

    @property
    def mode(self):
        return "shared" if self.shared is not None else "sparse"

    def shared_forward(self, x):
        if self.mode != "shared":
            raise PhaseError("shared_forward called on a layer in sparse mode")
        self.expert_calls += x.shape[0]
        return shared_forward(x, self.shared, self.activation)

    def forward(self, x, decision):
        if self.mode != "sparse":
            raise PhaseError("routed forward called on a layer still in shared mode")
        calls = []
        y = moe_forward(x, decision, self.experts, self.activation, counter=calls)
        self.expert_calls += sum(calls)
        return y

    def diversify(self, n_experts, mask_ratio, seed, gate=None):
        """Replace the shared expert by ``n_experts`` masked copies and attach a fresh gate."""
        if self.mode != "shared":
            raise PhaseError("layer was already diversified")
        self.experts = spawn_diverse(self.shared, n_experts, mask_ratio, seed)
        self.shared = None
        self.gate = gate

    def named(self):
        params = {}
        if self.shared is not None:
            params.update({f"shared.{k}": v for k, v in self.shared.named().items()})
        else:
            for i, expert in enumerate(self.experts):
                params.update({f"experts.{i}.{k}": v for k, v in expert.named().items()})
        if self.gate is not None:
            params["gate.w_g"] = self.gate.w_g
        return params


def fresh_gate(d_model, n_experts, rng, threshold, alpha, noise_enabled):
    return GateParams(
        w_g=nx.parameter(rng.normal(0.0, INIT_STD, (d_model, n_experts))),
        threshold=threshold,
        alpha=alpha,
        noise_enabled=noise_enabled,
    )
