"""
Parameter and FLOPs accounting. A multiply-add counts as 2 FLOPs; only matrix
products are counted (bias adds, norms and softmaxes are ignored).
"""

import json
from dataclasses import asdict, dataclass

from .errors import ParameterError

GATE_MODES = ("dense", "shared", "top1", "topk", "dts", "hash")
COMPONENTS = ("attention", "ffn", "gate", "embedding")
ROUTING_GATE_MODE = {"evomoe": "top1", "switch": "top1", "topk": "topk", "hash": "hash", "dense": "dense"}


@dataclass
class Component:
    params: int = 0
    activated_params: int = 0
    flops: int = 0


@dataclass
class FlopsReport:
    gate_mode: str
    total_params: int
    activated_params_per_token: int
    forward_flops_per_token: float
    breakdown: dict

    def to_dict(self):
        out = asdict(self)
        out["breakdown"] = {name: asdict(c) for name, c in self.breakdown.items()}
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _ffn_params(m):
    return 2 * m.d_model * m.d_ff + m.d_ff + m.d_model


def _active_experts(m, gate_mode):
    if gate_mode in ("top1", "hash"):
        return 1
    if gate_mode == "topk":
        return m.top_k
    return m.n_experts


def count(model_config, gate_mode, active_experts=None):
    """FLOPs report for ``model_config`` with every MoE layer in ``gate_mode``.

    ``active_experts`` optionally gives the mean number of experts each MoE layer
    runs per token (one entry per MoE layer), replacing the mode's nominal count.
    """
    if gate_mode not in GATE_MODES:
        raise ParameterError(f"gate_mode must be one of {GATE_MODES}, got {gate_mode!r}")
    m = model_config
    d, ctx = m.d_model, m.context
    moe = set() if gate_mode in ("dense", "shared") else set(m.moe_layer_indices)
    rows = m.vocab + (1 if m.arch == "encoder-only" else 0)
    embedding = Component()
    embedding.params = rows * d + ctx * d + d * m.vocab + m.vocab
    embedding.activated_params = embedding.params
    embedding.flops = 2 * d * m.vocab

    attention, ffn, gate = Component(), Component(), Component()
    ffn_params = _ffn_params(m)
    moe_order = sorted(moe)
    for layer in range(m.layers):
        attention.params += 4 * d * d + 2 * d
        attention.flops += 8 * d * d + 4 * ctx * d
        ffn.params += 2 * d
        ffn.activated_params += 2 * d
        if layer not in moe:
            ffn.params += ffn_params
            ffn.activated_params += ffn_params
            ffn.flops += 4 * d * m.d_ff
            continue
        if active_experts is not None:
            active = active_experts[moe_order.index(layer)]
        else:
            active = _active_experts(m, gate_mode)
        ffn.params += m.n_experts * ffn_params
        ffn.activated_params += round(active * ffn_params)
        ffn.flops += active * 4 * d * m.d_ff
        if gate_mode != "hash":
            gate.params += d * m.n_experts
            gate.flops += 2 * d * m.n_experts
    attention.activated_params = attention.params
    gate.activated_params = gate.params

    breakdown = {"attention": attention, "ffn": ffn, "gate": gate, "embedding": embedding}
    return FlopsReport(
        gate_mode=gate_mode,
        total_params=sum(c.params for c in breakdown.values()),
        activated_params_per_token=sum(c.activated_params for c in breakdown.values()),
        forward_flops_per_token=sum(c.flops for c in breakdown.values()),
        breakdown=breakdown,
    )


def flops_count(config, gate_mode=None):
    """FLOPs report for a run config; the gate mode defaults to the routing's final phase."""
    m = config.model
    return count(m, gate_mode or ROUTING_GATE_MODE[m.routing])


def activated_params_identity(config):
    """Top-1 MoE activated params minus the dense backbone, against #MoE layers * D * N."""
    m = config.model
    dense = count(m, "dense").activated_params_per_token
    top1 = count(m, "top1").activated_params_per_token
    expected = len(m.moe_layer_indices) * m.d_model * m.n_experts
    return {
        "dense_activated_params": dense,
        "top1_activated_params": top1,
        "delta": top1 - dense,
        "expected_delta": expected,
        "holds": top1 - dense == expected,
    }
