"""
Post-LN transformer language model whose FFN slots may be MoE layers.

Each block computes LayerNorm(x + Dropout(MultiHead(x))) followed by
LayerNorm(h + Dropout(FFN(h))). Dropout is also applied after the embedding.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .gating import dts_gate, hash_gate_batch, topk_gate
from .moe_layer import INIT_STD, Expert, MoELayer, fresh_gate

SWITCH_TEMPERATURE = 1.0


@dataclass
class ForwardContext:
    iteration: int = 0
    temperature: float = 1.0
    training: bool = False
    dropout_rng: np.random.Generator = None
    noise_rng: np.random.Generator = None
    force_dense_gate: bool = False


@dataclass
class Block:
    attn: nx.AttentionParams
    ln1_gain: nx.Tensor
    ln1_bias: nx.Tensor
    ln2_gain: nx.Tensor
    ln2_bias: nx.Tensor
    ffn: Expert = None
    moe: MoELayer = None

    def named(self):
        params = {f"attn.{k}": v for k, v in self.attn.named().items()}
        params.update({"ln1.gain": self.ln1_gain, "ln1.bias": self.ln1_bias})
        if self.ffn is not None:
            params.update({f"ffn.{k}": v for k, v in self.ffn.named().items()})
        else:
            params.update({f"moe.{k}": v for k, v in self.moe.named().items()})
        params.update({"ln2.gain": self.ln2_gain, "ln2.bias": self.ln2_bias})
        return params


def _normal(rng, shape):
    return nx.parameter(rng.normal(0.0, INIT_STD, shape))


class MoETransformer:
    def __init__(self, config, rng):
        self.config = config
        m = config
        d = m.d_model
        embed_rows = m.vocab + (1 if m.arch == "encoder-only" else 0)
        self.tokens = _normal(rng, (embed_rows, d))
        self.positions = _normal(rng, (m.context, d))
        sparse_from_start = m.routing in ("switch", "topk", "hash")
        self.blocks = []
        for layer in range(m.layers):
            attn = nx.AttentionParams(*(_normal(rng, (d, d)) for _ in range(4)))
            block = Block(
                attn=attn,
                ln1_gain=nx.parameter(np.ones(d)),
                ln1_bias=nx.parameter(np.zeros(d)),
                ln2_gain=nx.parameter(np.ones(d)),
                ln2_bias=nx.parameter(np.zeros(d)),
            )
            if layer not in m.moe_layer_indices:
                block.ffn = Expert.init(d, m.d_ff, rng)
            elif sparse_from_start:
                experts = [Expert.init(d, m.d_ff, rng) for _ in range(m.n_experts)]
                gate = None if m.routing == "hash" else fresh_gate(
                    d, m.n_experts, rng, m.threshold, m.alpha, m.gate_noise
                )
                block.moe = MoELayer(experts=experts, gate=gate, activation=m.activation)
            else:
                block.moe = MoELayer(shared=Expert.init(d, m.d_ff, rng), activation=m.activation)
            self.blocks.append(block)
        self.head_w = _normal(rng, (d, m.vocab))
        self.head_b = nx.parameter(np.zeros(m.vocab))
        self.decisions = []

    @property
    def moe_layers(self):
        return [(i, b.moe) for i, b in enumerate(self.blocks) if b.moe is not None]

    @property
    def diversified(self):
        return all(layer.mode == "sparse" for _, layer in self.moe_layers)

    def named_parameters(self):
        params = {"embed.tokens": self.tokens, "embed.positions": self.positions}
        for i, block in enumerate(self.blocks):
            params.update({f"blocks.{i}.{k}": v for k, v in block.named().items()})
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        return params

    def diversify(self):
        """Spawn the experts of every shared MoE layer and attach fresh gates.

        Returns the names of the removed shared-expert parameters.
        """
        m = self.config
        before = set(self.named_parameters())
        for i, layer in self.moe_layers:
            if layer.mode != "shared":
                continue
            gate_rng = np.random.default_rng([m.seed, 1, i])
            gate = fresh_gate(m.d_model, m.n_experts, gate_rng, m.threshold, m.alpha, m.gate_noise)
            layer.diversify(m.n_experts, m.mask_ratio, seed=(m.seed, i), gate=gate)
        return sorted(before - set(self.named_parameters()))

    def route(self, layer, x, token_ids, ctx):
        m = self.config
        if m.routing == "hash":
            return hash_gate_batch(token_ids, m.n_experts)
        if m.routing == "topk":
            return topk_gate(x, layer.gate.w_g, m.top_k)
        if m.routing == "switch":
            return dts_gate(x, layer.gate, SWITCH_TEMPERATURE, ctx.iteration, dense_iters=0)
        dense_iters = ctx.iteration + 1 if ctx.force_dense_gate else m.dense_iters
        rng = ctx.noise_rng if ctx.training else None
        return dts_gate(x, layer.gate, ctx.temperature, ctx.iteration, dense_iters, rng=rng)

    def forward(self, inputs, ctx):
        """Logits [(B*T) x vocab] for integer inputs [B x T]; routing decisions land in ``self.decisions``."""
        m = self.config
        inputs = np.asarray(inputs, dtype=np.int64)
        batch, seq = inputs.shape
        token_ids = inputs.reshape(-1)
        positions = np.tile(np.arange(seq), batch)
        x = nx.add(nx.take_rows(self.tokens, token_ids), nx.take_rows(self.positions, positions))
        x = nx.dropout(x, m.dropout, ctx.dropout_rng, ctx.training)
        causal = m.arch == "decoder-only"
        self.decisions = []
        for i, block in enumerate(self.blocks):
            attended = nx.multi_head(x, x, x, block.attn, m.heads, causal=causal, batch=batch)
            x = nx.layer_norm(nx.add(x, nx.dropout(attended, m.dropout, ctx.dropout_rng, ctx.training)),
                              block.ln1_gain, block.ln1_bias)
            if block.ffn is not None:
                out = block.ffn(x, m.activation)
            elif block.moe.mode == "shared":
                out = block.moe.shared_forward(x)
            else:
                decision = self.route(block.moe, x, token_ids, ctx)
                self.decisions.append((i, decision))
                out = block.moe.forward(x, decision)
            x = nx.layer_norm(nx.add(x, nx.dropout(out, m.dropout, ctx.dropout_rng, ctx.training)),
                              block.ln2_gain, block.ln2_bias)
        return nx.add_bias(nx.matmul(x, self.head_w), self.head_b)
