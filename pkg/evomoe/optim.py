"""Adam with decoupled weight decay and a warm-up + polynomial-decay learning rate."""

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    # per-parameter update counts; bias correction starts over for parameters created mid-run
    counts: dict = field(default_factory=dict)

    def drop(self, names):
        """Forget the moments and update counts of parameters that no longer exist."""
        for name in names:
            self.m.pop(name, None)
            self.v.pop(name, None)
            self.counts.pop(name, None)


def lr_at(optim, iteration, total_iters):
    """Linear warm-up to ``optim.lr`` then polynomial decay to 0 at ``total_iters``."""
    if optim.warmup_iters and iteration < optim.warmup_iters:
        return optim.lr * (iteration + 1) / optim.warmup_iters
    span = max(total_iters - optim.warmup_iters, 1)
    remaining = max(1.0 - (iteration - optim.warmup_iters) / span, 0.0)
    return optim.lr * remaining ** optim.lr_power


def global_norm(grads):
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.1, clip_norm=0.0):
    """One Adam update of every tensor in ``params`` (name -> Tensor).

    Missing gradients count as zero. A ``clip_norm`` of 0 disables clipping.
    Nothing is written back unless every updated value is finite.
    """
    if clip_norm > 0.0:
        norm = global_norm(grads)
        if norm > clip_norm:
            grads = {name: g * (clip_norm / norm) for name, g in grads.items()}
    staged = {}
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        elif g.shape != param.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {param.shape}")
        t = state.counts.get(name, 0) + 1
        bias1 = 1.0 - beta1 ** t
        bias2 = 1.0 - beta2 ** t
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + eps)
        new = param.data - lr * update - lr * weight_decay * param.data
        if not np.isfinite(new).all():
            raise NonFiniteError(f"adam update of {name} is not finite")
        staged[name] = (t, m, v, new)
    for name, (t, m, v, new) in staged.items():
        state.counts[name], state.m[name], state.v[name] = t, m, v
        params[name].assign(new)
    state.step += 1
    return state
