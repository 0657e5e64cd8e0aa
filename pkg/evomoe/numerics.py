"""
Dense float64 tensors with reverse-mode automatic differentiation, and the
transformer building blocks (attention, FFN, layer norm) composed from them.

Every op computes its forward value with numpy, records the parents it read
and a closure that pushes the output gradient back into them. ``backward``
walks the recorded graph once in reverse topological order.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NonFiniteError, ParameterError, ShapeError

# Stand-in for -inf on masked attention logits; keeps max-subtraction finite.
MASK_VALUE = -1e30
LN_EPS = 1e-5

_node_ids = itertools.count()
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _freeze(array, op):
    if not np.isfinite(array).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    array.flags.writeable = False
    return array


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _freeze(np.array(data, dtype=np.float64), "leaf")
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @classmethod
    def _result(cls, op, data, parents, backward):
        out = cls.__new__(cls)
        out.data = _freeze(np.asarray(data, dtype=np.float64), op)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.node_id = next(_node_ids)
        out.op = op
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def assign(self, array):
        """Replace the value in place of an optimizer or loader update."""
        array = np.array(array, dtype=np.float64)
        if array.shape != self.data.shape:
            raise ShapeError(f"cannot assign shape {array.shape} to tensor of shape {self.data.shape}")
        self.data = _freeze(array, "assign")

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, grad):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def parameter(data):
    return Tensor(data, requires_grad=True)


def constant(data):
    return Tensor(data, requires_grad=False)


class Graph:
    """Topologically ordered op records reachable from one output (inputs first)."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, output):
        """Every tensor reachable from ``output``, ordered by creation (node ids only grow)."""
        seen = {output.node_id: output}
        stack = [output]
        while stack:
            node = stack.pop()
            for parent in node._parents:
                if parent.node_id not in seen:
                    seen[parent.node_id] = parent
                    stack.append(parent)
        return cls([seen[i] for i in sorted(seen)])

    def __len__(self):
        return len(self.nodes)


def backward(loss, params=()):
    """Populate ``grad`` on every tensor that ``loss`` depends on.

    Tensors in ``params`` that ``loss`` never reaches get an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for param in params:
        if param.grad is None:
            param.zero_grad()
    return graph


# --- elementwise and reduction ops -------------------------------------------------


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ: {a.shape} vs {b.shape}")


def add(a, b):
    _same_shape("add", a, b)

    def _backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return Tensor._result("add", a.data + b.data, (a, b), _backward)


def sub(a, b):
    _same_shape("sub", a, b)

    def _backward(g):
        a._accumulate(g)
        b._accumulate(-g)

    return Tensor._result("sub", a.data - b.data, (a, b), _backward)


def mul(a, b):
    _same_shape("mul", a, b)

    def _backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return Tensor._result("mul", a.data * b.data, (a, b), _backward)


def scale(x, factor):
    factor = float(factor)

    def _backward(g):
        x._accumulate(g * factor)

    return Tensor._result("scale", x.data * factor, (x,), _backward)


def square(x):
    def _backward(g):
        x._accumulate(2.0 * x.data * g)

    return Tensor._result("square", x.data * x.data, (x,), _backward)


def add_bias(x, b):
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")

    def _backward(g):
        x._accumulate(g)
        b._accumulate(g.reshape(-1, b.shape[0]).sum(axis=0))

    return Tensor._result("add_bias", x.data + b.data, (x, b), _backward)


def total(x):
    def _backward(g):
        x._accumulate(np.full_like(x.data, g.reshape(-1)[0]))

    return Tensor._result("total", np.array(x.data.sum()), (x,), _backward)


def weighted_total(x, coef):
    """Scalar sum(coef * x) with a constant coefficient array."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.shape != x.shape:
        raise ShapeError(f"weighted_total: coefficients {coef.shape} vs tensor {x.shape}")

    def _backward(g):
        x._accumulate(coef * g.reshape(-1)[0])

    return Tensor._result("weighted_total", np.array((coef * x.data).sum()), (x,), _backward)


# --- linear algebra and indexing --------------------------------------------------------


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return Tensor._result("matmul", a.data @ b.data, (a, b), _backward)


def take_rows(x, rows):
    rows = np.asarray(rows, dtype=np.int64)

    def _backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, rows, g)
        x._accumulate(gx)

    return Tensor._result("take_rows", x.data[rows], (x,), _backward)


def scatter_rows(x, rows, n_rows):
    """Inverse of take_rows: place row r of ``x`` at ``rows[r]`` of an ``n_rows`` zero matrix."""
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((n_rows,) + x.shape[1:])
    np.add.at(out, rows, x.data)

    def _backward(g):
        x._accumulate(g[rows])

    return Tensor._result("scatter_rows", out, (x,), _backward)


def select_column(x, rows, column):
    """Vector x[rows, column] of a 2-D tensor."""
    rows = np.asarray(rows, dtype=np.int64)

    def _backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, column), g)
        x._accumulate(gx)

    return Tensor._result("select_column", x.data[rows, column], (x,), _backward)


def scale_rows(x, weights):
    if weights.data.ndim != 1 or x.data.ndim != 2 or weights.shape[0] != x.shape[0]:
        raise ShapeError(f"scale_rows: weights {weights.shape} do not match rows of {x.shape}")
    w = weights.data[:, None]

    def _backward(g):
        x._accumulate(g * w)
        weights._accumulate((g * x.data).sum(axis=1))

    return Tensor._result("scale_rows", x.data * w, (x, weights), _backward)


# --- activations -------------------------------------------------------------------------


def relu(x):
    def _backward(g):
        x._accumulate(g * (x.data > 0))

    return Tensor._result("relu", np.maximum(x.data, 0.0), (x,), _backward)


def gelu(x):
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def _backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        x._accumulate(g * (cdf + x.data * pdf))

    return Tensor._result("gelu", x.data * cdf, (x,), _backward)


_ACTIVATIONS = {"relu": relu, "gelu": gelu}


def activation(x, kind="relu"):
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ParameterError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None


def dropout(x, rate, rng, training):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def _backward(g):
        x._accumulate(g * keep)

    return Tensor._result("dropout", x.data * keep, (x,), _backward)


# --- normalisation and softmax --------------------------------------------------------


def _softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_temp(logits, tau):
    """Softmax over the last axis of logits / tau."""
    if not (tau > 0.0 and math.isfinite(tau)):
        raise ParameterError(f"softmax temperature must be positive and finite, got {tau}")
    probs = _softmax(logits.data / tau)

    def _backward(g):
        dz = probs * (g - (g * probs).sum(axis=-1, keepdims=True))
        logits._accumulate(dz / tau)

    return Tensor._result("softmax_temp", probs, (logits,), _backward)


def layer_norm(x, gain, bias, eps=LN_EPS):
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs at least 2 features, got shape {x.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def _backward(g):
        rows = g.reshape(-1, d)
        gain._accumulate((rows * xhat.reshape(-1, d)).sum(axis=0))
        bias._accumulate(rows.sum(axis=0))
        dxhat = g * gain.data
        dx = inv / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        x._accumulate(dx)

    return Tensor._result("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), _backward)


def cross_entropy(logits, targets, smoothing=0.0):
    """Mean token cross-entropy (natural log) of rows of ``logits`` against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n, v = logits.shape
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    nll = -log_probs[rows, targets]
    if smoothing:
        nll = (1.0 - smoothing) * nll - smoothing * log_probs.mean(axis=1)
    probs = np.exp(log_probs)

    def _backward(g):
        target_dist = np.full((n, v), smoothing / v)
        target_dist[rows, targets] += 1.0 - smoothing
        logits._accumulate((probs - target_dist) * (g.reshape(-1)[0] / n))

    return Tensor._result("cross_entropy", np.array(nll.mean()), (logits,), _backward)


# --- attention ---------------------------------------------------------------------------


def attention(q, k, v, causal=False):
    """Scaled dot-product attention softmax(QK^T/sqrt(d_k))V.

    Inputs are [s x d] or carry one leading batch axis [b x s x d].
    """
    if not (q.data.ndim == k.data.ndim == v.data.ndim and q.data.ndim in (2, 3)):
        raise ShapeError(f"attention: incompatible ranks {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise ShapeError(f"attention: Q {q.shape}, K {k.shape}, V {v.shape} do not line up")
    batched = q.data.ndim == 3
    qd = q.data if batched else q.data[None]
    kd = k.data if batched else k.data[None]
    vd = v.data if batched else v.data[None]
    s_q, s_k = qd.shape[1], kd.shape[1]
    factor = 1.0 / math.sqrt(qd.shape[-1])
    scores = np.matmul(qd, kd.transpose(0, 2, 1)) * factor
    if causal:
        if s_q != s_k:
            raise ShapeError(f"causal attention needs square scores, got {s_q}x{s_k}")
        scores = np.where(np.triu(np.ones((s_q, s_k), dtype=bool), k=1), MASK_VALUE, scores)
    probs = _softmax(scores)
    out = np.matmul(probs, vd)

    def _backward(g):
        g3 = g if batched else g[None]
        dv = np.matmul(probs.transpose(0, 2, 1), g3)
        dp = np.matmul(g3, vd.transpose(0, 2, 1))
        ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True)) * factor
        dq = np.matmul(ds, kd)
        dk = np.matmul(ds.transpose(0, 2, 1), qd)
        if not batched:
            dq, dk, dv = dq[0], dk[0], dv[0]
        q._accumulate(dq)
        k._accumulate(dk)
        v._accumulate(dv)

    return Tensor._result("attention", out if batched else out[0], (q, k, v), _backward)


def split_heads(x, batch, heads):
    """[(batch*s) x d_model] -> [(batch*heads) x s x d_head]."""
    rows, d_model = x.shape
    s, d_head = rows // batch, d_model // heads

    def _backward(g):
        x._accumulate(g.reshape(batch, heads, s, d_head).transpose(0, 2, 1, 3).reshape(rows, d_model))

    data = x.data.reshape(batch, s, heads, d_head).transpose(0, 2, 1, 3).reshape(batch * heads, s, d_head)
    return Tensor._result("split_heads", data, (x,), _backward)


def merge_heads(x, batch, heads):
    """Inverse of split_heads."""
    _, s, d_head = x.shape

    def _backward(g):
        x._accumulate(g.reshape(batch, s, heads, d_head).transpose(0, 2, 1, 3).reshape(batch * heads, s, d_head))

    data = x.data.reshape(batch, heads, s, d_head).transpose(0, 2, 1, 3).reshape(batch * s, heads * d_head)
    return Tensor._result("merge_heads", data, (x,), _backward)


@dataclass
class AttentionParams:
    """Per-head projections stacked column-wise: head i owns columns [i*d_head, (i+1)*d_head)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    def named(self):
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


def multi_head(q_in, k_in, v_in, params, heads, causal=False, batch=1):
    """Multi-head attention over ``batch`` sequences stacked row-wise."""
    d_model = params.w_q.shape[0]
    if heads < 1 or d_model % heads:
        raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
    if q_in.shape[0] % batch:
        raise ShapeError(f"multi_head: {q_in.shape[0]} rows do not split into {batch} sequences")
    q = split_heads(matmul(q_in, params.w_q), batch, heads)
    k = split_heads(matmul(k_in, params.w_k), batch, heads)
    v = split_heads(matmul(v_in, params.w_v), batch, heads)
    heads_out = attention(q, k, v, causal=causal)
    return matmul(merge_heads(heads_out, batch, heads), params.w_o)


def ffn(x, w1, b1, w2, b2, kind="relu"):
    """W2 . act(W1 . x + b1) + b2, rows of ``x`` are tokens."""
    if w1.shape[0] != x.shape[-1] or w2.shape[0] != w1.shape[1] or w2.shape[1] != x.shape[-1]:
        raise ShapeError(f"ffn: x {x.shape}, W1 {w1.shape}, W2 {w2.shape} do not compose")
    hidden = activation(add_bias(matmul(x, w1), b1), kind)
    return add_bias(matmul(hidden, w2), b2)
