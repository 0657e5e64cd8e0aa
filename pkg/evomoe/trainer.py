"""
The two-phase training loop.

    shared  (iter < T_S)         one shared expert per MoE layer, no gate, task loss only
    dense   (T_S <= iter < T_D)  N masked experts, DTS gate routing above the threshold
    sparse  (iter >= T_D)        DTS gate at Top-1

The model is diversified at the first iteration >= T_S. Baseline routings
(switch, topk, hash) start in the sparse phase; the dense baseline never
leaves the shared phase.
"""

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import numerics as nx
from .config import Config
from .data import eval_windows, make_corpus, mask_tokens, sample_batch
from .errors import CheckpointError, ConfigError, EmptyBatchError, NonFiniteError, PhaseError, ShapeError, TrainingAborted
from .flops import ROUTING_GATE_MODE, count
from .gating import balance_loss, temperature_at
from .log import get_logger
from .model import ForwardContext, MoETransformer
from .optim import AdamState, adam_step, lr_at
from .routing import RoutingTrace, append_csv, load_cv, max_load_share
from .tracking import Tracker, clearml_enabled

PHASES = ("shared", "dense", "sparse")
RNG_STREAMS = ("data", "dropout", "noise")
METRICS_FILE = "metrics.jsonl"
TRACE_FILE = "routing.csv"
TOP_TOKENS_FILE = "routing_top_tokens.json"
SNAPSHOT_FILE = "nan_snapshot.json"
CHECKPOINT_DIR = "checkpoints"
LAST_CHECKPOINT = "last.evmo"
EVAL_MASK_STREAM = 2

log = get_logger(__name__)


def phase_at(model_config, iteration):
    if iteration < model_config.shared_iters:
        return "shared"
    if iteration < model_config.dense_iters:
        return "dense"
    return "sparse"


def current_temperature(model_config, iteration):
    return temperature_at(model_config.schedule, max(iteration - model_config.shared_iters, 0))


@dataclass
class TrainState:
    config: Config
    model: MoETransformer
    adam: AdamState
    rngs: dict
    corpus: object
    trace: RoutingTrace
    iteration: int = 0
    cumulative_flops: float = 0.0

    @property
    def phase(self):
        return phase_at(self.config.model, self.iteration)

    @property
    def finished(self):
        return self.iteration >= self.config.model.total_iters


@dataclass
class TrainResult:
    state: TrainState
    history: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    @property
    def losses(self):
        return [row["task_loss"] for row in self.history]


def _corpus(config):
    m, d = config.model, config.data
    return make_corpus(d.kind, d.size, m.vocab, config.data_seed, n_languages=d.n_languages)


def _trace(config):
    return RoutingTrace(config.model.n_experts, config.model.vocab, config.logging.tracked_tokens)


def init_state(config):
    """Fresh model, optimizer and rng streams, all derived from ``model.seed``."""
    init_seq, *stream_seqs = np.random.SeedSequence(config.model.seed).spawn(1 + len(RNG_STREAMS))
    model = MoETransformer(config.model, np.random.default_rng(init_seq))
    rngs = {name: np.random.default_rng(seq) for name, seq in zip(RNG_STREAMS, stream_seqs)}
    return TrainState(
        config=config, model=model, adam=AdamState(), rngs=rngs, corpus=_corpus(config), trace=_trace(config)
    )


def objective(task_loss, balance, phase):
    """Task loss alone in the shared phase, task + balance loss afterwards."""
    if phase not in PHASES:
        raise PhaseError(f"unknown phase {phase!r}")
    if phase == "shared":
        if balance is not None:
            raise PhaseError("balance loss supplied during the shared-expert phase")
        return task_loss
    if balance is None:
        return task_loss
    if not isinstance(balance, nx.Tensor):
        balance = nx.constant(np.array(float(balance)))
    return nx.add(task_loss, balance)


def balance_term(model, phase):
    """Sum of per-layer balance losses for the last forward, or None when it does not apply."""
    m = model.config
    if phase == "shared" or not m.balance_loss or m.routing == "hash":
        return None
    if phase == "sparse" and m.routing == "evomoe" and not m.balance_in_top1:
        return None
    term = None
    for layer, decision in model.decisions:
        loss = balance_loss(decision, model.blocks[layer].moe.gate.alpha)
        term = loss if term is None else nx.add(term, loss)
    return term


def _batch(state, split_tokens):
    """(model inputs, targets, target mask or None) for one training step."""
    c = state.config
    inputs, targets = sample_batch(split_tokens, c.data.batch_size, c.model.context, state.rngs["data"])
    if c.model.arch == "encoder-only":
        masked_inputs, mask = mask_tokens(inputs, c.model.vocab, c.data.mask_prob, state.rngs["data"])
        return masked_inputs, inputs, mask
    return inputs, targets, None


def task_loss(model, inputs, targets, ctx, mask=None, smoothing=0.0):
    logits = model.forward(inputs, ctx)
    flat = np.asarray(targets, dtype=np.int64).reshape(-1)
    if mask is not None:
        rows = np.flatnonzero(np.asarray(mask).reshape(-1))
        logits = nx.take_rows(logits, rows)
        flat = flat[rows]
    return nx.cross_entropy(logits, flat, smoothing)


def _step_flops(state, phase):
    m = state.config.model
    tokens = state.config.data.batch_size * m.context
    if phase == "shared" or m.routing == "dense":
        mode, active = ("dense" if m.routing == "dense" else "shared"), None
    else:
        mode = ROUTING_GATE_MODE[m.routing]
        active = [d.mean_selected() for _, d in state.model.decisions]
    return 3.0 * count(m, mode, active_experts=active).forward_flops_per_token * tokens


def diversify(state):
    """Turn every shared MoE layer into N experts; moments of removed parameters are dropped."""
    removed = state.model.diversify()
    state.adam.drop(removed)
    log.info("Diversified %d MoE layer(s) at iteration %d", len(state.model.moe_layers), state.iteration)
    return removed


def train_step(state):
    """One optimizer step; returns the per-step record."""
    c = state.config
    m = c.model
    phase = state.phase
    started = time.perf_counter()
    temperature = None if phase == "shared" else current_temperature(m, state.iteration)
    ctx = ForwardContext(
        iteration=state.iteration,
        temperature=temperature if temperature is not None else 1.0,
        training=True,
        dropout_rng=state.rngs["dropout"],
        noise_rng=state.rngs["noise"],
    )
    inputs, targets, mask = _batch(state, state.corpus.split("train"))
    loss = task_loss(state.model, inputs, targets, ctx, mask, m.label_smoothing)
    balance = balance_term(state.model, phase)
    total = objective(loss, balance, phase)
    params = state.model.named_parameters()
    for param in params.values():
        param.grad = None
    nx.backward(total)
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    o = c.optim
    lr = lr_at(o, state.iteration, m.total_iters)
    adam_step(params, grads, state.adam, lr, o.beta1, o.beta2, o.eps, o.weight_decay, o.clip_norm)

    decisions = state.model.decisions
    loads = [d.loads for _, d in decisions]
    state.cumulative_flops += _step_flops(state, phase)
    elapsed = max(time.perf_counter() - started, 1e-12)
    record = {
        "iter": state.iteration,
        "phase": phase,
        "task_loss": loss.item(),
        "balance_loss": balance.item() if balance is not None else None,
        "temperature": temperature,
        "mean_selected_experts": float(np.mean([d.mean_selected() for _, d in decisions])) if decisions else 1.0,
        "tokens_per_sec": inputs.size / elapsed,
        "cumulative_flops": state.cumulative_flops,
        "load_cv": float(np.mean([load_cv(x) for x in loads])) if loads else None,
        "max_load_share": float(np.mean([max_load_share(x) for x in loads])) if loads else None,
        "lr": lr,
    }
    return record, np.asarray(inputs).reshape(-1)



def log_routing(state, token_ids):
    """Record the last forward's routing in the run's trace; returns the new records."""
    if not state.model.decisions:
        raise PhaseError("no routed MoE layer in the last forward")
    return state.trace.log(state.iteration, state.model.decisions, token_ids)


# --- persistence -------------------------------------------------------------------------


def state_blobs(state):
    blobs = {name: p.data for name, p in state.model.named_parameters().items()}
    for name, value in state.adam.m.items():
        blobs[f"adam.m/{name}"] = np.asarray(value, dtype=np.float64)
    for name, value in state.adam.v.items():
        blobs[f"adam.v/{name}"] = np.asarray(value, dtype=np.float64)
    for layer, counts in state.trace.token_counts.items():
        blobs[f"trace.counts/{layer}"] = counts.astype(np.float64)
    return blobs


def save_state(state, path):
    meta = {
        "iteration": state.iteration,
        "adam_step": state.adam.step,
        "adam_counts": dict(state.adam.counts),
        "rngs": {name: rng.bit_generator.state for name, rng in state.rngs.items()},
        "config": state.config.to_dict(),
        "diversified": bool(state.model.moe_layers) and state.model.diversified,
        "cumulative_flops": state.cumulative_flops,
    }
    return checkpoint.save(path, state_blobs(state), meta)


def load_state(path):
    """Rebuild a TrainState from a checkpoint file; any inconsistency is a CheckpointError."""
    blobs, meta = checkpoint.load(path)
    try:
        config = Config.from_dict(meta["config"])
        state = init_state(config)
        if meta["diversified"]:
            state.model.diversify()
        params = state.model.named_parameters()
        missing = sorted(set(params) - set(blobs))
        if missing:
            raise CheckpointError(f"checkpoint lacks parameter(s): {', '.join(missing[:5])}")
        for name, param in params.items():
            param.assign(blobs[name])
        state.adam = AdamState(step=int(meta["adam_step"]))
        for key, value in blobs.items():
            kind, _, name = key.partition("/")
            if kind == "adam.m":
                state.adam.m[name] = value
            elif kind == "adam.v":
                state.adam.v[name] = value
            elif kind == "trace.counts":
                state.trace.token_counts[int(name)] = value.astype(np.int64)
        state.adam.counts = {name: int(t) for name, t in meta["adam_counts"].items()}
        for name, rng_state in meta["rngs"].items():
            state.rngs[name].bit_generator.state = rng_state
        state.iteration = int(meta["iteration"])
        state.cumulative_flops = float(meta.get("cumulative_flops", 0.0))
    except (KeyError, TypeError, ValueError, ConfigError, ShapeError, NonFiniteError) as exc:
        raise CheckpointError(f"inconsistent checkpoint {path}: {exc}") from exc
    return state


class RunWriter:
    """Files of one training run; every method is a no-op without an output directory."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            (self.out_dir / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)

    def path(self, name):
        return None if self.out_dir is None else self.out_dir / name

    def metrics(self, line):
        if self.out_dir is not None:
            with open(self.out_dir / METRICS_FILE, "a") as f:
                f.write(json.dumps(line, sort_keys=True) + "\n")

    def trace(self, state, records):
        if self.out_dir is None or not records:
            return
        append_csv(state.trace.frame(records), self.out_dir / TRACE_FILE)
        corpus = state.corpus
        language_of = corpus.language_of if corpus.kind == "mixture" else None
        sidecar = state.trace.sidecar(language_of)
        (self.out_dir / TOP_TOKENS_FILE).write_text(json.dumps(sidecar, sort_keys=True))

    def checkpoint(self, state, name):
        if self.out_dir is None:
            return None
        path = self.out_dir / CHECKPOINT_DIR / name
        save_state(state, path)
        log.info("Checkpoint written: %s", path)
        return path

    def snapshot(self, state, cause, last_line):
        if self.out_dir is None:
            return None
        path = self.out_dir / SNAPSHOT_FILE
        weights = {
            name: {"max_abs": float(np.abs(p.data).max()), "norm": float(np.linalg.norm(p.data))}
            for name, p in state.model.named_parameters().items()
        }
        payload = {
            "iteration": state.iteration,
            "phase": state.phase,
            "cause": str(cause),
            "last_metrics": last_line,
            "weights": weights,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        return path


def train(config, out_dir=None, resume=None, until=None):
    """Run the training loop to ``model.total_iters`` (or ``until``) and return a TrainResult."""
    if resume is not None:
        state = load_state(resume)
        if config is not None and state.config.digest() != config.digest():
            log.warning("Resuming with the checkpoint's configuration; the given one differs")
        config = state.config
    else:
        state = init_state(config)
    result = TrainResult(state=state)
    if state.finished:
        log.info("Run already finished at iteration %d; nothing to do", state.iteration)
        return result

    m, lg = config.model, config.logging
    stop = m.total_iters if until is None else min(until, m.total_iters)
    writer = RunWriter(out_dir)
    tracker = Tracker(f"train_{m.routing}_seed{m.seed}", enabled=clearml_enabled(config), config=config)
    boundaries = {b for b in (m.shared_iters, m.dense_iters) if 0 < b < m.total_iters}
    log.info("Training %s routing from iteration %d to %d", m.routing, state.iteration, stop)
    last_line = None
    try:
        while state.iteration < stop:
            it = state.iteration
            if it >= m.shared_iters and state.model.moe_layers and not state.model.diversified:
                diversify(state)
            if it in boundaries:
                result.checkpoints.append(writer.checkpoint(state, f"iter_{it:06d}.evmo"))
            try:
                record, token_ids = train_step(state)
            except NonFiniteError as exc:
                snapshot = writer.snapshot(state, exc, last_line)
                writer.checkpoint(state, "nan.evmo")
                raise TrainingAborted(it, snapshot, exc) from exc
            result.history.append(record)
            if it % lg.trace_every == 0 and state.model.decisions:
                writer.trace(state, log_routing(state, token_ids))
            if it % lg.log_every == 0:
                last_line = {k: v for k, v in record.items() if k != "lr"}
                result.metrics.append(last_line)
                writer.metrics(last_line)
                tracker.report(last_line)
                log.debug("iter %d %s loss %.4f", it, record["phase"], record["task_loss"])
            state.iteration += 1
            if lg.checkpoint_every and state.iteration % lg.checkpoint_every == 0:
                result.checkpoints.append(writer.checkpoint(state, f"iter_{state.iteration:06d}.evmo"))
        result.checkpoints.append(writer.checkpoint(state, LAST_CHECKPOINT))
    finally:
        tracker.close()
    result.checkpoints = [p for p in result.checkpoints if p is not None]
    log.info("Stopped at iteration %d", state.iteration)
    return result


def evaluate(state, split="valid", temperature=None, force_dense=False, max_batches=None):
    """Perplexity on ``split`` in eval mode: no dropout, no gate noise, no training rng touched."""
    c = state.config
    m = c.model
    tokens = state.corpus.split(split)
    tau = temperature if temperature is not None else current_temperature(m, state.iteration)
    ctx = ForwardContext(iteration=state.iteration, temperature=tau, training=False, force_dense_gate=force_dense)
    mask_rng = np.random.default_rng([m.seed, EVAL_MASK_STREAM])
    nll, n_tokens, selected = 0.0, 0, []
    for index, (inputs, targets) in enumerate(eval_windows(tokens, m.context, c.data.batch_size)):
        if max_batches is not None and index >= max_batches:
            break
        mask = None
        if m.arch == "encoder-only":
            targets = inputs
            inputs, mask = mask_tokens(inputs, m.vocab, c.data.mask_prob, mask_rng)
        loss = task_loss(state.model, inputs, targets, ctx, mask)
        counted = int(mask.sum()) if mask is not None else targets.size
        nll += loss.item() * counted
        n_tokens += counted
        selected.extend(d.mean_selected() for _, d in state.model.decisions)
    if n_tokens == 0:
        raise EmptyBatchError(f"split {split!r} produced no evaluation tokens")
    return {
        "split": split,
        "ppl": math.exp(nll / n_tokens),
        "tokens": n_tokens,
        "mean_selected_experts": float(np.mean(selected)) if selected else 1.0,
    }
