"""
Run configuration: YAML sections mapped one-to-one onto frozen dataclasses.

    model:   architecture, routing and phase boundaries (ModelConfig)
    optim:   Adam and learning-rate schedule (OptimConfig)
    data:    synthetic corpus and batching (DataConfig)
    logging: metric/trace cadence and tracking (LoggingConfig)
"""

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError, EvoMoEError
from .gating import TemperatureSchedule

ROUTINGS = ("evomoe", "switch", "topk", "hash", "dense")
ARCHS = ("decoder-only", "encoder-only")
CORPUS_KINDS = ("markov", "copy", "mixture")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d_model: int = 64
    d_ff: int = 256
    heads: int = 4
    vocab: int = 64
    context: int = 32
    n_experts: int = 4
    moe_layers: tuple = None
    arch: str = "decoder-only"
    activation: str = "gelu"
    dropout: float = 0.1
    routing: str = "evomoe"
    top_k: int = 2
    mask_ratio: float = 0.1
    shared_iters: int = 500
    total_iters: int = 5000
    schedule: TemperatureSchedule = field(default_factory=lambda: TemperatureSchedule(decay_iters=1000, dense_iters=1500))
    alpha: float = 0.1
    threshold: float = 0.001
    gate_noise: bool = True
    balance_loss: bool = True
    balance_in_top1: bool = True
    label_smoothing: float = 0.0
    seed: int = 0

    @property
    def dense_iters(self):
        return self.schedule.dense_iters

    @property
    def moe_layer_indices(self):
        if self.routing == "dense":
            return ()
        if self.moe_layers is None:
            # every other FFN, starting with the first (odd layers counted from 1)
            return tuple(range(0, self.layers, 2))
        return tuple(self.moe_layers)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-4
    warmup_iters: int = 100
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 0.0
    lr_power: float = 1.0


@dataclass(frozen=True)
class DataConfig:
    kind: str = "mixture"
    size: int = 200_000
    n_languages: int = 4
    batch_size: int = 8
    mask_prob: float = 0.15
    seed: int = None


@dataclass(frozen=True)
class LoggingConfig:
    log_every: int = 10
    trace_every: int = 50
    checkpoint_every: int = 0
    tracked_tokens: tuple = (0, 1, 2, 3)
    clearml: bool = False


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    @property
    def data_seed(self):
        return self.model.seed if self.data.seed is None else self.data.seed

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def canonical_text(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, raw):
        raw = {} if raw is None else raw
        _reject_unknown("", raw, cls)
        try:
            model_raw = dict(raw.get("model") or {})
            _reject_unknown("model", model_raw, ModelConfig)
            _floats("model", model_raw, ModelConfig)
            schedule_raw = model_raw.pop("schedule", None) or {}
            _reject_unknown("model.schedule", schedule_raw, TemperatureSchedule)
            _floats("model.schedule", schedule_raw, TemperatureSchedule)
            if model_raw.get("moe_layers") is not None:
                model_raw["moe_layers"] = tuple(int(i) for i in model_raw["moe_layers"])
            schedule = _build_schedule(schedule_raw, model_raw)
            model = ModelConfig(schedule=schedule, **model_raw)
            optim = _section("optim", raw, OptimConfig)
            data = _section("data", raw, DataConfig)
            logging_raw = dict(raw.get("logging") or {})
            _reject_unknown("logging", logging_raw, LoggingConfig)
            if "tracked_tokens" in logging_raw:
                logging_raw["tracked_tokens"] = tuple(int(t) for t in logging_raw["tracked_tokens"])
            config = cls(model=_normalise(model), optim=optim, data=data, logging=LoggingConfig(**logging_raw))
        except EvoMoEError as exc:
            raise ConfigError(str(exc)) from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        validate(config)
        return config


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _reject_unknown(section, raw, cls):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section or '<root>'} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        where = f"{section}." if section else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")


def _floats(section, raw, cls):
    """PyYAML reads exponent literals without a dot (1e-3) as strings; coerce them for float fields."""
    for f in dataclasses.fields(cls):
        value = raw.get(f.name)
        if isinstance(f.default, float) and isinstance(value, str):
            try:
                raw[f.name] = float(value)
            except ValueError:
                raise ConfigError(f"{section}.{f.name} must be a number, got {value!r}") from None


def _section(name, raw, cls):
    values = dict(raw.get(name) or {})
    _reject_unknown(name, values, cls)
    _floats(name, values, cls)
    return cls(**values)


def _build_schedule(schedule_raw, model_raw):
    shared = int(model_raw.get("shared_iters", ModelConfig.shared_iters))
    total = int(model_raw.get("total_iters", ModelConfig.total_iters))
    values = dict(schedule_raw)
    values.setdefault("dense_iters", max(shared, min(1500, total)))
    if values.get("decay_iters") is None:
        values["decay_iters"] = max(int(values["dense_iters"]) - shared, 0)
    return TemperatureSchedule(**values)


def _normalise(model):
    """Pin the phase boundaries implied by non-EvoMoE routings."""
    if model.routing == "dense":
        return dataclasses.replace(
            model,
            shared_iters=model.total_iters,
            schedule=dataclasses.replace(model.schedule, dense_iters=model.total_iters),
        )
    if model.routing in ("switch", "topk", "hash"):
        return dataclasses.replace(model, shared_iters=0, schedule=dataclasses.replace(model.schedule, dense_iters=0))
    return model


def validate(config):
    m = config.model
    if m.routing not in ROUTINGS:
        raise ConfigError(f"model.routing must be one of {ROUTINGS}, got {m.routing!r}")
    if m.arch not in ARCHS:
        raise ConfigError(f"model.arch must be one of {ARCHS}, got {m.arch!r}")
    if config.data.kind not in CORPUS_KINDS:
        raise ConfigError(f"data.kind must be one of {CORPUS_KINDS}, got {config.data.kind!r}")
    if min(m.layers, m.total_iters) < 0 or min(m.d_model, m.d_ff, m.heads, m.vocab, m.context) < 1:
        raise ConfigError("model sizes must be positive")
    if m.d_model % m.heads:
        raise ConfigError(f"model.d_model={m.d_model} is not divisible by model.heads={m.heads}")
    if not 0 <= m.shared_iters <= m.dense_iters <= m.total_iters:
        raise ConfigError(
            f"need 0 <= shared_iters <= dense_iters <= total_iters, got "
            f"{m.shared_iters} / {m.dense_iters} / {m.total_iters}"
        )
    bad = [i for i in m.moe_layer_indices if not 0 <= i < m.layers]
    if bad:
        raise ConfigError(f"model.moe_layers has indices outside [0, {m.layers}): {bad}")
    if m.routing != "dense" and m.moe_layer_indices and m.n_experts < 2:
        raise ConfigError(f"model.n_experts must be >= 2 for routing {m.routing!r}")
    if m.routing == "topk" and not 1 <= m.top_k <= m.n_experts:
        raise ConfigError(f"model.top_k must be in [1, {m.n_experts}]")
    if not 0.0 <= m.threshold < 1.0 or m.alpha < 0.0 or not 0.0 <= m.mask_ratio <= 1.0:
        raise ConfigError("model.threshold in [0,1), model.alpha >= 0 and model.mask_ratio in [0,1] required")
    if not 0.0 <= m.dropout < 1.0 or not 0.0 <= m.label_smoothing < 1.0:
        raise ConfigError("model.dropout and model.label_smoothing must be in [0, 1)")
    if config.data.kind == "mixture" and config.data.n_languages > m.vocab:
        raise ConfigError("data.n_languages cannot exceed model.vocab")
    if config.data.batch_size < 1 or config.data.size < m.context + 2:
        raise ConfigError("data.batch_size must be >= 1 and data.size must exceed model.context + 1")
    if config.logging.log_every < 1 or config.logging.trace_every < 1:
        raise ConfigError("logging cadences must be >= 1")


def apply_override(raw, assignment):
    """Apply one ``section.key=value`` override to a raw config mapping."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    dotted, value = assignment.split("=", 1)
    keys = [k for k in dotted.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {assignment!r} has an empty key")
    node = raw
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {assignment!r} descends into a scalar")
    try:
        node[keys[-1]] = yaml.safe_load(value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {assignment!r}: {exc}") from exc
    return raw


def read_raw(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a mapping of sections")
    return raw


def load_config(path=None, overrides=(), environ=None):
    """Read a YAML config, apply ``--set`` overrides, then EVOMOE_SEED."""
    environ = os.environ if environ is None else environ
    raw = read_raw(path) if path is not None else {}
    raw = copy.deepcopy(raw)
    for assignment in overrides:
        apply_override(raw, assignment)
    seed = environ.get("EVOMOE_SEED")
    if seed:
        try:
            raw.setdefault("model", {})["seed"] = int(seed)
        except ValueError:
            raise ConfigError(f"EVOMOE_SEED must be an integer, got {seed!r}") from None
    return Config.from_dict(raw)
