"""
Command-line surface: ``python -m evomoe {train,eval,gate-sweep,sim,flops}``.

stdout carries only JSON or CSV payloads; logs go to stderr.
Exit codes: 0 ok, 2 usage/config/trace error, 3 numerical abort, 4 corrupt artifact.
"""

import argparse
import json
import platform
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .checkpoint import VERSION as CHECKPOINT_VERSION
from .config import load_config
from .ep_sim import Topology, assignment_from_trace, compare
from .errors import CheckpointError, ConfigError, EvoMoEError, TrainingAborted
from .flops import GATE_MODES, activated_params_identity, flops_count
from .log import configure, get_logger
from .routing import read_trace
from .trainer import (
    CHECKPOINT_DIR,
    LAST_CHECKPOINT,
    METRICS_FILE,
    TOP_TOKENS_FILE,
    TRACE_FILE,
    diversify,
    evaluate,
    init_state,
    load_state,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_CORRUPT = 4
MANIFEST_FILE = "manifest.json"

log = get_logger(__name__)


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    start_iter: int
    end_iter: int
    outputs: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _versions():
    return {
        "evomoe": __version__,
        "checkpoint_format": CHECKPOINT_VERSION,
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "python": platform.python_version(),
    }


def _emit(payload):
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")


def cmd_train(args):
    config = load_config(args.config, args.set) if args.config else None
    if config is None and args.resume is None:
        raise ConfigError("train needs a config file or --resume")
    out = Path(args.out)
    started = _now()
    result = train(config, out_dir=out, resume=args.resume, until=args.until)
    state = result.state
    if not result.history:
        _emit({"out": str(out), "iteration": state.iteration, "status": "already finished"})
        return EXIT_OK
    manifest = RunManifest(
        config_hash=state.config.digest(),
        seed=state.config.model.seed,
        start_iter=result.history[0]["iter"],
        end_iter=state.iteration,
        outputs={
            "metrics": str(out / METRICS_FILE),
            "routing_trace": str(out / TRACE_FILE),
            "top_tokens": str(out / TOP_TOKENS_FILE),
            "checkpoint": str(out / CHECKPOINT_DIR / LAST_CHECKPOINT),
            "checkpoints": [str(p) for p in result.checkpoints],
        },
        versions=_versions(),
        started_at=started,
        finished_at=_now(),
    )
    manifest.write(out / MANIFEST_FILE)
    _emit({"out": str(out), "iteration": state.iteration, "config_hash": manifest.config_hash})
    return EXIT_OK


def cmd_eval(args):
    state = load_state(args.ckpt)
    result = evaluate(state, args.split, max_batches=args.max_batches)
    _emit({"split": result["split"], "ppl": result["ppl"], "tokens": result["tokens"]})
    return EXIT_OK


def cmd_gate_sweep(args):
    if args.ckpt:
        state = load_state(args.ckpt)
    else:
        state = init_state(load_config(args.config, args.set))
        if state.model.moe_layers and not state.model.diversified:
            diversify(state)
    rows = []
    for tau in args.temps:
        result = evaluate(state, args.split, temperature=tau, force_dense=True, max_batches=args.max_batches)
        rows.append({"temperature": tau, "mean_selected_experts": result["mean_selected_experts"], "ppl": result["ppl"]})
    frame = pd.DataFrame(rows, columns=["temperature", "mean_selected_experts", "ppl"])
    if args.out:
        frame.to_csv(args.out, index=False)
        log.info("Gate sweep written to %s", args.out)
    frame.to_csv(sys.stdout, index=False)
    return EXIT_OK


def cmd_sim(args):
    frame = read_trace(args.trace)
    topology = Topology(
        nodes=args.nodes,
        gpus_per_node=args.gpus_per_node,
        intra_bw=args.intra_bw,
        inter_bw=args.inter_bw,
        intra_latency=args.intra_latency,
        inter_latency=args.inter_latency,
        nics_per_node=args.nics,
    )
    assignment = assignment_from_trace(
        frame, topology, d_model=args.d_model, iteration=args.iteration, layer=args.layer
    )
    report = compare(assignment, topology)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
        log.info("Communication report written to %s", args.out)
    log.info("Hierarchical speedup %.3fx", report["speedup"])
    _emit(report)
    return EXIT_OK


def cmd_flops(args):
    config = load_config(args.config, args.set)
    payload = flops_count(config, args.gate_mode).to_dict()
    payload["activated_params_identity"] = activated_params_identity(config)
    _emit(payload)
    return EXIT_OK


def _temps(text):
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"temperatures must be comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("at least one temperature is required")
    return values


def build_parser():
    parser = argparse.ArgumentParser(prog="evomoe", description="EvoMoE desk lab")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_overrides(p):
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")

    p = sub.add_parser("train", help="run the two-phase training loop")
    p.add_argument("config", nargs="?", help="YAML run config")
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--until", type=int, help="stop at this iteration")
    with_overrides(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint")
    p.add_argument("ckpt")
    p.add_argument("--split", default="valid", choices=("train", "valid", "test"))
    p.add_argument("--max-batches", type=int)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gate-sweep", help="mean selected experts and perplexity per temperature")
    p.add_argument("config", nargs="?")
    p.add_argument("--temps", type=_temps, default=[2.0, 1.0, 0.5, 0.3], help="comma-separated, e.g. 2,1,0.5")
    p.add_argument("--ckpt", help="sweep a trained checkpoint instead of a fresh model")
    p.add_argument("--split", default="valid", choices=("train", "valid", "test"))
    p.add_argument("--max-batches", type=int)
    p.add_argument("--out", help="also write the CSV here")
    with_overrides(p)
    p.set_defaults(handler=cmd_gate_sweep)

    p = sub.add_parser("sim", help="naive vs. hierarchical all-to-all from a routing trace")
    p.add_argument("trace")
    p.add_argument("--nodes", type=int, default=2)
    p.add_argument("--gpus-per-node", type=int, default=8)
    p.add_argument("--intra-bw", type=float, default=Topology.intra_bw)
    p.add_argument("--inter-bw", type=float, default=Topology.inter_bw)
    p.add_argument("--intra-latency", type=float, default=Topology.intra_latency)
    p.add_argument("--inter-latency", type=float, default=Topology.inter_latency)
    p.add_argument("--nics", type=int, default=1)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--iter", dest="iteration", type=int)
    p.add_argument("--layer", type=int)
    p.add_argument("--out", help="also write the report JSON here")
    p.set_defaults(handler=cmd_sim)

    p = sub.add_parser("flops", help="parameter and FLOPs report")
    p.add_argument("config", nargs="?")
    p.add_argument("--gate-mode", choices=GATE_MODES)
    with_overrides(p)
    p.set_defaults(handler=cmd_flops)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure(args.verbose)
    try:
        return args.handler(args)
    except TrainingAborted as exc:
        log.error(str(exc))
        return EXIT_NUMERICAL
    except CheckpointError as exc:
        log.error(str(exc))
        return EXIT_CORRUPT
    except EvoMoEError as exc:
        log.error(str(exc))
        return EXIT_USAGE
