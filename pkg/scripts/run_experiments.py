import os
import sys

import pandas as pd
from evomoe.config import load_config
from evomoe.ep_sim import straggler_makespan
from evomoe.routing import specialization_summary
from evomoe.tracking import Tracker
from evomoe.trainer import evaluate, train

BASE_CONFIG = os.getenv("EVOMOE_CONFIG", "configs/toy.yaml")
SWITCH_CONFIG = os.getenv("EVOMOE_SWITCH_CONFIG", "configs/switch.yaml")
DATA_DIR = os.getenv("EVOMOE_DATA_DIR", "data")
SEEDS = [int(s) for s in os.getenv("EVOMOE_SEEDS", "0,1,2").split(",")]
USE_CLEARML = os.getenv("EVOMOE_CLEARML", "0") == "1"
PER_TOKEN_COST = 1e-6


def _config(path, seed, *overrides):
    return load_config(path, [f"model.seed={seed}", *overrides], environ={})


def _save(frame, name):
    os.makedirs(DATA_DIR, exist_ok=True)
    path = os.path.join(DATA_DIR, name)
    frame.to_csv(path, index=False)
    print(f"Saved {len(frame)} rows to {path}")
    return path


def _last_loads(state):
    """Per-layer load histograms of the last traced step."""
    records = state.trace.records
    if not records:
        return []
    last = records[-1].iteration
    return [r.loads for r in records if r.iteration == last]


def balance_ablation(steps=2000, window=200):
    """Final-window mean load CV with and without the balance loss, plus straggler makespan."""
    tracker = Tracker("Balance_Loss_Ablation", enabled=USE_CLEARML)
    rows = []
    for seed in SEEDS:
        for alpha in (0.0, 0.1):
            print(f"\n--- seed {seed}, alpha {alpha} ---")
            config = _config(BASE_CONFIG, seed, f"model.alpha={alpha}", f"model.total_iters={steps}")
            result = train(config)
            cvs = [r["load_cv"] for r in result.history[-window:] if r["load_cv"] is not None]
            mean_cv = sum(cvs) / len(cvs) if cvs else float("nan")
            stragglers = [straggler_makespan(loads, PER_TOKEN_COST) for loads in _last_loads(result.state)]
            makespan = max((s["makespan"] for s in stragglers), default=float("nan"))
            utilization = min((s["utilization"] for s in stragglers), default=float("nan"))
            rows.append({"seed": seed, "alpha": alpha, "mean_load_cv": mean_cv,
                         "makespan": makespan, "utilization": utilization})
            tracker.report_scalar("mean load CV", f"alpha={alpha}", mean_cv, iteration=seed)
            tracker.report_scalar("straggler makespan", f"alpha={alpha}", makespan, iteration=seed)
            print(f"   - mean load CV {mean_cv:.4f}, makespan {makespan:.6f}s, utilization {utilization:.3f}")
    frame = pd.DataFrame(rows)
    wide = frame.pivot(index="seed", columns="alpha", values="mean_load_cv")
    print(f"\nBalanced loads in every seed: {bool((wide[0.1] < wide[0.0]).all())}")
    tracker.close()
    _save(frame, "balance_ablation.csv")
    return frame


def two_phase_comparison(steps=5000):
    """Valid perplexity of EvoMoE against the Switch-style baseline at matched steps."""
    tracker = Tracker("EvoMoE_vs_Switch", enabled=USE_CLEARML)
    rows = []
    for seed in SEEDS:
        for name, path in (("evomoe", BASE_CONFIG), ("switch", SWITCH_CONFIG)):
            config = _config(path, seed, f"model.total_iters={steps}")
            result = train(config)
            ppl = evaluate(result.state, "valid")["ppl"]
            rows.append({"seed": seed, "routing": name, "valid_ppl": ppl})
            tracker.report_scalar("valid ppl", name, ppl, iteration=seed)
            print(f"seed {seed} {name}: valid ppl {ppl:.4f}")
    frame = pd.DataFrame(rows)
    wide = frame.pivot(index="seed", columns="routing", values="valid_ppl")
    wins = int((wide["evomoe"] <= wide["switch"]).sum())
    worst = float((wide["evomoe"] / wide["switch"]).max())
    print(f"\nEvoMoE <= Switch in {wins}/{len(wide)} seeds; worst ratio {worst:.4f}")
    tracker.close()
    _save(frame, "two_phase_comparison.csv")
    return frame


def schedule_sweep(steps=5000, pairs=((2.0, 0.3), (1.0, 0.3), (2.0, 0.1), (4.0, 0.3))):
    """Valid perplexity for different (max, min) temperatures over a fixed decay window."""
    tracker = Tracker("Temperature_Scheduler_Sweep", enabled=USE_CLEARML)
    rows = []
    for max_temp, min_temp in pairs:
        for seed in SEEDS:
            config = _config(
                BASE_CONFIG, seed, f"model.total_iters={steps}",
                f"model.schedule.max_temp={max_temp}", f"model.schedule.min_temp={min_temp}",
            )
            ppl = evaluate(train(config).state, "valid")["ppl"]
            rows.append({"max_temp": max_temp, "min_temp": min_temp, "seed": seed, "valid_ppl": ppl})
            tracker.report_scalar("valid ppl", f"{max_temp}->{min_temp}", ppl, iteration=seed)
    frame = pd.DataFrame(rows)
    print(frame.groupby(["max_temp", "min_temp"])["valid_ppl"].mean())
    tracker.close()
    _save(frame, "schedule_sweep.csv")
    return frame


def specialization_report(steps=5000):
    """Experts whose top-5 token list is dominated by one sub-language."""
    rows = []
    for seed in SEEDS:
        result = train(_config(BASE_CONFIG, seed, f"model.total_iters={steps}"))
        state = result.state
        sidecar = state.trace.sidecar(state.corpus.language_of)
        found = specialization_summary(sidecar)
        print(f"seed {seed}: {len(found)} specialised expert(s)")
        for item in found:
            rows.append({"seed": seed, **item})
        if not found:
            rows.append({"seed": seed, "layer": None, "expert": None, "language": None, "count": 0})
    frame = pd.DataFrame(rows)
    _save(frame, "specialization.csv")
    return frame


EXPERIMENTS = {
    "balance": balance_ablation,
    "compare": two_phase_comparison,
    "schedule": schedule_sweep,
    "specialization": specialization_report,
}

if __name__ == "__main__":
    names = sys.argv[1:] or list(EXPERIMENTS)
    for name in names:
        if name not in EXPERIMENTS:
            sys.exit(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
        EXPERIMENTS[name]()
