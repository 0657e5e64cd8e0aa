import os
import subprocess
import sys
from pathlib import Path

from dagster import AssetExecutionContext, asset

from evomoe.routing import read_trace

CONFIG = os.getenv("EVOMOE_CONFIG", "configs/toy.yaml")
RUN_DIR = Path(os.getenv("EVOMOE_RUN_DIR", "runs/pipeline"))
SIM_NODES = os.getenv("EVOMOE_SIM_NODES", "2")
SIM_GPUS = os.getenv("EVOMOE_SIM_GPUS_PER_NODE", "2")


def _evomoe(*args):
    """Run one CLI subcommand and return its stdout payload."""
    done = subprocess.run([sys.executable, "-m", "evomoe", *args], check=True, capture_output=True, text=True)
    return done.stdout


@asset(group_name="training")
def trained_run(context: AssetExecutionContext):
    """Trains the configured model; metrics, routing trace and checkpoints land in the run dir."""
    context.log.info(f"Training {CONFIG} into {RUN_DIR / 'train'}")
    _evomoe("train", CONFIG, "--out", str(RUN_DIR / "train"))


@asset(deps=[trained_run], group_name="evaluation")
def valid_perplexity(context: AssetExecutionContext):
    """Valid-split perplexity of the final checkpoint."""
    payload = _evomoe("eval", str(RUN_DIR / "train" / "checkpoints" / "last.evmo"), "--split", "valid")
    (RUN_DIR / "valid_perplexity.json").write_text(payload)
    context.log.info(payload.strip())


@asset(deps=[trained_run], group_name="evaluation")
def gate_sweep_csv(context: AssetExecutionContext):
    """Temperature sweep of the trained gate."""
    out = RUN_DIR / "gate_sweep.csv"
    _evomoe("gate-sweep", "--ckpt", str(RUN_DIR / "train" / "checkpoints" / "last.evmo"), "--out", str(out))
    context.log.info(f"Gate sweep written to {out}")


@asset(deps=[trained_run], group_name="routing")
def routing_trace(context: AssetExecutionContext):
    """Validates the routing trace written during training."""
    frame = read_trace(RUN_DIR / "train" / "routing.csv")
    context.log.info(f"Routing trace: {len(frame)} rows, {frame['iter'].nunique()} logged steps")


@asset(deps=[routing_trace], group_name="routing")
def comm_report(context: AssetExecutionContext):
    """Naive vs. hierarchical all-to-all report for the training trace."""
    out = RUN_DIR / "comm_report.json"
    _evomoe(
        "sim", str(RUN_DIR / "train" / "routing.csv"),
        "--nodes", SIM_NODES, "--gpus-per-node", SIM_GPUS, "--out", str(out),
    )
    context.log.info(f"Communication report written to {out}")


@asset(group_name="accounting")
def flops_report(context: AssetExecutionContext):
    """Parameter and FLOPs accounting of the configured model."""
    RUN_DIR.mkdir(parents=True, exist_ok=True)
    payload = _evomoe("flops", CONFIG)
    (RUN_DIR / "flops.json").write_text(payload)


@asset(group_name="experiments")
def ablation_results(context: AssetExecutionContext):
    """Balance-loss ablation across seeds (scripts/run_experiments.py)."""
    env = {**os.environ, "PYTHONPATH": os.getcwd()}
    subprocess.run([sys.executable, "scripts/run_experiments.py", "balance"], check=True, env=env)
    context.log.info("Balance ablation written to data/balance_ablation.csv")
