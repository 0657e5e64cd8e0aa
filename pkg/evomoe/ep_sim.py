"""
Trace-driven expert-parallel communication simulator.

Experts are striped round-robin over nodes * gpus_per_node workers. A routing
trace becomes a worker-to-worker token matrix, which is planned either as a
naive all-to-all (one message per worker pair) or hierarchically:

    gather   intra-node: local payload delivered directly, off-node payload to the node leader
    layout   zero-cost re-layout on the leader
    inter    one message per ordered node pair, leader to leader
    scatter  intra-node: leader delivers to each destination worker

Cost model: latency + bytes / bandwidth per message. Phases run one after the
other; within a phase intra messages serialise per sender and inter messages
per NIC. A message always leaves on the NIC picked by its destination, so adding
traffic never moves existing messages between links. Self-messages cost nothing.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ParameterError

BYTES_PER_VALUE = 8
NAIVE_PHASES = ("alltoall",)
HIERARCHICAL_PHASES = ("gather", "layout", "inter", "scatter")


@dataclass(frozen=True)
class Topology:
    nodes: int = 2
    gpus_per_node: int = 8
    intra_bw: float = 150e9
    inter_bw: float = 12.5e9
    intra_latency: float = 5e-6
    inter_latency: float = 2e-5
    nics_per_node: int = 1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ParameterError(f"topology.{name} must be positive, got {value}")

    @property
    def workers(self):
        return self.nodes * self.gpus_per_node

    def node_of(self, worker):
        return worker // self.gpus_per_node

    def leader(self, node):
        return node * self.gpus_per_node

    def tier(self, src, dst):
        return "intra" if self.node_of(src) == self.node_of(dst) else "inter"

    def cost(self, message):
        if message.src == message.dst:
            return 0.0
        if message.tier == "intra":
            return self.intra_latency + message.bytes / self.intra_bw
        return self.inter_latency + message.bytes / self.inter_bw

    def nic(self, message):
        """Sending NIC of an inter-node message, fixed by its destination worker."""
        dst = message.dst
        return (self.node_of(dst) + dst % self.gpus_per_node) % self.nics_per_node


@dataclass
class Assignment:
    """``tokens[src, dst]``: tokens source worker src sends to the worker owning their expert."""

    tokens: np.ndarray
    bytes_per_token: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.tokens.shape[1]:
            raise ParameterError(f"assignment must be a square worker matrix, got {self.tokens.shape}")
        if (self.tokens < 0).any():
            raise ParameterError("assignment token counts must be non-negative")

    @property
    def payload(self):
        return self.tokens * self.bytes_per_token

    @property
    def total_bytes(self):
        return int(self.payload.sum())


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    bytes: int
    tier: str
    phase: str
    final: bool = True


@dataclass
class CommPlan:
    kind: str
    phases: tuple
    messages: list = field(default_factory=list)

    def in_phase(self, phase):
        return [msg for msg in self.messages if msg.phase == phase]

    @property
    def routed_bytes(self):
        return sum(msg.bytes for msg in self.messages if msg.final)

    @property
    def wire_bytes(self):
        return sum(msg.bytes for msg in self.messages)

    @property
    def inter_messages(self):
        return [msg for msg in self.messages if msg.tier == "inter"]


def expert_loads(frame, iteration=None, layer=None):
    """Per-expert token counts summed over the selected trace rows."""
    rows = frame
    if iteration is not None:
        rows = rows[rows["iter"] == iteration]
    if layer is not None:
        rows = rows[rows["layer"] == layer]
    if rows.empty:
        raise ParameterError("no trace rows match the requested iteration/layer")
    n_experts = int(frame["expert"].max()) + 1
    return np.bincount(rows["expert"].to_numpy(), weights=rows["token_count"].to_numpy(), minlength=n_experts).astype(
        np.int64
    )


def assignment_from_loads(loads, topology, experts_per_worker=None, d_model=64):
    """Stripe experts round-robin and spread each expert's tokens evenly over source workers."""
    loads = np.asarray(loads, dtype=np.int64)
    workers = topology.workers
    n_experts = loads.size
    if n_experts % workers:
        raise ParameterError(f"{n_experts} experts cannot be placed evenly on {workers} workers")
    if experts_per_worker is not None and experts_per_worker * workers != n_experts:
        raise ParameterError(
            f"experts_per_worker={experts_per_worker} on {workers} workers does not cover {n_experts} experts"
        )
    tokens = np.zeros((workers, workers), dtype=np.int64)
    for expert, count in enumerate(loads):
        share, remainder = divmod(int(count), workers)
        column = np.full(workers, share, dtype=np.int64)
        column[:remainder] += 1
        tokens[:, expert % workers] += column
    return Assignment(tokens=tokens, bytes_per_token=d_model * BYTES_PER_VALUE)


def assignment_from_trace(frame, topology, experts_per_worker=None, d_model=64, iteration=None, layer=None):
    return assignment_from_loads(expert_loads(frame, iteration, layer), topology, experts_per_worker, d_model)


def plan_naive(assignment, topology):
    payload = assignment.payload
    plan = CommPlan(kind="naive", phases=NAIVE_PHASES)
    for src in range(topology.workers):
        for dst in range(topology.workers):
            if payload[src, dst] > 0:
                plan.messages.append(
                    Message(src, dst, int(payload[src, dst]), topology.tier(src, dst), "alltoall")
                )
    return plan


def plan_hierarchical(assignment, topology):
    payload = assignment.payload
    g = topology.gpus_per_node
    plan = CommPlan(kind="hierarchical", phases=HIERARCHICAL_PHASES)
    for src in range(topology.workers):
        node = topology.node_of(src)
        off_node = 0
        for dst in range(topology.workers):
            if payload[src, dst] == 0:
                continue
            if topology.node_of(dst) == node:
                plan.messages.append(Message(src, dst, int(payload[src, dst]), "intra", "gather"))
            else:
                off_node += int(payload[src, dst])
        if off_node:
            plan.messages.append(Message(src, topology.leader(node), off_node, "intra", "gather", final=False))
    for a in range(topology.nodes):
        for b in range(topology.nodes):
            if a == b:
                continue
            block = int(payload[a * g:(a + 1) * g, b * g:(b + 1) * g].sum())
            if block:
                plan.messages.append(
                    Message(topology.leader(a), topology.leader(b), block, "inter", "inter", final=False)
                )
    for dst in range(topology.workers):
        node = topology.node_of(dst)
        inbound = int(payload[:, dst].sum() - payload[node * g:(node + 1) * g, dst].sum())
        if inbound:
            plan.messages.append(Message(topology.leader(node), dst, inbound, "intra", "scatter"))
    return plan


def simulate_time(plan, topology):
    """Per-phase, per-tier and total simulated seconds of a plan."""
    phases = {}
    tiers = {"intra": 0.0, "inter": 0.0}
    for phase in plan.phases:
        links = {}
        for msg in plan.in_phase(phase):
            cost = topology.cost(msg)
            tiers[msg.tier] += cost
            if msg.tier == "intra":
                key = ("intra", msg.src)
            else:
                key = ("nic", topology.node_of(msg.src), topology.nic(msg))
            links[key] = links.get(key, 0.0) + cost
        phases[phase] = max(links.values(), default=0.0)
    return {"phases": phases, "tiers": tiers, "total": sum(phases.values())}


def _summary(plan, topology):
    timing = simulate_time(plan, topology)
    inter = plan.inter_messages
    return {
        "msgs": len(plan.messages),
        "bytes": plan.routed_bytes,
        "wire_bytes": plan.wire_bytes,
        "time": timing["total"],
        "phases": timing["phases"],
        "tiers": timing["tiers"],
        "inter_msgs": len(inter),
        "inter_bytes": sum(m.bytes for m in inter),
        "mean_inter_msg_bytes": (sum(m.bytes for m in inter) / len(inter)) if inter else 0.0,
    }


def compare(assignment, topology):
    """Naive vs. hierarchical report for one assignment."""
    naive = _summary(plan_naive(assignment, topology), topology)
    hier = _summary(plan_hierarchical(assignment, topology), topology)
    if hier["time"] == naive["time"] or hier["time"] == 0.0:
        speedup = 1.0
    else:
        speedup = naive["time"] / hier["time"]
    if naive["mean_inter_msg_bytes"] and hier["mean_inter_msg_bytes"]:
        size_ratio = hier["mean_inter_msg_bytes"] / naive["mean_inter_msg_bytes"]
    else:
        size_ratio = 1.0
    return {
        "topology": asdict(topology),
        "routed_bytes": assignment.total_bytes,
        "naive": naive,
        "hierarchical": hier,
        "speedup": speedup,
        "inter_message_size_ratio": size_ratio,
    }


def worker_loads(loads, workers):
    loads = np.asarray(loads, dtype=np.float64)
    return np.bincount(np.arange(loads.size) % workers, weights=loads, minlength=workers)


def straggler_makespan(loads, per_token_cost, workers=None):
    """Makespan (max worker time) and utilization (mean / max) for per-expert loads.

    Without ``workers`` every expert is its own worker.
    """
    if not per_token_cost > 0:
        raise ParameterError(f"per_token_cost must be positive, got {per_token_cost}")
    per_worker = np.asarray(loads, dtype=np.float64) if workers is None else worker_loads(loads, workers)
    if per_worker.size == 0:
        raise ParameterError("no loads given")
    busiest = per_worker.max()
    return {
        "makespan": float(busiest * per_token_cost),
        "utilization": float(per_worker.mean() / busiest) if busiest > 0 else 1.0,
    }
