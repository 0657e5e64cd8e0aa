"""
Routing statistics: per-step expert load histograms, tracked-token expert
choices and running per-expert token counts (top tokens per expert).

The CSV form has one row per (iter, layer, expert) with the token count.
"""

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import TraceFormatError

TRACE_COLUMNS = ["iter", "layer", "expert", "token_count"]
TOP_TOKENS = 5


def load_cv(loads):
    """Coefficient of variation (population std / mean) of one load histogram."""
    loads = np.asarray(loads, dtype=np.float64)
    mean = loads.mean() if loads.size else 0.0
    if mean == 0.0:
        return 0.0
    return float(loads.std() / mean)


def max_load_share(loads):
    loads = np.asarray(loads, dtype=np.float64)
    total = loads.sum()
    return float(loads.max() / total) if total > 0 else 0.0


@dataclass
class TraceRecord:
    iteration: int
    layer: int
    loads: np.ndarray
    tracked: dict = field(default_factory=dict)

    def rows(self):
        return [
            {"iter": self.iteration, "layer": self.layer, "expert": i, "token_count": int(c)}
            for i, c in enumerate(self.loads)
        ]


class RoutingTrace:
    def __init__(self, n_experts, vocab, tracked_tokens=()):
        self.n_experts = n_experts
        self.vocab = vocab
        self.tracked_tokens = tuple(tracked_tokens)
        self.records = []
        self.token_counts = {}

    def log(self, iteration, decisions, token_ids):
        """Append one record per routed layer; ``decisions`` is [(layer, GateDecision)]."""
        token_ids = np.asarray(token_ids, dtype=np.int64)
        added = []
        for layer, decision in decisions:
            tracked = {}
            for token in self.tracked_tokens:
                rows = np.flatnonzero(token_ids == token)
                tracked[int(token)] = [
                    [int(i) for i in np.flatnonzero(decision.selected[r])] for r in rows
                ]
            record = TraceRecord(iteration=iteration, layer=layer, loads=decision.loads, tracked=tracked)
            counts = self.token_counts.setdefault(layer, np.zeros((self.n_experts, self.vocab + 1), np.int64))
            for expert in range(decision.n_experts):
                np.add.at(counts[expert], token_ids[decision.selected[:, expert]], 1)
            self.records.append(record)
            added.append(record)
        return added

    def frame(self, records=None):
        records = self.records if records is None else records
        rows = [row for record in records for row in record.rows()]
        return pd.DataFrame(rows, columns=TRACE_COLUMNS)

    def top_tokens(self, k=TOP_TOKENS):
        """{layer: {expert: [(token, count), ...]}} with the k most frequent tokens per expert."""
        out = {}
        for layer, counts in sorted(self.token_counts.items()):
            out[layer] = {}
            for expert, row in enumerate(counts):
                order = np.argsort(-row, kind="stable")[:k]
                out[layer][expert] = [(int(t), int(row[t])) for t in order if row[t] > 0]
        return out

    def sidecar(self, language_of=None):
        """JSON-ready top-token lists, with token languages and dominance when known."""
        layers = {}
        for layer, experts in self.top_tokens().items():
            entry = {}
            for expert, tops in experts.items():
                item = {"tokens": [t for t, _ in tops], "counts": [c for _, c in tops]}
                if language_of is not None and tops:
                    languages = [language_of(t) for t, _ in tops]
                    known = [lang for lang in languages if lang is not None]
                    item["languages"] = languages
                    item["dominant_share"] = Counter(known).most_common(1)[0][1] / len(known) if known else 0.0
                entry[str(expert)] = item
            layers[str(layer)] = entry
        tracked = {}
        for record in self.records:
            for token, choices in record.tracked.items():
                tracked.setdefault(str(token), []).append(
                    {"iter": record.iteration, "layer": record.layer, "experts": choices}
                )
        return {"top_tokens": layers, "tracked_tokens": tracked}


def specialization_summary(sidecar, min_dominant=3):
    """Experts whose top-token list has at least ``min_dominant`` tokens of one language."""
    found = []
    for layer, experts in sidecar["top_tokens"].items():
        for expert, item in experts.items():
            known = [lang for lang in item.get("languages") or () if lang is not None]
            if not known:
                continue
            language, n = Counter(known).most_common(1)[0]
            if n >= min_dominant:
                found.append({"layer": int(layer), "expert": int(expert), "language": language, "count": n})
    return found


def append_csv(frame, path):
    path = Path(path)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False)


def trace_load_cv(frame):
    """Load CV for every (iter, layer) group of a trace frame."""
    grouped = frame.sort_values(["iter", "layer", "expert"]).groupby(["iter", "layer"])["token_count"]
    return grouped.apply(lambda s: load_cv(s.to_numpy())).rename("load_cv").reset_index()


def read_trace(path):
    """Parse and validate a routing trace CSV; errors carry the 1-based file line."""
    path = Path(path)
    if not path.is_file():
        raise TraceFormatError(f"trace file not found: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise TraceFormatError("empty trace file", line=1) from None
    except pd.errors.ParserError as exc:
        match = re.search(r"line (\d+)", str(exc))
        raise TraceFormatError(f"malformed row: {exc}", line=int(match.group(1)) if match else None) from None
    if list(raw.columns) != TRACE_COLUMNS:
        raise TraceFormatError(f"header must be {','.join(TRACE_COLUMNS)}, got {','.join(raw.columns)}", line=1)
    values = np.zeros((len(raw), len(TRACE_COLUMNS)), dtype=np.int64)
    for row_number, row in enumerate(raw.itertuples(index=False)):
        for col, cell in enumerate(row):
            try:
                value = int(cell)
            except ValueError:
                raise TraceFormatError(
                    f"column {TRACE_COLUMNS[col]} holds {cell!r}, expected an integer", line=row_number + 2
                ) from None
            if value < 0:
                raise TraceFormatError(f"column {TRACE_COLUMNS[col]} is negative", line=row_number + 2)
            values[row_number, col] = value
    return pd.DataFrame(values, columns=TRACE_COLUMNS)
