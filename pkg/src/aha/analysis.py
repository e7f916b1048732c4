"""Full-attention usage statistics over recorded gate traces.

A :class:`GateTrace` stores the binary gates of one sequence as an
``(L, n, m)`` array.  Every statistic here is computed from integer gate
counts, so results are exact up to the final division.
"""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

TRACE_MAGIC = b"AHAT"
TRACE_VERSION = 1
REPORT_VERSION = 1


@dataclass
class GateTrace:
    gates: np.ndarray  # (L, n, m), values in {0, 1}
    task: str = ""
    sample_id: int | str = 0
    tokens: np.ndarray | None = None
    loss_mask: np.ndarray | None = None

    def __post_init__(self):
        g = np.asarray(self.gates)
        if g.ndim != 3:
            raise ValueError(f"gates must be (L, n, m), got shape {g.shape}")
        if not np.isin(g, (0, 1)).all():
            raise ValueError("gate values must be exactly 0 or 1")
        self.gates = g.astype(np.uint8)
        n = g.shape[1]
        for name in ("tokens", "loss_mask"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"{name} has length {len(arr)}, expected {n}")

    @property
    def num_layers(self) -> int:
        return self.gates.shape[0]

    @property
    def length(self) -> int:
        return self.gates.shape[1]

    @property
    def num_heads(self) -> int:
        return self.gates.shape[2]


def traces_from_gates(layer_gates: Sequence[np.ndarray], task: str | Sequence[str] = "",
                      tokens=None, loss_mask=None, start_id: int = 0) -> list[GateTrace]:
    """Split per-layer ``(batch, n, m)`` gate arrays into one trace per sequence."""
    stacked = np.stack([np.asarray(g) for g in layer_gates])  # (L, B, n, m)
    if stacked.ndim == 3:
        stacked = stacked[:, None]
    out = []
    for b in range(stacked.shape[1]):
        name = task if isinstance(task, str) else task[b]
        out.append(GateTrace(
            stacked[:, b], name, start_id + b,
            None if tokens is None else np.asarray(tokens[b]),
            None if loss_mask is None else np.asarray(loss_mask[b], dtype=bool)))
    return out


def _require(traces: Sequence[GateTrace]) -> None:
    if not traces:
        raise ValueError("no gate traces given")
    shapes = {(t.num_layers, t.num_heads) for t in traces}
    if len(shapes) != 1:
        raise ValueError(f"traces disagree on (layers, heads): {sorted(shapes)}")


def mu_f(traces: Sequence[GateTrace]) -> float:
    """Fraction of (layer, token, head) gates that chose full attention."""
    _require(traces)
    ones = sum(int(t.gates.sum()) for t in traces)
    total = sum(t.gates.size for t in traces)
    return ones / total


def mu_f_scored(traces: Sequence[GateTrace]) -> float | None:
    """Usage restricted to scored (answer / continuation) positions; None if unknown."""
    _require(traces)
    ones = total = 0
    for t in traces:
        if t.loss_mask is None:
            return None
        sel = t.gates[:, np.asarray(t.loss_mask, dtype=bool), :]
        ones += int(sel.sum())
        total += sel.size
    return ones / total if total else None


def per_head_counts(traces: Sequence[GateTrace]) -> tuple[np.ndarray, int]:
    """Integer ``(L, m)`` trigger counts and the number of tokens they cover."""
    _require(traces)
    counts = sum(t.gates.sum(axis=1, dtype=np.int64) for t in traces)
    return counts, sum(t.length for t in traces)


def per_head_usage(traces: Sequence[GateTrace]) -> np.ndarray:
    counts, tokens = per_head_counts(traces)
    return counts / tokens


def per_token_usage(trace: GateTrace) -> np.ndarray:
    """Length-n usage averaged over layers and heads."""
    return trace.gates.mean(axis=(0, 2))


def sorted_usage_curve(grid) -> list[tuple[int, int, float]]:
    """Heads ranked by usage, highest first; ties keep (layer, head) order."""
    grid = np.asarray(grid)
    cells = [(layer, head, float(grid[layer, head]))
             for layer in range(grid.shape[0]) for head in range(grid.shape[1])]
    return sorted(cells, key=lambda c: -c[2])


def top_share(curve: Sequence[tuple[int, int, float]], fraction: float = 0.1) -> float:
    """Share of total gate mass held by the top ``fraction`` of heads (at least one head)."""
    total = sum(u for _, _, u in curve)
    if total == 0:
        return 0.0
    k = max(1, math.ceil(round(fraction * len(curve), 9)))
    return sum(u for _, _, u in curve[:k]) / total


@dataclass(frozen=True)
class GapStat:
    mean_gap: float
    trigger_count: int
    num_tokens: int

    def to_json(self) -> dict:
        gap = "inf" if math.isinf(self.mean_gap) else self.mean_gap
        return {"mean_gap": gap, "trigger_count": self.trigger_count, "num_tokens": self.num_tokens}


def attention_gap(gates) -> GapStat:
    """Tokens processed per full-attention trigger for one head's gate stream.

    A head that never triggers gets ``inf`` with ``trigger_count == 0``.
    """
    g = np.asarray(gates).reshape(-1)
    if g.size < 1:
        raise ValueError("attention_gap needs at least one token")
    triggers = int(g.sum())
    return GapStat(g.size / triggers if triggers else math.inf, triggers, int(g.size))


def gap_table(traces: Sequence[GateTrace]) -> list[list[GapStat]]:
    """Per-head gap over the concatenation of all traces, in order."""
    _require(traces)
    stream = np.concatenate([t.gates for t in traces], axis=1)  # (L, N, m)
    return [[attention_gap(stream[layer, :, head]) for head in range(stream.shape[2])]
            for layer in range(stream.shape[0])]


def token_trace_export(usage, tokens, symbols=None) -> dict:
    """Per-token ``(symbol, usage)`` pairs plus the sequence average."""
    usage = np.asarray(usage, dtype=float)
    tokens = list(tokens)
    if len(usage) != len(tokens):
        raise ValueError(f"usage has length {len(usage)} but there are {len(tokens)} tokens")
    if symbols is None:
        from .tasks import symbol as symbols
    return {
        "tokens": [{"symbol": symbols(int(t)), "token": int(t), "usage": float(u)} for t, u in zip(tokens, usage)],
        "average": float(usage.mean()) if len(usage) else 0.0,
    }


@dataclass
class UsageReport:
    mu_f_overall: float
    mu_f_scored: float | None
    per_head: np.ndarray
    per_token: np.ndarray
    gaps: list[list[GapStat]]
    num_traces: int
    num_tokens: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "mu_f_overall": self.mu_f_overall,
            "mu_f_scored": self.mu_f_scored,
            "per_head": self.per_head.tolist(),
            "per_token": self.per_token.tolist(),
            "gaps": [[g.to_json() for g in row] for row in self.gaps],
            "num_traces": self.num_traces,
            "num_tokens": self.num_tokens,
            **self.extra,
        }


def usage_report(traces: Sequence[GateTrace]) -> UsageReport:
    """All usage statistics for a set of traces.

    ``per_token`` averages over traces position by position, so it is only
    filled when every trace has the same length.
    """
    _require(traces)
    lengths = {t.length for t in traces}
    per_token = (np.mean([per_token_usage(t) for t in traces], axis=0)
                 if len(lengths) == 1 else np.zeros(0))
    return UsageReport(mu_f(traces), mu_f_scored(traces), per_head_usage(traces), per_token,
                       gap_table(traces), len(traces), sum(t.length for t in traces))


# -- window sweep table -----------------------------------------------------

@dataclass
class SweepRow:
    window: int
    mu_f: float
    accuracy: float | None = None
    loss: float | None = None
    seeds: int = 1


@dataclass
class SweepTable:
    rows: list[SweepRow]
    flags: list[str]
    non_increasing: bool
    strictly_decreasing: bool

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["window", "mu_f", "accuracy", "loss", "seeds", "flag"])
        for row, flag in zip(self.rows, self.flags):
            writer.writerow([row.window, repr(row.mu_f), "" if row.accuracy is None else repr(row.accuracy),
                             "" if row.loss is None else repr(row.loss), row.seeds, flag])
        return buf.getvalue()


def window_sweep_report(runs: Sequence) -> SweepTable:
    """Table of window vs usage, flagging any point where usage fails to drop.

    ``runs`` holds :class:`SweepRow` or ``(window, mu_f[, accuracy])`` tuples.
    A row is flagged ``inversion`` when usage rises over the previous (smaller)
    window and ``tie`` when it is unchanged.
    """
    rows = [r if isinstance(r, SweepRow) else SweepRow(*r) for r in runs]
    if len({r.window for r in rows}) < 2:
        raise ValueError("a window sweep needs at least two distinct window sizes")
    rows.sort(key=lambda r: r.window)
    flags = [""]
    for prev, cur in zip(rows, rows[1:]):
        flags.append("inversion" if cur.mu_f > prev.mu_f else "tie" if cur.mu_f == prev.mu_f else "")
    return SweepTable(rows, flags, "inversion" not in flags, all(f == "" for f in flags))


# -- trace files --------------------------------------------------------------

def write_trace(path, trace: GateTrace) -> None:
    """Binary trace: magic, header length, JSON header, then packed gate bits.

    Bits are packed per (layer, head) row over the n tokens.
    """
    header = {
        "version": TRACE_VERSION, "L": trace.num_layers, "n": trace.length, "m": trace.num_heads,
        "task": trace.task, "sample_id": trace.sample_id,
        "tokens": None if trace.tokens is None else [int(t) for t in trace.tokens],
        "loss_mask": None if trace.loss_mask is None else [int(b) for b in trace.loss_mask],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    rows = np.transpose(trace.gates, (0, 2, 1))  # (L, m, n)
    payload = np.packbits(rows, axis=-1).tobytes()
    with open(path, "wb") as fh:
        fh.write(TRACE_MAGIC + struct.pack("<I", len(blob)) + blob + payload)


def read_trace(path) -> GateTrace:
    raw = Path(path).read_bytes()
    if raw[:4] != TRACE_MAGIC or len(raw) < 8:
        raise ValueError(f"{path}: not a gate trace file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt trace header") from exc
    if header.get("version") != TRACE_VERSION:
        raise ValueError(f"{path}: unsupported trace version {header.get('version')!r}")
    L, n, m = header["L"], header["n"], header["m"]
    row_bytes = (n + 7) // 8
    payload = np.frombuffer(raw[8 + hlen:], dtype=np.uint8)
    if payload.size != L * m * row_bytes:
        raise ValueError(f"{path}: payload has {payload.size} bytes, expected {L * m * row_bytes}")
    rows = np.unpackbits(payload.reshape(L, m, row_bytes), axis=-1, count=n)
    tokens = header.get("tokens")
    mask = header.get("loss_mask")
    return GateTrace(np.transpose(rows, (0, 2, 1)), header.get("task", ""), header.get("sample_id", 0),
                     None if tokens is None else np.asarray(tokens),
                     None if mask is None else np.asarray(mask, dtype=bool))


def write_matrix_csv(path, grid) -> None:
    grid = np.asarray(grid)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([""] + [f"head{h}" for h in range(grid.shape[1])])
        for layer, row in enumerate(grid):
            writer.writerow([f"layer{layer}"] + [repr(float(v)) for v in row])
