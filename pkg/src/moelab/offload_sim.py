"""Replay expert-offloading over routing traces; latency and memory models.

The resident set per layer holds exactly the K selected experts. Whenever a
token selects a different set than its predecessor, the newly selected experts
are transferred in (charged at expert_bytes / bandwidth each) and the evicted
ones are written back for free (write-back overlaps with compute). Tokens per
second is tokens / decode time; the cold-start load of the first token's
resident set is charged separately as prefill and never counted as a
replacement, since replacements only compare consecutive token pairs.

Absolute tokens/sec from published hardware runs are not reproducible here;
only ratios between traces replayed under one cost model are meaningful.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .config import ModelConfig
from .errors import DataError
from .experts import per_expert_param_count, shared_param_count
from .losses import hard_replacements
from .model import RoutingTrace

TRACE_MAGIC = "moelab-trace-v1"


@dataclass(frozen=True)
class OffloadCostModel:
    """Analytic cost constants for the replay.

    expert_bytes: size of one expert's parameters on the wire.
    bandwidth: host-to-accelerator transfer rate in bytes/sec.
    compute_per_token: seconds of pure compute per generated token.
    shared_bytes: resident non-expert parameter bytes (embeddings, attention).
    """

    expert_bytes: float
    bandwidth: float
    compute_per_token: float
    shared_bytes: float

    def __post_init__(self) -> None:
        for name in ("expert_bytes", "bandwidth", "compute_per_token", "shared_bytes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")

    def swap_seconds(self, experts_in: int) -> float:
        return experts_in * self.expert_bytes / self.bandwidth


@dataclass
class OffloadReport:
    """Everything one replay produces, ready for CSV or key-value output."""

    exrep_pct: float
    swap_events: int
    tokens_per_sec: float
    peak_resident_bytes: int
    delta_uniform_pct: float
    delta_uniform_per_layer: list[float] = field(default_factory=list)
    tokens: int = 0
    layers: int = 0
    prefill_seconds: float = 0.0
    decode_seconds: float = 0.0
    total_seconds: float = 0.0

    CSV_FIELDS = (
        "tokens",
        "layers",
        "swap_events",
        "exrep_pct",
        "tokens_per_sec",
        "prefill_seconds",
        "decode_seconds",
        "total_seconds",
        "peak_resident_bytes",
        "delta_uniform_pct",
    )

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.CSV_FIELDS)

    def csv_row(self) -> str:
        vals = []
        for name in self.CSV_FIELDS:
            v = getattr(self, name)
            vals.append(f"{v:.6g}" if isinstance(v, float) else str(v))
        return ",".join(vals)

    def as_text(self) -> str:
        lines = [
            f"tokens               {self.tokens}",
            f"layers               {self.layers}",
            f"swap_events          {self.swap_events}",
            f"exrep_pct            {self.exrep_pct:.4f}",
            f"tokens_per_sec       {self.tokens_per_sec:.4f}",
            f"prefill_seconds      {self.prefill_seconds:.6f}",
            f"decode_seconds       {self.decode_seconds:.6f}",
            f"total_seconds        {self.total_seconds:.6f}",
            f"peak_resident_bytes  {self.peak_resident_bytes}",
            f"delta_uniform_pct    {self.delta_uniform_pct:.4f}",
        ]
        per_layer = " ".join(f"{v:.2f}" for v in self.delta_uniform_per_layer)
        lines.append(f"delta_uniform_layers {per_layer}")
        return "\n".join(lines)


def _validate_trace(trace: RoutingTrace) -> None:
    sel = trace.selections
    if sel.shape[1] < 1:
        raise DataError("trace has no tokens")
    if sel.min(initial=0) < 0 or sel.max(initial=0) >= trace.num_experts:
        raise DataError(f"trace expert ids outside [0, {trace.num_experts})")


def replay_offload(trace: RoutingTrace, cost: OffloadCostModel) -> OffloadReport:
    """Fold the offloading rule over a trace and price every transfer."""
    _validate_trace(trace)
    sel = trace.selections
    layers, tokens, k = sel.shape
    counts = _kernels.swap_in_counts(sel, trace.num_experts)
    swap_events = int(counts[:, 1:].sum()) if tokens > 1 else 0

    prefill_seconds = cost.swap_seconds(layers * k)
    decode_seconds = tokens * cost.compute_per_token + cost.swap_seconds(swap_events)
    overall, per_layer = delta_uniform(trace)
    return OffloadReport(
        exrep_pct=exrep(trace),
        swap_events=swap_events,
        tokens_per_sec=tokens / decode_seconds,
        peak_resident_bytes=int(round(cost.shared_bytes + layers * k * cost.expert_bytes)),
        delta_uniform_pct=overall,
        delta_uniform_per_layer=list(per_layer),
        tokens=tokens,
        layers=layers,
        prefill_seconds=prefill_seconds,
        decode_seconds=decode_seconds,
        total_seconds=prefill_seconds + decode_seconds,
    )


def resident_set_sizes(trace: RoutingTrace) -> np.ndarray:
    """(layers, tokens) count of distinct resident experts after each step."""
    sel = np.sort(trace.selections, axis=-1)
    distinct = np.ones(sel.shape[:2], dtype=np.int64)
    if sel.shape[-1] > 1:
        distinct += (sel[..., 1:] != sel[..., :-1]).sum(axis=-1)
    return distinct


def exrep(trace: RoutingTrace) -> float:
    """Percentage of realized expert replacements, averaged over layers.

    Per layer: 100 * floor(H / 2) / (K * (T - 1)) with H the double-counted
    transition total; shares its integer numerator with hard_replacements.
    """
    sel = trace.selections
    layers, tokens, k = sel.shape
    if tokens < 2:
        warnings.warn("exrep undefined for traces shorter than 2 tokens; returning 0")
        return 0.0
    pcts = []
    for l in range(layers):
        _, h_norm = hard_replacements(sel[l][None, :, :], trace.num_experts)
        pcts.append(100.0 * h_norm)
    return float(np.mean(pcts))


def delta_uniform(trace: RoutingTrace) -> tuple[float, np.ndarray]:
    """Mean absolute deviation of expert usage from uniform, in percentage points.

    Per layer: mean over experts of |f_e - 1/E| * 100 where f_e is the
    realized assignment fraction; overall value is the mean over layers.
    """
    sel = trace.selections
    if sel.shape[1] * sel.shape[2] == 0:
        raise ValueError("delta_uniform requires at least one routed token")
    counts = _kernels.usage_counts(sel, trace.num_experts)
    return delta_uniform_from_counts(counts, trace.num_experts)


def delta_uniform_from_counts(
    counts: np.ndarray, num_experts: int
) -> tuple[float, np.ndarray]:
    """Same metric from pre-aggregated (layers, E) assignment counts."""
    counts = np.asarray(counts, dtype=np.float64)
    f = counts / counts.sum(axis=-1, keepdims=True)
    per_layer = 100.0 * np.abs(f - 1.0 / num_experts).mean(axis=-1)
    return float(per_layer.mean()), per_layer


def peak_memory(config: ModelConfig, offloaded: bool, bytes_per_param: float) -> int:
    """Peak parameter bytes during generation, with or without expert offload."""
    shared = shared_param_count(config) * bytes_per_param
    expert = per_expert_param_count(config) * bytes_per_param
    resident = config.active if offloaded else config.experts
    return int(round(shared + config.layers * resident * expert))


def calibrate_cost_model(
    tokens_per_sec_a: float,
    exrep_a_pct: float,
    tokens_per_sec_b: float,
    exrep_b_pct: float,
    tokens: int,
    layers: int,
    k: int,
    expert_bytes: float,
    shared_bytes: float,
) -> OffloadCostModel:
    """Solve compute and transfer cost from two (tokens/sec, ExRep) observations.

    The replay prices a T-token trace at T * c + swaps * s with
    swaps = layers * K * (ExRep / 100) * (T - 1), so two observations pin the
    per-token compute c and the per-expert transfer time s; bandwidth is then
    expert_bytes / s.
    """
    if tokens < 2:
        raise ValueError("calibration needs tokens >= 2")
    per_token_swaps_a = layers * k * (exrep_a_pct / 100.0) * (tokens - 1) / tokens
    per_token_swaps_b = layers * k * (exrep_b_pct / 100.0) * (tokens - 1) / tokens
    if per_token_swaps_a == per_token_swaps_b:
        raise ValueError("calibration needs two distinct ExRep levels")
    s = (1.0 / tokens_per_sec_a - 1.0 / tokens_per_sec_b) / (
        per_token_swaps_a - per_token_swaps_b
    )
    c = 1.0 / tokens_per_sec_a - s * per_token_swaps_a
    if s <= 0 or c <= 0:
        raise ValueError(
            f"calibration produced non-positive costs (compute={c:.3g}, swap={s:.3g})"
        )
    return OffloadCostModel(
        expert_bytes=expert_bytes,
        bandwidth=expert_bytes / s,
        compute_per_token=c,
        shared_bytes=shared_bytes,
    )


def synthetic_trace(
    exrep_pct: float,
    tokens: int,
    layers: int,
    num_experts: int,
    k: int,
    seed: int = 0,
) -> RoutingTrace:
    """Construct a trace whose realized ExRep matches the target as closely as
    integer replacement counts allow (exact up to rounding of the event total).
    """
    if not 0 <= exrep_pct <= 100:
        raise ValueError(f"exrep_pct must be in [0, 100], got {exrep_pct}")
    if tokens < 2:
        raise ValueError("synthetic traces need at least 2 tokens")
    if k > num_experts:
        raise ValueError("k cannot exceed the expert count")
    rng = np.random.default_rng(seed)
    events = int(round(exrep_pct / 100.0 * k * (tokens - 1)))
    if events > 0 and num_experts == k:
        raise ValueError("cannot realize replacements with all experts active")
    sel = np.empty((layers, tokens, k), dtype=np.int64)
    for l in range(layers):
        base, rem = divmod(events, tokens - 1)
        slot_counts = np.full(tokens - 1, base, dtype=np.int64)
        if rem:
            slot_counts[rng.choice(tokens - 1, size=rem, replace=False)] += 1
        residents = list(range(k))
        outsiders = list(range(k, num_experts))
        sel[l, 0] = sorted(residents)
        for t in range(1, tokens):
            for _ in range(slot_counts[t - 1]):
                incoming = outsiders.pop(0)
                outsiders.append(residents.pop(0))
                residents.append(incoming)
            sel[l, t] = sorted(residents)
    return RoutingTrace(selections=sel, num_experts=num_experts)


def write_trace(trace: RoutingTrace, path) -> None:
    """Serialize a trace as line-delimited JSON, one record per token per layer."""
    sel = trace.selections
    layers, tokens, k = sel.shape
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "format": TRACE_MAGIC,
            "layers": layers,
            "tokens": tokens,
            "active": k,
            "experts": trace.num_experts,
        }
        fh.write(json.dumps(header) + "\n")
        for t in range(tokens):
            for l in range(layers):
                rec = {"token": t, "layer": l, "experts": sel[l, t].tolist()}
                fh.write(json.dumps(rec) + "\n")


def read_trace(path) -> RoutingTrace:
    """Parse a trace file; malformed input raises DataError naming the line."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"{path}: cannot read trace ({exc})") from exc
    if not lines:
        raise DataError(f"{path}: empty trace file")

    def parse(lineno: int, text: str) -> dict:
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise DataError(f"{path}: line {lineno}: expected an object")
        return obj

    header = parse(1, lines[0])
    if header.get("format") != TRACE_MAGIC:
        raise DataError(f"{path}: line 1: missing format={TRACE_MAGIC} header")
    try:
        layers = int(header["layers"])
        tokens = int(header["tokens"])
        k = int(header["active"])
        num_experts = int(header["experts"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: line 1: incomplete header ({exc})") from exc
    if min(layers, tokens, k, num_experts) < 1:
        raise DataError(f"{path}: line 1: header fields must be positive")

    expected = layers * tokens
    if len(lines) - 1 != expected:
        raise DataError(
            f"{path}: expected {expected} records after the header, got {len(lines) - 1}"
        )
    sel = np.full((layers, tokens, k), -1, dtype=np.int64)
    for i, text in enumerate(lines[1:], start=2):
        rec = parse(i, text)
        try:
            t, l, ids = int(rec["token"]), int(rec["layer"]), rec["experts"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: line {i}: incomplete record ({exc})") from exc
        if not 0 <= t < tokens or not 0 <= l < layers:
            raise DataError(f"{path}: line {i}: token/layer out of range")
        if not isinstance(ids, list) or len(ids) != k:
            raise DataError(f"{path}: line {i}: expected {k} expert ids")
        for e in ids:
            if not isinstance(e, int) or not 0 <= e < num_experts:
                raise DataError(
                    f"{path}: line {i}: expert id {e} outside [0, {num_experts})"
                )
        sel[l, t] = ids
    if (sel < 0).any():
        raise DataError(f"{path}: missing records for some (token, layer) pairs")
    return RoutingTrace(selections=sel, num_experts=num_experts)
