"""Token-choice routing: temperature softmax over router logits, top-k selection.

The router produces a full probability row per token; the k heaviest experts
are selected with deterministic lowest-index tie-breaking and their weights are
renormalized to sum to one. Gradients reach the logits only through the
selected (renormalized) weights; the discrete selection itself carries none.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import numerics as nx
from .numerics import Tensor


@dataclass
class RouterLogits:
    """Raw per-token, per-expert router outputs, shape (B, T, E)."""

    values: Tensor

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise ValueError(f"router logits must be (B, T, E), got {self.values.shape}")
        if not np.all(np.isfinite(self.values.data)):
            raise ValueError("router logits contain non-finite values")


@dataclass
class RoutingWeights:
    """Softmax routing probabilities, shape (B, T, E); rows sum to 1."""

    values: Tensor
    temperature: float = 1.0


@dataclass
class SelectedExperts:
    """Top-k selection: integer ``indices`` (B, T, K) and renormalized
    ``gate_weights`` (B, T, K) that sum to 1 per token."""

    indices: np.ndarray
    gate_weights: Tensor

    @property
    def k(self) -> int:
        return self.indices.shape[-1]


def route(
    logits: RouterLogits | Tensor, temperature: float, k: int
) -> tuple[RoutingWeights, SelectedExperts]:
    """Compute routing weights and select each token's top-k experts.

    Ties go to the lowest expert index so replayed traces are reproducible.
    With k == E the gate weights reduce to the full softmax row.
    """
    values = logits.values if isinstance(logits, RouterLogits) else logits
    num_experts = values.shape[-1]
    if not 1 <= k <= num_experts:
        raise ValueError(f"k={k} must be in [1, E={num_experts}]")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")

    weights = nx.softmax_lastdim(values, temperature)
    lead = values.shape[:-1]
    rows = int(np.prod(lead, dtype=np.int64)) if lead else 1
    flat = np.ascontiguousarray(weights.data.reshape(rows, num_experts))
    indices = _kernels.topk_lastdim(flat, k).reshape(*lead, k)

    taken = nx.take_along_lastdim(weights, indices)
    gates = nx.div(taken, nx.sum_(taken, axis=-1, keepdims=True))
    return RoutingWeights(weights, temperature), SelectedExperts(indices, gates)


def expert_load_fractions(
    selected: SelectedExperts, weights: RoutingWeights
) -> tuple[np.ndarray, Tensor]:
    """Per-sequence expert statistics for the load-balancing loss.

    Returns ``f`` (B, E): the fraction of the T*K assignment slots each expert
    received, computed by counting (no gradient); and ``P`` (B, E): the mean
    routing probability per expert over the sequence (differentiable).
    """
    w = weights.values
    b, t, num_experts = w.shape
    if selected.indices.shape[:2] != (b, t):
        raise ValueError(
            f"selection shape {selected.indices.shape} inconsistent with weights {w.shape}"
        )
    counts = _kernels.usage_counts(selected.indices, num_experts)
    f = counts.astype(np.float64) / (t * selected.k)
    p = nx.mean_(w, axis=1)
    return f, p
