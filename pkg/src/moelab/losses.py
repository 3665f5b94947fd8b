"""Training objective pieces: LM cross-entropy, sequence-level load balancing,
and the block-wise expert selection (BlES) loss.

The BlES loss is the product of two terms computed over consecutive tokens:

* a hard term: the normalized count of realized expert replacements, an
  integer statistic of the discrete top-k selections (no gradient), and
* a soft term: the total variation of the routing probability rows along the
  token axis (differentiable).

The hard count scales the soft term, so gradient pressure on the router is
proportional to how much churn the current selections actually exhibit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import numerics as nx
from .numerics import Tensor
from .routing import RoutingWeights, SelectedExperts


@dataclass
class BlesBreakdown:
    """All intermediate values of one BlES evaluation.

    ``H`` double-counts transitions (one out-swap plus one in-swap each), so
    it is even whenever every token selects exactly K distinct experts.
    ``loss_term`` is the differentiable scalar node; ``loss`` its float value,
    equal to H_norm * L_norm.
    """

    H: int
    H_norm: float
    L: float
    L_norm: float
    loss: float
    loss_term: Tensor


def _selection_array(selected) -> np.ndarray:
    if isinstance(selected, SelectedExperts):
        return selected.indices
    return np.asarray(selected, dtype=np.int64)


def hard_replacements(selected, num_experts: int | None = None) -> tuple[int, float]:
    """Count hard expert replacements between consecutive tokens.

    ``selected`` is (B, T, K) integer expert ids (or a SelectedExperts).
    Returns the raw double-counted transition total H and its normalization
    floor(H / 2) / (B * K * (T - 1)). A single-token sequence has no
    transitions and returns (0, 0.0).
    """
    sel = _selection_array(selected)
    if sel.ndim != 3:
        raise ValueError(f"selection tensor must be (B, T, K), got {sel.shape}")
    b, t, k = sel.shape
    if t < 2:
        return 0, 0.0
    if num_experts is None:
        num_experts = int(sel.max()) + 1
    h = _kernels.transition_count(sel, num_experts)
    h_norm = (h // 2) / (b * k * (t - 1))
    return h, h_norm


def soft_selection(weights) -> tuple[Tensor, Tensor]:
    """Total variation of routing weights along the token axis.

    L sums |W[b, t+1, e] - W[b, t, e]| over everything; L_norm divides by
    B * T (the printed normalizer, kept as-is even though the hard term
    normalizes by T - 1). Both are differentiable scalar tensors.
    """
    w = weights.values if isinstance(weights, RoutingWeights) else weights
    if not isinstance(w, Tensor):
        w = Tensor(w)
    if w.ndim != 3:
        raise ValueError(f"routing weights must be (B, T, E), got {w.shape}")
    b, t, _ = w.shape
    if t < 2:
        zero = nx.mul(nx.sum_(w), 0.0)
        return zero, zero
    total = nx.sum_(nx.abs_(nx.consecutive_diff(w, axis=1)))
    return total, nx.mul(total, 1.0 / (b * t))


def bles_loss(weights, selected, num_experts: int | None = None) -> BlesBreakdown:
    """Block-wise expert selection loss: H_norm * L_norm.

    H_norm enters as a plain (detached) scalar factor; the gradient of the
    loss with respect to the router logits is exactly H_norm times the
    gradient of L_norm.
    """
    h, h_norm = hard_replacements(selected, num_experts)
    l_total, l_norm = soft_selection(weights)
    loss_term = nx.mul(l_norm, h_norm)
    return BlesBreakdown(
        H=h,
        H_norm=h_norm,
        L=l_total.item(),
        L_norm=l_norm.item(),
        loss=loss_term.item(),
        loss_term=loss_term,
    )


def load_balance_loss(f: np.ndarray, p, num_experts: int) -> Tensor:
    """Sequence-level load balancing loss E * sum_e f_e * P_e.

    ``f`` holds count-based assignment fractions (no gradient) and ``p`` the
    mean routing probabilities, both with experts on the last axis; any
    leading axes (sequences, layers) are averaged. Minimized at 1.0 when both
    are uniform; a one-hot collapse scores E.
    """
    f = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
    if not isinstance(p, Tensor):
        p = Tensor(p)
    if f.shape != p.shape or f.shape[-1] != num_experts:
        raise ValueError(
            f"f {f.shape} and P {p.shape} must match with last axis {num_experts}"
        )
    per_group = nx.sum_(nx.mul(p, f), axis=-1)
    return nx.mul(nx.mean_(per_group), float(num_experts))


def load_balance_loss_model_aggregated(
    f_layers: np.ndarray, p_layers: np.ndarray, num_experts: int
) -> float:
    """Model-level variant that pools usage across layers before scoring.

    Exists to demonstrate the blind spot of model-level balancing: a model
    that deterministically picks expert l in layer l looks perfectly balanced
    here (loss 1.0) while every single layer is fully collapsed (per-layer
    sequence-level loss E). Not used for training.
    """
    f_layers = np.asarray(f_layers, dtype=np.float64)
    p_layers = np.asarray(p_layers, dtype=np.float64)
    if f_layers.shape != p_layers.shape or f_layers.shape[-1] != num_experts:
        raise ValueError("f and P must share shape (layers, ..., E)")
    f_bar = f_layers.mean(axis=0)
    p_bar = p_layers.mean(axis=0)
    return float(num_experts * (f_bar * p_bar).sum(axis=-1).mean())


def total_loss(ce, lb, bles, alpha_lb: float, lambda_bles: float):
    """Weighted objective ce + alpha_lb * lb + lambda_bles * bles.

    Works on floats and on Tensors (for training, where the gradient of the
    total is the weighted sum of the component gradients).
    """
    if alpha_lb < 0 or lambda_bles < 0:
        raise ValueError("loss coefficients must be non-negative")
    return ce + alpha_lb * lb + lambda_bles * bles


def lm_cross_entropy(logits: Tensor, targets: np.ndarray, pad_id: int | None = None) -> Tensor:
    """Mean next-token cross-entropy, excluding padding positions."""
    return nx.cross_entropy(logits, targets, pad_id=pad_id)
