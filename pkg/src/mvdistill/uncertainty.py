"""Uncertainty scores and inverse-uncertainty weighted score fusion.

An element's uncertainty is its cross-entropy against the one-hot label
plus the entropy of its own prediction, both with a small epsilon inside
the logarithms:

    U = -sum_j (q_j + p_j) * log(p_j + eps)

Entropy alone would call a confidently wrong prediction certain; the
cross-entropy term makes such predictions score as highly uncertain.
Weights are normalized inverse uncertainties and are deliberately kept
out of the gradient path: they are plain numbers, not tape tensors, so
the optimizer cannot game the loss by inflating reported uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensorkit import Tensor, scale

STABILITY_EPS = 1e-8
U_FLOOR = 1e-6


@dataclass(frozen=True)
class UncertaintyScore:
    raw: float
    clamped: float


@dataclass
class AggregatedPrediction:
    """Weighted-average distribution over one cardinality's elements."""

    k: int
    weights: np.ndarray
    dist: Tensor


def uncertainty(p: np.ndarray, label: int) -> UncertaintyScore:
    """Cross-entropy-plus-entropy uncertainty of one prediction.

    A confident correct prediction drives both terms to ~0 (the epsilon
    inside the logs can even push the sum slightly negative), and the
    weights divide by U, so the score is clamped at U_FLOOR before use.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"expected a probability vector, got shape {p.shape}")
    if abs(p.sum() - 1.0) > 1e-9 or np.any(p < -1e-12):
        raise ValueError("prediction is not a normalized distribution")
    if not (0 <= int(label) < p.shape[0]):
        raise IndexError(f"label {label} out of range for {p.shape[0]} classes")
    q = np.zeros_like(p)
    q[int(label)] = 1.0
    raw = float(-np.sum((q + p) * np.log(p + STABILITY_EPS)))
    return UncertaintyScore(raw=raw, clamped=max(raw, U_FLOOR))


def element_weights(scores: Sequence[UncertaintyScore]) -> np.ndarray:
    """Normalized inverse uncertainties; lower uncertainty, larger weight."""
    if len(scores) == 0:
        raise ValueError("element_weights requires at least one score")
    inv = np.array([1.0 / s.clamped for s in scores], dtype=np.float64)
    return inv / inv.sum()


def weighted_fuse(
    distributions: Sequence[Tensor],
    weights: np.ndarray,
    k: int = 0,
) -> AggregatedPrediction:
    """Weighted average of element distributions (weights held constant).

    Gradients flow through each element distribution but not through the
    weights, which arrive as plain floats. ``k`` labels the cardinality
    the elements belong to.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(distributions) != weights.shape[0]:
        raise ValueError(
            f"{len(distributions)} distributions but {weights.shape[0]} weights"
        )
    if abs(weights.sum() - 1.0) > 1e-9 or np.any(weights < 0):
        raise ValueError("weights must be nonnegative and sum to 1")
    fused = scale(distributions[0], float(weights[0]))
    for dist, w in zip(distributions[1:], weights[1:]):
        fused = fused + scale(dist, float(w))
    return AggregatedPrediction(k=int(k), weights=weights, dist=fused)


def uniform_weights(count: int) -> np.ndarray:
    if count < 1:
        raise ValueError("need at least one element")
    return np.full(count, 1.0 / count)
