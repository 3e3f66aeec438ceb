"""Training objective: per-cardinality classification plus mutual distillation.

The total loss is

    L = L_s + sum_k L_p(k) + L_f + L_md

where L_s averages cross-entropy over the single-view elements, L_p(k)
averages over the size-k partial subsets (then sums across k), L_f is the
full multi-view cross-entropy, and L_md performs bidirectional
temperature-softened KL distillation between the uncertainty-weighted
per-cardinality averages and the full multi-view prediction (topology
configurable). Each distillation edge uses

    lambda(t) * 0.5 * tau(t)^2 * (KD(x -> y) + KD(y -> x))

with t the smaller cardinality on the edge, tau(t) = tau_base / sqrt(t),
lambda(t) = lambda_base * t^1.2. The tau^2 factor compensates the
gradient shrinkage introduced by temperature softening.

Every KD direction detaches its teacher, so the bidirectional pair
updates both sides, one at a time. ``LossBreakdown.stops`` records the
constants that detaching froze (fusion weights and softened teacher
distributions); feeding them back via ``stops=`` re-evaluates the loss
as the exact function the tape differentiated, which is what central
finite differences must probe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorkit as tk
from .combinator import CombinationSet
from .tensorkit import Tensor
from .uncertainty import (
    AggregatedPrediction,
    element_weights,
    uncertainty,
    uniform_weights,
    weighted_fuse,
)

PSEUDO_LOGIT_FLOOR = 1e-30  # guards log() of an aggregated distribution

TOPOLOGY_VARIANTS = ("a", "b", "c", "d")


@dataclass(frozen=True)
class DistillTopology:
    """Which cardinality pairs exchange knowledge.

    Nodes are cardinalities 1..n (n = full multi-view). Variants:
      a: chain of adjacent cardinalities
      b: every reduced cardinality paired with full multi-view (default)
      c: everything paired with single-view
      d: all pairs
    """

    variant: str = "b"

    def __post_init__(self):
        if self.variant not in TOPOLOGY_VARIANTS:
            raise ValueError(
                f"unknown topology {self.variant!r}, expected one of {TOPOLOGY_VARIANTS}"
            )

    def edges(self, n: int) -> list[tuple[int, int]]:
        if n < 1:
            raise ValueError(f"view count must be at least 1, got {n}")
        if n == 1:
            return []
        if self.variant == "a":
            return [(k, k + 1) for k in range(1, n)]
        if self.variant == "b":
            return [(k, n) for k in range(1, n)]
        if self.variant == "c":
            return [(1, k) for k in range(2, n + 1)]
        return [(i, j) for i in range(1, n + 1) for j in range(i + 1, n + 1)]


@dataclass(frozen=True)
class ScheduleParams:
    """Base values for the per-edge temperature and weight schedules.

    ``adaptive=False`` freezes both at their base values (the "Fixed"
    ablation setting).
    """

    tau_base: float = 4.0
    lambda_base: float = 0.1
    adaptive: bool = True

    def __post_init__(self):
        if self.tau_base <= 0 or self.lambda_base <= 0:
            raise ValueError("tau_base and lambda_base must be strictly positive")


def adaptive_params(schedule: ScheduleParams, t: int) -> tuple[float, float]:
    """Per-edge (tau, lambda) given the smaller cardinality t on the edge."""
    if t < 1:
        raise ValueError(f"cardinality t must be at least 1, got {t}")
    if not schedule.adaptive:
        return schedule.tau_base, schedule.lambda_base
    return schedule.tau_base / math.sqrt(t), schedule.lambda_base * t ** 1.2


def kd_loss(
    teacher_logits: Tensor,
    student_logits: Tensor,
    tau: float,
    frozen_teacher: np.ndarray | None = None,
) -> Tensor:
    """One distillation direction: KL(soften(teacher) || soften(student)).

    The teacher side never receives gradients. ``frozen_teacher``
    substitutes a precomputed softened teacher distribution, used when
    re-evaluating the loss as the function the tape differentiated.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if frozen_teacher is None:
        teacher = tk.softmax_tempered(teacher_logits.detach(), tau)
    else:
        teacher = Tensor(frozen_teacher)
    student = tk.softmax_tempered(student_logits, tau)
    return tk.kl_div(teacher, student)


def soften(logits: Tensor, tau: float) -> np.ndarray:
    """Plain-array tempered softmax of detached logits."""
    z = (logits.data - logits.data.max()) / float(tau)
    e = np.exp(z)
    return e / e.sum()


@dataclass
class FrozenStops:
    """Constants produced by stop-gradients during one loss evaluation."""

    weights: dict[int, np.ndarray] = field(default_factory=dict)
    teachers: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


@dataclass
class LossBreakdown:
    loss_s: float
    loss_p: float
    loss_f: float
    loss_hmd: float
    loss_total: float
    per_k: dict[int, float]
    total: Tensor
    stops: FrozenStops


def _pseudo_logits(agg: AggregatedPrediction) -> Tensor:
    """log of an aggregated distribution; softmax of this at tau=1 recovers it."""
    return tk.log(tk.clamp_min(agg.dist, PSEUDO_LOGIT_FLOOR))


def _accumulate_edges(
    node_logits: dict[int, Tensor],
    edges: list[tuple[int, int]],
    schedule: ScheduleParams,
    stops: FrozenStops | None,
    captured: FrozenStops,
) -> Tensor:
    total = Tensor(0.0)
    for a, b in edges:
        for node in (a, b):
            if node not in node_logits:
                raise ValueError(f"distillation edge ({a}, {b}) references missing cardinality {node}")
        t = min(a, b)
        tau, lam = adaptive_params(schedule, t)
        if stops is None:
            frozen_a = frozen_b = None
        else:
            frozen_a, frozen_b = stops.teachers[(a, b)]
        xa, xb = node_logits[a], node_logits[b]
        captured.teachers[(a, b)] = (
            frozen_a if frozen_a is not None else soften(xa, tau),
            frozen_b if frozen_b is not None else soften(xb, tau),
        )
        pair = kd_loss(xa, xb, tau, frozen_teacher=captured.teachers[(a, b)][0]) + \
            kd_loss(xb, xa, tau, frozen_teacher=captured.teachers[(a, b)][1])
        total = total + tk.scale(pair, lam * 0.5 * tau * tau)
    return total


def hmd_loss(
    aggregated: list[AggregatedPrediction],
    full_logits: Tensor,
    topology: DistillTopology,
    schedule: ScheduleParams,
) -> Tensor:
    """Mutual distillation over the configured topology.

    ``aggregated`` holds the weighted-average distributions for
    cardinalities 1..n-1 in order; the full multi-view side enters as raw
    logits. Aggregates are lifted to pseudo-logits by taking logs, which
    is exact under softmax at any temperature.
    """
    n = len(aggregated) + 1
    edges = topology.edges(n)
    if not edges:
        raise ValueError("distillation needs at least one edge (n must exceed 1)")
    node_logits: dict[int, Tensor] = {agg.k: _pseudo_logits(agg) for agg in aggregated}
    node_logits[n] = full_logits
    return _accumulate_edges(node_logits, edges, schedule, None, FrozenStops())


def _mean_cross_entropy(predictions: list[Tensor], label: int) -> Tensor:
    total = tk.cross_entropy(tk.softmax_tempered(predictions[0], 1.0), label)
    for logits in predictions[1:]:
        total = total + tk.cross_entropy(tk.softmax_tempered(logits, 1.0), label)
    return tk.scale(total, 1.0 / len(predictions))


def total_loss(
    sets: list[CombinationSet],
    label: int,
    topology: DistillTopology,
    schedule: ScheduleParams,
    use_partial: bool = True,
    use_uncertainty_weights: bool = True,
    stops: FrozenStops | None = None,
) -> LossBreakdown:
    """Assemble the full objective for one sample's combination sets.

    With ``use_partial`` off, only the single-view and full multi-view
    sets participate and the distillation reduces to the one edge between
    them. ``use_uncertainty_weights`` off replaces the inverse-uncertainty
    weights with uniform averaging.
    """
    by_k = {cs.k: cs for cs in sets}
    if not by_k:
        raise ValueError("no combination sets supplied")
    n = max(by_k)
    required = range(1, n + 1) if use_partial else (1, n)
    for k in required:
        if k not in by_k or not by_k[k].predictions:
            raise ValueError(f"missing predictions for cardinality {k} of {n}")

    captured = FrozenStops()
    aggregates: dict[int, AggregatedPrediction] = {}
    reduced_ks = [k for k in sorted(by_k) if k < n and (use_partial or k == 1)]
    for k in reduced_ks:
        cs = by_k[k]
        dists = [tk.softmax_tempered(logits, 1.0) for logits in cs.predictions]
        if stops is not None:
            w = stops.weights[k]
        elif use_uncertainty_weights:
            scores = [uncertainty(dist.data, label) for dist in dists]
            w = element_weights(scores)
        else:
            w = uniform_weights(len(dists))
        captured.weights[k] = w
        aggregates[k] = weighted_fuse(dists, w, k=k)

    loss_s = _mean_cross_entropy(by_k[1].predictions, label)
    per_k: dict[int, float] = {1: loss_s.item()}

    if n == 1:
        # One view: the single-view set is the full set; count it once.
        return LossBreakdown(
            loss_s=loss_s.item(),
            loss_p=0.0,
            loss_f=loss_s.item(),
            loss_hmd=0.0,
            loss_total=loss_s.item(),
            per_k=per_k,
            total=loss_s,
            stops=captured,
        )

    loss_p = Tensor(0.0)
    if use_partial:
        for k in range(2, n):
            lp_k = _mean_cross_entropy(by_k[k].predictions, label)
            per_k[k] = lp_k.item()
            loss_p = loss_p + lp_k

    full_logits = by_k[n].predictions[0]
    loss_f = tk.cross_entropy(tk.softmax_tempered(full_logits, 1.0), label)
    per_k[n] = loss_f.item()

    edges = topology.edges(n) if use_partial else [(1, n)]
    node_logits = {k: _pseudo_logits(agg) for k, agg in aggregates.items()}
    node_logits[n] = full_logits
    loss_md = _accumulate_edges(node_logits, edges, schedule, stops, captured)

    total = loss_s + loss_p + loss_f + loss_md
    return LossBreakdown(
        loss_s=loss_s.item(),
        loss_p=loss_p.item(),
        loss_f=loss_f.item(),
        loss_hmd=loss_md.item(),
        loss_total=total.item(),
        per_k=per_k,
        total=total,
        stops=captured,
    )
