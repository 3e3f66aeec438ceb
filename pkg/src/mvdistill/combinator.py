"""All-subsets view fusion: enumerate subsets, concatenate tokens, predict.

Given n views, every nonempty subset of views gets its own prediction:
the n singletons ("single-view"), the proper subsets of size 1 < k < n
("partial multi-view"), and the one size-n subset ("full multi-view").
The CNN and token projection run once per view; only the transformer
runs once per subset, so a sample costs n CNN calls and 2^n - 1
transformer calls.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

from .encoder import Encoder
from .tensorkit import Tensor, concat

DEFAULT_MAX_VIEWS = 5


@dataclass
class CombinationSet:
    """All view subsets of one cardinality, with per-subset logits."""

    k: int
    elements: list[tuple[int, ...]]
    predictions: list[Tensor] = field(default_factory=list)


def enumerate_combinations(n: int, max_views: int = DEFAULT_MAX_VIEWS) -> list[CombinationSet]:
    """Subsets of {0..n-1} grouped by size, lexicographic within each size.

    The total across sizes is 2^n - 1, which is why ``max_views`` exists:
    per-sample cost grows with the full power set.
    """
    if n < 1:
        raise ValueError(f"view count must be at least 1, got {n}")
    if n > max_views:
        raise ValueError(f"view count {n} exceeds the configured maximum {max_views}")
    return [
        CombinationSet(k, [tuple(c) for c in itertools.combinations(range(n), k)])
        for k in range(1, n + 1)
    ]


def fuse_tokens(subset: Sequence[int], token_sequences: Sequence[Tensor]) -> Tensor:
    """Concatenate the chosen views' token rows in subset order."""
    if len(subset) == 0:
        raise ValueError("cannot fuse an empty view subset")
    for i in subset:
        if not (0 <= i < len(token_sequences)):
            raise KeyError(f"no token sequence for view {i} (have {len(token_sequences)})")
    if len(subset) == 1:
        return token_sequences[subset[0]]
    return concat([token_sequences[i] for i in subset], axis=0)


def predict_all(
    views: Sequence,
    encoder: Encoder,
    max_views: int = DEFAULT_MAX_VIEWS,
    cardinalities: Sequence[int] | None = None,
) -> list[CombinationSet]:
    """Per-subset logits for the given views, reusing tokens across subsets.

    ``cardinalities`` restricts which subset sizes are evaluated (the
    partial-multi-view ablation uses {1, n}); the default is all of 1..n.
    """
    n = len(views)
    sets = enumerate_combinations(n, max_views=max_views)
    if cardinalities is not None:
        wanted = set(int(k) for k in cardinalities)
        sets = [cs for cs in sets if cs.k in wanted]
    tokens = [encoder.encode_view(v) for v in views]
    for cs in sets:
        cs.predictions = [
            encoder.transform_predict(fuse_tokens(subset, tokens)) for subset in cs.elements
        ]
    return sets
