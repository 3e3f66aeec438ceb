"""Named random substreams derived from a single master seed.

Every source of randomness in the project (dataset synthesis, parameter
initialization, training-time view sampling) draws from its own named
stream, so adding or reordering one consumer never perturbs the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _stream_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Return a generator keyed by ``seed`` and a path of stream names.

    The same (seed, names) pair always yields an identical stream,
    independent of call order or platform.
    """
    entropy = [int(seed)] + [_stream_key(str(n)) for n in names]
    return np.random.default_rng(entropy)
