"""Deterministic, labeled random streams.

Every stage of the pipeline derives its randomness from a single top-level
seed plus a stage label and an optional item index, so each stage (and each
item within a stage) is reproducible independently of execution order and
batching.
"""

import hashlib

import numpy as np


def _label_key(label: str) -> tuple[int, int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return (
        int.from_bytes(digest[:4], "little"),
        int.from_bytes(digest[4:8], "little"),
    )


def stream(seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Return a Generator for (seed, label, index), stable across platforms."""
    if index < 0:
        raise ValueError(f"stream index must be nonnegative, got {index}")
    key = _label_key(label) + (index,)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))
