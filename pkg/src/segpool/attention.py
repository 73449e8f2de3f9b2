"""Segment-wise partial attention with exact merging.

A query attending to a prefix split into segments can be answered by
attending to each segment independently and combining the partial outputs
using their normalizers.  Float64 throughout; this is a correctness reference.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Iterable

import numpy as np


class EmptyAttentionError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionPartial:
    output: np.ndarray  # sum_i exp(logit_i - running_max) * v_i
    running_max: float
    normalizer: float

    @classmethod
    def empty(cls, d: int) -> "AttentionPartial":
        return cls(np.zeros(d), -np.inf, 0.0)

    @property
    def is_empty(self) -> bool:
        return self.normalizer == 0.0


def attend_segment(q: np.ndarray, K: np.ndarray, V: np.ndarray) -> AttentionPartial:
    q = np.asarray(q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if q.ndim != 1 or K.ndim != 2 or V.ndim != 2:
        raise ValueError("expected q of shape (d,), K and V of shape (n, d)")
    if K.shape[0] < 1:
        raise ValueError("segment must contain at least one key")
    if K.shape[1] != q.shape[0] or K.shape[0] != V.shape[0]:
        raise ValueError(f"dimension mismatch: q {q.shape}, K {K.shape}, V {V.shape}")
    logits = K @ q / np.sqrt(q.shape[0])
    m = float(logits.max())
    w = np.exp(logits - m)
    return AttentionPartial(w @ V, m, float(w.sum()))


def merge(p1: AttentionPartial, p2: AttentionPartial) -> AttentionPartial:
    if p1.output.shape != p2.output.shape:
        raise ValueError("partials have different value dimensions")
    if p1.is_empty:
        return p2
    if p2.is_empty:
        return p1
    m = max(p1.running_max, p2.running_max)
    s1 = np.exp(p1.running_max - m)
    s2 = np.exp(p2.running_max - m)
    return AttentionPartial(p1.output * s1 + p2.output * s2, m, p1.normalizer * s1 + p2.normalizer * s2)


def merge_all(partials: Iterable[AttentionPartial]) -> AttentionPartial:
    return reduce(merge, partials)


def finalize(p: AttentionPartial) -> np.ndarray:
    if p.normalizer <= 0:
        raise EmptyAttentionError("cannot finalize a partial that attended no keys")
    return p.output / p.normalizer


def segmented_attention(q: np.ndarray, K: np.ndarray, V: np.ndarray, bounds: Iterable[int]) -> np.ndarray:
    """Attend over contiguous key segments split at ``bounds`` and merge."""
    cuts = [0, *bounds, K.shape[0]]
    parts = [attend_segment(q, K[a:b], V[a:b]) for a, b in zip(cuts, cuts[1:]) if b > a]
    return finalize(merge_all(parts))
