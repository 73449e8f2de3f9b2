"""Goodput-oriented stateless scheduling: chunked prefill, then a dynamic
program choosing contiguous batches (over requests sorted by context length)
and their degree of parallelism under a per-batch latency SLO.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numba import njit

from .cost_model import (
    DECODE,
    PREFILL,
    HardwareProfile,
    LatencyModel,
    RequestShape,
    cache_load,
    estimate_batch_latency,
    ideal_time,
)

DEFAULT_CHUNK = 512


@dataclass(frozen=True)
class PhaseRequest:
    request_id: int
    session_id: int
    phase: str
    context_len: int  # tokens already cached or processed plus this iteration's input
    input_len: int
    slo_tbt: float = math.inf

    def __post_init__(self) -> None:
        if self.phase not in (PREFILL, DECODE):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.phase == DECODE and self.input_len != 1:
            raise ValueError("decode requests carry exactly one input token")
        if self.input_len < 0 or self.context_len < self.input_len:
            raise ValueError("need 0 <= input_len <= context_len")

    @property
    def shape(self) -> RequestShape:
        return RequestShape(self.context_len - self.input_len, self.input_len)


@dataclass(frozen=True)
class ScheduledBatch:
    request_ids: tuple
    dop: int
    phase: str
    latency: float = 0.0


@dataclass
class ScheduleDecision:
    batches: list[ScheduledBatch]
    objective: float
    fallback_used: bool
    deferred: tuple = field(default_factory=tuple)

    @property
    def total_dop(self) -> int:
        return sum(b.dop for b in self.batches)


def chunk_prefill(requests: Sequence[PhaseRequest], chunk_size: int = DEFAULT_CHUNK) -> list[PhaseRequest]:
    """Clip each prefill request to at most ``chunk_size`` input tokens this iteration."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    out = []
    for r in requests:
        if r.phase == PREFILL and r.input_len > chunk_size:
            cut = r.input_len - chunk_size
            r = replace(r, input_len=chunk_size, context_len=r.context_len - cut)
        out.append(r)
    return out


def consume_cache_load(
    reqs: Sequence[RequestShape],
    n: int,
    profile: HardwareProfile,
    model: LatencyModel,
    phases: Sequence[str] | None = None,
) -> float:
    """Pool load fraction for this iteration's requests (0 for an empty set)."""
    if not reqs:
        return 0.0
    return cache_load(reqs, n, profile, ideal_time(reqs, n, profile, model, phases))


def _sort(reqs: Sequence[PhaseRequest]) -> list[PhaseRequest]:
    return sorted(reqs, key=lambda r: (r.context_len, r.request_id))


def _batch_latency(reqs: Sequence[PhaseRequest], dop: int, L: float, model: LatencyModel, phase: str) -> float:
    return estimate_batch_latency([r.shape for r in reqs], dop, L, model, phase)


def _pack_decode(decode: list[PhaseRequest], n_batches: int) -> list[list[PhaseRequest]]:
    """Longest-processing-time greedy fill, balancing summed context length."""
    bins: list[list[PhaseRequest]] = [[] for _ in range(n_batches)]
    load = [0] * n_batches
    for r in sorted(decode, key=lambda r: (-r.context_len, r.request_id)):
        j = min(range(n_batches), key=lambda b: (load[b], b))
        bins[j].append(r)
        load[j] += r.context_len
    for b in bins:
        b.sort(key=lambda r: (r.context_len, r.request_id))
    return [b for b in bins if b]


def _decode_share(n: int, decode, prefill, model: LatencyModel) -> int:
    if not decode:
        return 0
    if not prefill:
        return min(len(decode), n)
    if n == 1:
        return 1
    wd = _batch_latency(decode, 1, 0.0, model, DECODE)
    wp = _batch_latency(prefill, 1, 0.0, model, PREFILL)
    share = round(n * wd / (wd + wp)) if wd + wp > 0 else 1
    return max(1, min(len(decode), n - 1, share))


@njit(cache=True)
def _dp_kernel(quad, lin, a, b, c, L, K, slos, use_slo):
    """f[i, k] = min over j < i, l < k of f[j, l] + (i - j) * T(j+1..i, dop = k - l).

    Strict comparisons in (j, l) row-major order keep the smallest (j, l)
    among exact ties after preferring fewer batches.
    """
    M = quad.shape[0]
    S2 = np.zeros(M + 1, dtype=np.int64)
    S1 = np.zeros(M + 1, dtype=np.int64)
    for r in range(M):
        S2[r + 1] = S2[r] + quad[r]
        S1[r + 1] = S1[r] + lin[r]
    f = np.full((M + 1, K + 1), np.inf)
    nb = np.zeros((M + 1, K + 1), dtype=np.int64)
    bj = np.zeros((M + 1, K + 1), dtype=np.int64)
    bl = np.zeros((M + 1, K + 1), dtype=np.int64)
    f[0, 0] = 0.0
    T = np.empty(K + 1)
    for i in range(1, M + 1):
        smin = np.inf
        for j in range(i - 1, -1, -1):
            # batch j+1..i; j descends so smin is the strictest member SLO
            if slos[j] < smin:
                smin = slos[j]
            num = a * (S2[i] - S2[j]) + b * (S1[i] - S1[j]) + c
            for d in range(1, K + 1):
                T[d] = num / (d * (1 - L))
            size = i - j
            for k in range(1, K + 1):
                for l in range(k):
                    prev = f[j, l]
                    if prev == np.inf:
                        continue
                    t = T[k - l]
                    if use_slo and t > smin:
                        continue
                    val = prev + size * t
                    cur = f[i, k]
                    if val < cur or (val == cur and nb[j, l] + 1 < nb[i, k]) or (
                        val == cur and nb[j, l] + 1 == nb[i, k] and (j < bj[i, k] or (j == bj[i, k] and l < bl[i, k]))
                    ):
                        f[i, k] = val
                        nb[i, k] = nb[j, l] + 1
                        bj[i, k] = j
                        bl[i, k] = l
    return f, nb, bj, bl


def _prefill_dp(reqs: list[PhaseRequest], K: int, L: float, model: LatencyModel, slos: np.ndarray | None):
    """Optimal contiguous batching of the sorted prefill requests on at most K instances.

    Returns (objective, [(j, i, dop), ...]) or None if nothing is feasible.
    Ties: fewer batches, then fewer instances, then smallest (j, l).
    """
    M = len(reqs)
    co = model.prefill
    quad = np.array([r.context_len * r.input_len for r in reqs], dtype=np.int64)
    lin = np.array([r.input_len for r in reqs], dtype=np.int64)
    use = slos is not None
    s = slos if use else np.full(M, np.inf)
    f, nb, bj, bl = _dp_kernel(quad, lin, float(co.a), float(co.b), float(co.c), float(L), K, s, use)
    finals = [(f[M, k], nb[M, k], k) for k in range(1, K + 1) if np.isfinite(f[M, k])]
    if not finals:
        return None
    obj, _, k = min(finals)
    batches = []
    i = M
    while i > 0:
        j, l = int(bj[i, k]), int(bl[i, k])
        batches.append((j, i, k - l))
        i, k = j, l
    batches.reverse()
    return float(obj), batches


def plan(
    requests: Sequence[PhaseRequest],
    n: int,
    L: float,
    latency_model: LatencyModel,
    slo: float | None = None,
) -> ScheduleDecision:
    """Choose single-phase batches and their DoP for this iteration.

    ``slo`` overrides every request's ``slo_tbt`` when given.  Decode
    requests run at DoP 1 and are packed first; prefill requests share the
    remaining instances through the dynamic program.  If no plan meets the
    SLO the program is rerun without it and ``fallback_used`` is set.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= L < 1:
        raise ValueError(f"cache load must be in [0, 1), got {L}")
    prefill = _sort([r for r in requests if r.phase == PREFILL])
    decode = _sort([r for r in requests if r.phase == DECODE])

    def slo_of(r: PhaseRequest) -> float:
        return r.slo_tbt if slo is None else slo

    n_dec = _decode_share(n, decode, prefill, latency_model)
    batches: list[ScheduledBatch] = []
    objective = 0.0
    fallback = False
    for group in (_pack_decode(decode, n_dec) if n_dec else []):
        t = _batch_latency(group, 1, L, latency_model, DECODE)
        if t > min(slo_of(r) for r in group):
            fallback = True
        objective += len(group) * t
        batches.append(ScheduledBatch(tuple(r.request_id for r in group), 1, DECODE, t))

    K = n - n_dec
    deferred: tuple = ()
    if prefill and K == 0:
        deferred = tuple(r.request_id for r in prefill)
    elif prefill:
        slos = np.array([slo_of(r) for r in prefill], dtype=float)
        result = _prefill_dp(prefill, K, L, latency_model, slos)
        if result is None:
            fallback = True
            result = _prefill_dp(prefill, K, L, latency_model, None)
        assert result is not None
        pre_obj, spans = result
        objective = pre_obj + objective
        for j, i, dop in spans:
            group = prefill[j:i]
            t = _batch_latency(group, int(dop), L, latency_model, PREFILL)
            batches.append(ScheduledBatch(tuple(r.request_id for r in group), int(dop), PREFILL, t))
    return ScheduleDecision(batches, objective, fallback, deferred)
