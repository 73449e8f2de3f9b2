"""Analytical cost formulas for the segment pool.

All "4d" terms from the roofline analysis are interpreted as bytes moved for
``2 * d`` elements of ``bytes_per_elem`` bytes each (a query vector out, a
partial output plus normalizer back, or one token's K and V).  With 2-byte
elements this is numerically identical to ``4 * d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import tomli
from scipy.optimize import nnls

PROFILE_DIR = Path(__file__).parent / "profiles"

PREFILL = "prefill"
DECODE = "decode"


class InfeasibleLoadError(ValueError):
    """Raised when the cache load leaves no compute for the batch (L >= 1)."""


@dataclass(frozen=True)
class HardwareProfile:
    """Per-instance hardware and model dimensions."""

    d: int = 4096
    layers: int = 32
    flops: float = 312e12
    mem_bw: float = 2.039e12
    net_bw: float = 400e9
    alpha_net: float = 2.3e-6
    bytes_per_elem: int = 2

    def __post_init__(self) -> None:
        for name in ("d", "layers", "flops", "mem_bw", "net_bw", "alpha_net", "bytes_per_elem"):
            if not getattr(self, name) > 0:
                raise ValueError(f"HardwareProfile.{name} must be > 0, got {getattr(self, name)!r}")

    @property
    def vector_bytes(self) -> int:
        """Bytes of the paired 2*d element vectors counted as "4d"."""
        return 2 * self.d * self.bytes_per_elem

    @classmethod
    def load(cls, name_or_path: str | Path) -> "HardwareProfile":
        """Load a profile from a shipped profile name (``"a100"``) or a TOML path."""
        path = Path(name_or_path)
        if not path.suffix and not path.exists():
            path = PROFILE_DIR / f"{name_or_path}.toml"
        with open(path, "rb") as fh:
            data = tomli.load(fh)
        data = data.get("hardware", data)
        return cls(**data)


CALIBRATION_PROFILE = HardwareProfile()


@dataclass(frozen=True)
class RequestShape:
    prefix_len: int
    input_len: int

    def __post_init__(self) -> None:
        if self.prefix_len < 0 or self.input_len < 0:
            raise ValueError("prefix_len and input_len must be >= 0")


@dataclass(frozen=True)
class PhaseCoeffs:
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0

    def __post_init__(self) -> None:
        if min(self.a, self.b, self.c) < 0:
            raise ValueError("latency coefficients must be >= 0")


@dataclass(frozen=True)
class LatencyModel:
    """Quadratic latency model ``a * sum((prefix + input) * input) + b * sum(input) + c``.

    Coefficients are kept per phase; decode requests always contribute one
    input token.
    """

    prefill: PhaseCoeffs
    decode: PhaseCoeffs
    meta: dict = field(default_factory=dict, compare=False)

    def coeffs(self, phase: str) -> PhaseCoeffs:
        if phase == PREFILL:
            return self.prefill
        if phase == DECODE:
            return self.decode
        raise ValueError(f"unknown phase {phase!r}")

    @classmethod
    def from_profile(cls, profile: HardwareProfile, n_points: int = 50, seed: int = 0) -> "LatencyModel":
        return fit_latency_model(profile, n_points=n_points, seed=seed)


# -- roofline constants -------------------------------------------------------


def k_comp(profile: HardwareProfile) -> float:
    """Seconds per cached token to attend one query: max(4d/F, 4d/B_mem)."""
    return max(4 * profile.d / profile.flops, profile.vector_bytes / profile.mem_bw)


def comm_time(profile: HardwareProfile) -> float:
    """Round trip of one remote query: send q, receive partial output and normalizer."""
    return 2 * profile.alpha_net + profile.vector_bytes / profile.net_bw


def min_segment_size(profile: HardwareProfile) -> float:
    """Smallest segment (tokens) whose remote attention saves at least its comm time."""
    kc = k_comp(profile)
    return 2 * profile.alpha_net / kc + profile.vector_bytes / (kc * profile.net_bw)


def default_segment_size(profile: HardwareProfile, granularity: int = 64) -> int:
    return granularity * math.ceil(min_segment_size(profile) / granularity)


def query_comm_volume(profile: HardwareProfile, l: int, n_remote: int) -> int:
    """Bytes per layer to scatter queries of ``l`` tokens to ``n_remote`` instances and gather results."""
    if l < 0 or n_remote < 0:
        raise ValueError("l and n_remote must be >= 0")
    return 2 * profile.d * l * n_remote * profile.bytes_per_elem


def kv_put_volume(profile: HardwareProfile, new_tokens: int) -> int:
    """Bytes per layer to store the K and V of ``new_tokens`` tokens remotely."""
    if new_tokens < 0:
        raise ValueError("new_tokens must be >= 0")
    return 2 * profile.d * profile.bytes_per_elem * new_tokens


# -- latency model --------------------------------------------------------------


def estimate_batch_latency(
    reqs: Sequence[RequestShape],
    dop: int,
    L: float,
    model: LatencyModel,
    phase: str = PREFILL,
) -> float:
    if dop < 1:
        raise ValueError(f"dop must be >= 1, got {dop}")
    if L >= 1:
        raise InfeasibleLoadError(f"cache load {L} leaves no compute")
    if L < 0:
        raise ValueError(f"cache load must be >= 0, got {L}")
    co = model.coeffs(phase)
    quad = 0
    lin = 0
    for r in reqs:
        inp = 1 if phase == DECODE else r.input_len
        quad += (r.prefix_len + inp) * inp
        lin += inp
    return (co.a * quad + co.b * lin + co.c) / (dop * (1 - L))


def self_attention_time(reqs: Sequence[RequestShape], dop: int, L: float, model: LatencyModel, phase: str = PREFILL) -> float:
    """Part of the quadratic term spent on the batch's own input tokens."""
    co = model.coeffs(phase)
    own = 0
    for r in reqs:
        inp = 1 if phase == DECODE else r.input_len
        own += inp * inp
    return co.a * own / (dop * (1 - L))


def ideal_time(
    reqs: Sequence[RequestShape],
    n: int,
    profile: HardwareProfile,
    model: LatencyModel,
    phases: Sequence[str] | None = None,
) -> float:
    """Latency of ``reqs`` if perfectly spread over ``n`` fully used instances.

    ``phases`` optionally tags each request; untagged requests are prefill.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not reqs:
        return 0.0
    if phases is None:
        phases = [PREFILL] * len(reqs)
    total = 0.0
    for phase in (PREFILL, DECODE):
        group = [r for r, p in zip(reqs, phases) if p == phase]
        if group:
            total += estimate_batch_latency(group, 1, 0.0, model, phase)
    return total / n


def cache_load(reqs: Sequence[RequestShape], n: int, profile: HardwareProfile, T_r: float) -> float:
    """Fraction of instance resources consumed serving the pooled prefix attention.

    Byte and FLOP totals are summed over all layers because ``T_r`` is a
    whole-model latency.
    """
    if not reqs:
        return 0.0
    if T_r <= 0:
        raise ValueError("T_r must be > 0 when reqs is non-empty")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    m_r = sum(profile.vector_bytes * (r.prefix_len + r.input_len) for r in reqs) * profile.layers
    f_r = sum(2 * profile.d * r.prefix_len * r.input_len for r in reqs) * profile.layers
    mem = m_r / (m_r + n * profile.mem_bw * T_r)
    comp = f_r / (f_r + n * profile.flops * T_r)
    return max(mem, comp)


# -- calibration --------------------------------------------------------------


def roofline_batch_time(profile: HardwareProfile, reqs: Iterable[RequestShape], phase: str = PREFILL) -> float:
    """Whole-model roofline time of one batch on one instance.

    Linear layers are approximated as 12*d^2 parameters per layer.
    """
    d, bpe = profile.d, profile.bytes_per_elem
    flops = 0.0
    kv_bytes = 0.0
    for r in reqs:
        inp = 1 if phase == DECODE else r.input_len
        ctx = r.prefix_len + inp
        flops += 24 * d * d * inp + 4 * d * ctx * inp
        kv_bytes += 2 * d * bpe * ctx
    weight_bytes = 12 * d * d * bpe
    per_layer = max(flops / profile.flops, (weight_bytes + kv_bytes) / profile.mem_bw)
    return profile.layers * per_layer


def calibration_points(profile: HardwareProfile, phase: str, n_points: int, rng: np.random.Generator):
    """Random batches in the operating range of each phase plus their roofline times."""
    batches = []
    for _ in range(n_points):
        if phase == PREFILL:
            n_req = int(rng.integers(1, 5))
            reqs = [
                RequestShape(int(rng.integers(0, 32768)), int(rng.integers(256, 4096)))
                for _ in range(n_req)
            ]
        else:
            n_req = int(rng.integers(1, 65))
            reqs = [RequestShape(int(rng.integers(0, 32768)), 1) for _ in range(n_req)]
        batches.append(reqs)
    times = np.array([roofline_batch_time(profile, b, phase) for b in batches])
    return batches, times


def _features(batches, phase: str) -> np.ndarray:
    rows = []
    for reqs in batches:
        quad = lin = 0
        for r in reqs:
            inp = 1 if phase == DECODE else r.input_len
            quad += (r.prefix_len + inp) * inp
            lin += inp
        rows.append((quad, lin, 1.0))
    return np.asarray(rows, dtype=float)


def fit_phase(batches, times: np.ndarray, phase: str) -> PhaseCoeffs:
    """Non-negative least squares on relative error."""
    X = _features(batches, phase)
    scale = X.max(axis=0)
    scale[scale == 0] = 1.0
    w = 1.0 / times
    coef, _ = nnls((X / scale) * w[:, None], times * w)
    coef = coef / scale
    return PhaseCoeffs(float(coef[0]), float(coef[1]), float(coef[2]))


def fit_latency_model(
    profile: HardwareProfile,
    n_points: int = 50,
    seed: int = 0,
    measured: dict[str, tuple[list, Sequence[float]]] | None = None,
) -> LatencyModel:
    """Fit per-phase coefficients to roofline timings, or to ``measured`` points when given."""
    rng = np.random.default_rng(seed)
    coeffs = {}
    for phase in (PREFILL, DECODE):
        if measured and phase in measured:
            batches, times = measured[phase]
            times = np.asarray(times, dtype=float)
        else:
            batches, times = calibration_points(profile, phase, n_points, rng)
        coeffs[phase] = fit_phase(batches, times, phase)
    return LatencyModel(coeffs[PREFILL], coeffs[DECODE], meta={"source": "roofline" if not measured else "measured", "seed": seed})
