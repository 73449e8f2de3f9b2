"""Synthetic trace generation shaped like long-document QA, multi-turn
shared-context chat and short chat, plus JSONL trace files and
deterministic token materialization.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Sequence

import numpy as np

PRESETS = ("loogle_like", "scbench_like", "sharegpt_like", "mixed")
QUESTION_LEN = 128  # tokens appended after a document on a session's first turn
FIELDS = ("request_id", "session_id", "turn_index", "arrival_time", "input_len", "output_len", "shared_prefix_id")

SCBENCH_DOC_BASE = 1 << 32  # scbench_like contexts are per-session documents
_TOKEN_HIGH = 1 << 31


class TraceFormatError(ValueError):
    pass


class TraceSchemaError(TraceFormatError):
    pass


def tail_sigma(ratio: float = 2.0, tail: float = 0.1) -> float:
    """Lognormal sigma such that P(X > ratio * mean) = tail."""
    z = NormalDist().inv_cdf(1 - tail)
    # (ln ratio + s^2/2) / s = z  ->  s^2/2 - z s + ln ratio = 0, smaller root
    return z - math.sqrt(z * z - 2 * math.log(ratio))


SIGMA = tail_sigma()


@dataclass
class TraceSpec:
    preset: str = "sharegpt_like"
    rate_lambda: float = 1.0  # session arrivals per second
    duration: float = 60.0
    seed: int = 0
    system_prompt_len: int = 1024
    max_sessions: int | None = None
    output_mean: float = 256.0
    think_time_mean: float = 5.0
    # loogle_like
    loogle_mean_len: float = 24_000.0
    n_documents: int = 200
    doc_zipf: float = 1.1
    # scbench_like
    scbench_mean_total: float = 227_000.0
    scbench_extra_turns: float = 4.0  # turns = 1 + Poisson(this)
    followup_mean: float = 128.0
    # sharegpt_like
    sharegpt_range: tuple[int, int] = (64, 2400)
    length_scale: float = 1.0  # shrinks every sampled length for desk-scale runs

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.rate_lambda < 0:
            raise ValueError("rate_lambda must be >= 0")
        if self.duration < 0:
            raise ValueError("duration must be >= 0")
        if self.system_prompt_len < 0:
            raise ValueError("system_prompt_len must be >= 0")
        if self.max_sessions is not None and self.max_sessions < 0:
            raise ValueError("max_sessions must be >= 0")
        if not 0 < self.length_scale:
            raise ValueError("length_scale must be > 0")
        self.sharegpt_range = tuple(self.sharegpt_range)


@dataclass(frozen=True)
class TraceRecord:
    request_id: int
    session_id: int
    turn_index: int
    arrival_time: float
    input_len: int  # full prompt of this turn, history included
    output_len: int
    shared_prefix_id: int | None = None


def _lognormal(rng: np.random.Generator, mean: float, size=None):
    mu = math.log(mean) - SIGMA**2 / 2
    return rng.lognormal(mu, SIGMA, size)


def _zipf_probs(n: int, s: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=float) ** -s
    return w / w.sum()


def document_length(spec: TraceSpec, doc_id: int) -> int:
    """Length of a loogle_like document; a pure function of (seed, doc_id)."""
    rng = np.random.default_rng([spec.seed, 1, doc_id])
    body = spec.loogle_mean_len - spec.system_prompt_len - QUESTION_LEN
    return max(1, int(round(_lognormal(rng, max(body, 1.0)) * spec.length_scale)))


def _session(spec: TraceSpec, preset: str, sid: int, t0: float, rng: np.random.Generator, doc_p) -> list[TraceRecord]:
    S = spec.system_prompt_len
    scale = spec.length_scale

    def out_len() -> int:
        return max(1, int(round(_lognormal(rng, spec.output_mean) * scale)))

    if preset == "sharegpt_like":
        lo, hi = spec.sharegpt_range
        user = max(1, int(round(rng.integers(lo, hi + 1) * scale)))
        return [TraceRecord(-1, sid, 0, t0, S + user, out_len(), None)]
    if preset == "loogle_like":
        doc = int(rng.choice(len(doc_p), p=doc_p))
        return [TraceRecord(-1, sid, 0, t0, S + document_length(spec, doc) + QUESTION_LEN, out_len(), doc)]
    # scbench_like: long per-session context, several follow-up turns
    turns = 1 + int(rng.poisson(spec.scbench_extra_turns))
    extra = spec.scbench_extra_turns
    body = spec.scbench_mean_total - S - QUESTION_LEN - (1 + extra) * spec.output_mean - extra * spec.followup_mean
    doc_len = max(1, int(round(_lognormal(rng, max(body, 1.0)) * scale)))
    recs = []
    t = t0
    prompt = S + doc_len + QUESTION_LEN
    for k in range(turns):
        if k:
            t += float(rng.exponential(spec.think_time_mean))
            prompt += recs[-1].output_len + max(1, int(round(_lognormal(rng, spec.followup_mean) * scale)))
        recs.append(TraceRecord(-1, sid, k, t, prompt, out_len(), SCBENCH_DOC_BASE + sid))
    return recs


def generate(spec: TraceSpec) -> list[TraceRecord]:
    """Poisson session arrivals; request ids follow arrival order."""
    if spec.rate_lambda == 0 or spec.duration == 0 and spec.max_sessions is None:
        return []
    rng = np.random.default_rng(spec.seed)
    doc_p = _zipf_probs(spec.n_documents, spec.doc_zipf)
    cycle = ("sharegpt_like", "loogle_like", "scbench_like")
    recs: list[TraceRecord] = []
    t = 0.0
    sid = 0
    while spec.max_sessions is None or sid < spec.max_sessions:
        t += float(rng.exponential(1.0 / spec.rate_lambda))
        if spec.max_sessions is None and t > spec.duration:
            break
        preset = cycle[sid % 3] if spec.preset == "mixed" else spec.preset
        recs.extend(_session(spec, preset, sid, t, rng, doc_p))
        sid += 1
    recs.sort(key=lambda r: (r.arrival_time, r.session_id, r.turn_index))
    return [TraceRecord(i, *astuple_tail(r)) for i, r in enumerate(recs)]


def astuple_tail(r: TraceRecord) -> tuple:
    return (r.session_id, r.turn_index, r.arrival_time, r.input_len, r.output_len, r.shared_prefix_id)


# -- files ----------------------------------------------------------------------


def save(trace: Iterable[TraceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in trace:
            fh.write(json.dumps(asdict(r)) + "\n")


def _check(obj: dict, lineno: int) -> TraceRecord:
    missing = [f for f in FIELDS if f not in obj]
    if missing:
        raise TraceSchemaError(f"line {lineno}: missing field(s) {', '.join(missing)}")
    extra = sorted(set(obj) - set(FIELDS))
    if extra:
        raise TraceSchemaError(f"line {lineno}: unknown field(s) {', '.join(extra)}")
    for f in ("request_id", "session_id", "turn_index", "input_len", "output_len"):
        if not isinstance(obj[f], int) or isinstance(obj[f], bool):
            raise TraceSchemaError(f"line {lineno}: {f} must be an integer")
    if not isinstance(obj["arrival_time"], (int, float)) or isinstance(obj["arrival_time"], bool):
        raise TraceSchemaError(f"line {lineno}: arrival_time must be a number")
    sp = obj["shared_prefix_id"]
    if sp is not None and (not isinstance(sp, int) or isinstance(sp, bool)):
        raise TraceSchemaError(f"line {lineno}: shared_prefix_id must be an integer or null")
    return TraceRecord(**{**obj, "arrival_time": float(obj["arrival_time"])})


def load(path: str | Path) -> list[TraceRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceFormatError(f"line {lineno}: {e.msg}") from None
            if not isinstance(obj, dict):
                raise TraceFormatError(f"line {lineno}: expected an object")
            out.append(_check(obj, lineno))
    return out


def summarize(trace: Sequence[TraceRecord]) -> dict:
    if not trace:
        return {"records": 0, "sessions": 0}
    sessions: dict[int, list[TraceRecord]] = {}
    for r in trace:
        sessions.setdefault(r.session_id, []).append(r)
    last = [max(rs, key=lambda r: r.turn_index) for rs in sessions.values()]
    return {
        "records": len(trace),
        "sessions": len(sessions),
        "mean_turns": len(trace) / len(sessions),
        "mean_input_len": float(np.mean([r.input_len for r in trace])),
        "mean_output_len": float(np.mean([r.output_len for r in trace])),
        "mean_session_len": float(np.mean([r.input_len + r.output_len for r in last])),
        "span_s": trace[-1].arrival_time - trace[0].arrival_time,
    }


# -- tokens ---------------------------------------------------------------------


class TokenFactory:
    """Deterministic abstract token ids for trace records.

    A first turn is system prompt, then the document (if any) and a question,
    or a unique user message.  Later turns extend the previous prompt with the
    previous output and a new message, so sessions share growing prefixes.
    """

    def __init__(self, trace: Sequence[TraceRecord], seed: int = 0, system_prompt_len: int = 1024):
        self.seed = seed
        self.system_prompt_len = system_prompt_len
        self._by_turn = {(r.session_id, r.turn_index): r for r in trace}
        self._system = self._stream(0, 0, system_prompt_len)
        self._doc = lru_cache(maxsize=512)(self._doc_tokens)

    def _stream(self, tag: int, ident: int, n: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 1000 + tag, ident])
        return rng.integers(0, _TOKEN_HIGH, n, dtype=np.uint32)

    def _doc_tokens(self, doc_id: int, n: int) -> np.ndarray:
        return self._stream(1, doc_id, n)

    def output_tokens(self, record: TraceRecord) -> np.ndarray:
        return self._stream(3, record.request_id, record.output_len)

    def prompt_tokens(self, record: TraceRecord) -> np.ndarray:
        S = self.system_prompt_len
        if record.turn_index == 0:
            if record.shared_prefix_id is not None:
                body = record.input_len - S - QUESTION_LEN
                if body < 0:
                    raise ValueError(f"request {record.request_id}: input_len too short for its document")
                parts = [self._system, self._doc(record.shared_prefix_id, body),
                         self._stream(2, record.request_id, QUESTION_LEN)]
            else:
                parts = [self._system[: record.input_len], self._stream(2, record.request_id, max(0, record.input_len - S))]
            return np.concatenate(parts)
        prev = self._by_turn[(record.session_id, record.turn_index - 1)]
        new = record.input_len - prev.input_len - prev.output_len
        if new < 0:
            raise ValueError(f"request {record.request_id}: prompt shorter than its history")
        return np.concatenate([self.prompt_tokens(prev), self.output_tokens(prev), self._stream(2, record.request_id, new)])

    def full_tokens(self, record: TraceRecord) -> np.ndarray:
        """Prompt followed by the generated output."""
        return np.concatenate([self.prompt_tokens(record), self.output_tokens(record)])
