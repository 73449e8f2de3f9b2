"""Iteration-stepped cluster simulation of the segment pool and its baselines.

Policies:

* ``pooled``: one global deduplicated segment pool, cluster-wide
  goodput scheduling (``scheduler.plan``) and matching-based dispatch.
* ``cache_aware_router``: per-instance local caches; each request runs on
  the instance with the best hit-minus-load score.
* ``pd_disagg``: local caches, separate prefill and decode instances with a
  full KV transfer at the phase handoff.
* ``strict_locality``: global dedup, but new segments stay on the instance
  running the request and spill elsewhere only when it is full.
"""

from __future__ import annotations

import heapq
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import dispatcher
from .cost_model import (
    DECODE,
    PREFILL,
    CALIBRATION_PROFILE,
    HardwareProfile,
    LatencyModel,
    RequestShape,
    default_segment_size,
    estimate_batch_latency,
    kv_put_volume,
    self_attention_time,
)
from .metrics import MetricsReport, RequestMetrics
from .prefix_pool import (
    AdmissionError,
    GlobalPrefixTree,
    InstanceDirectory,
    Segment,
    check_invariants,
    heavy_budget,
    home_instance,
    insert_prefix,
    match_prefix,
    rebalance,
    segment_keys,
    touch_chain,
)
from .scheduler import PhaseRequest, consume_cache_load, plan
from .workload import TokenFactory, TraceRecord

POLICIES = ("pooled", "cache_aware_router", "pd_disagg", "strict_locality")
LOCAL_POLICIES = ("cache_aware_router", "pd_disagg")


class ConfigError(ValueError):
    pass


@dataclass
class PolicyConfig:
    kind: str = "pooled"
    pd_split: tuple[int, int] | None = None  # (prefill, decode) instance counts
    w_hit: float = 1.0  # router score per locally cached token
    w_load: float = 1.0  # router penalty per queued token

    def __post_init__(self) -> None:
        if self.pd_split is not None:
            self.pd_split = tuple(self.pd_split)


@dataclass
class SimConfig:
    n_instances: int = 8
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    profile: HardwareProfile = CALIBRATION_PROFILE
    latency_model: LatencyModel | None = None
    segment_size: int | None = None  # default: roofline threshold rounded up to 64
    slot_capacity: int = 4096  # segments per instance
    overload_delta: float = 0.2
    heavy_constant: float = 1.0
    half_life: float = 32.0  # iterations, for the decayed access load
    chunk_size: int = 512
    slo_multiplier: float = 10.0
    system_prompt_len: int = 1024
    max_active: int = 64
    admission_retries: int = 3
    seed: int = 0
    check_invariants: bool = False

    def resolved(self) -> "SimConfig":
        cfg = SimConfig(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        if cfg.latency_model is None:
            cfg.latency_model = LatencyModel.from_profile(cfg.profile)
        if cfg.segment_size is None:
            cfg.segment_size = default_segment_size(cfg.profile)
        return cfg

    def validate(self) -> None:
        p = self.policy
        if self.n_instances < 1:
            raise ConfigError("n_instances must be >= 1")
        if p.kind not in POLICIES:
            raise ConfigError(f"policy.kind must be one of {POLICIES}, got {p.kind!r}")
        if p.kind == "pd_disagg":
            if p.pd_split is None or len(p.pd_split) != 2 or min(p.pd_split) < 1 or sum(p.pd_split) != self.n_instances:
                raise ConfigError("pd_disagg needs pd_split = (P, D) with P, D >= 1 and P + D = n_instances")
        for name in ("slot_capacity", "chunk_size", "max_active"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.segment_size is not None and self.segment_size < 1:
            raise ConfigError("segment_size must be >= 1")
        if self.overload_delta < 0 or self.slo_multiplier <= 0 or self.admission_retries < 0:
            raise ConfigError("overload_delta, slo_multiplier and admission_retries must be non-negative")


@dataclass
class IterationLog:
    iteration: int
    start: float
    latency: float = 0.0
    busy: np.ndarray = field(default=None)  # type: ignore[assignment]
    accesses: np.ndarray = field(default=None)  # type: ignore[assignment]
    comm_bytes: int = 0
    comm_latency: np.ndarray = field(default=None)  # type: ignore[assignment]  # max(0, comm - self-attn) per instance
    evictions: int = 0
    replications: int = 0
    recomputations: int = 0
    heavy_keys: int = 0
    admitted: list[int] = field(default_factory=list)
    dropped: list[int] = field(default_factory=list)
    retired: list[int] = field(default_factory=list)


class _Pool:
    """A prefix tree plus its directory; local baselines own one per instance."""

    def __init__(self, n: int, capacity: int, segment_size: int, half_life: float):
        self.tree = GlobalPrefixTree(segment_size)
        self.dir = InstanceDirectory(n, capacity, half_life)

    def stored(self) -> int:
        return sum(len(s) for s in self.dir.stored)


@dataclass(eq=False)
class _Req:
    rec: TraceRecord
    arrival: float
    tokens: np.ndarray
    keys: list[int]
    metrics: RequestMetrics
    pool: int = 0  # pool holding the pinned chain
    chain: list[int] = field(default_factory=list)
    done: int = 0  # prompt tokens processed (cache hits count as processed)
    generated: int = 0
    instance: int = -1  # execution instance for non-pooled policies
    decode_instance: int = -1
    inserted_segments: int = 0
    q_tokens: Counter = field(default_factory=Counter)  # instance -> cached context tokens read from it
    last_token: float = 0.0
    pending_comm: float = 0.0  # seconds charged to the next iteration (pd handoff)
    attempts: int = 0

    @property
    def in_prefill(self) -> bool:
        return self.done < self.rec.input_len

    @property
    def finished(self) -> bool:
        return not self.in_prefill and self.generated >= self.rec.output_len


class Simulation:
    """Deterministic state machine; call :meth:`step` until :attr:`finished`."""

    def __init__(self, config: SimConfig, trace: Sequence[TraceRecord]):
        config.validate()
        self.cfg = cfg = config.resolved()
        self.trace = list(trace)
        self.n = n = cfg.n_instances
        self.C = cfg.segment_size
        self.model: LatencyModel = cfg.latency_model  # type: ignore[assignment]
        self.profile = cfg.profile
        self.kind = cfg.policy.kind
        self.rng = random.Random(cfg.seed)
        self.tokens = TokenFactory(self.trace, cfg.seed, cfg.system_prompt_len)
        if self.kind in LOCAL_POLICIES:
            self.pools = [_Pool(1, cfg.slot_capacity, self.C, cfg.half_life) for _ in range(n)]
        else:
            self.pools = [_Pool(n, cfg.slot_capacity, self.C, cfg.half_life)]
        if self.kind == "pd_disagg":
            P, _ = cfg.policy.pd_split  # type: ignore[misc]
            self.prefill_insts = list(range(P))
            self.decode_insts = list(range(P, n))
        self.budget = heavy_budget(n, cfg.heavy_constant)
        self.clock = 0.0
        self.iteration = 0
        self.active: list[_Req] = []
        self.waiting: list[_Req] = []  # admission blocked on pinned capacity
        self.ready: list[tuple[float, int]] = []  # (effective arrival, trace index)
        self._next_turn: dict[tuple[int, int], int] = {}
        self._first_turn_seen: set[int] = set()
        for idx, r in enumerate(self.trace):
            self._next_turn[(r.session_id, r.turn_index)] = idx
        for idx, r in enumerate(self.trace):
            if (r.session_id, r.turn_index - 1) not in self._next_turn:
                heapq.heappush(self.ready, (r.arrival_time, idx))
        self.report = MetricsReport(n, self.kind, heavy_budget=self.budget)
        self._acc_times: list[float] = []
        self._acc_rows: list[np.ndarray] = []
        self._pending_comm = np.zeros(n)
        self._by_id: dict[int, RequestMetrics] = {}

    # -- helpers ----------------------------------------------------------------

    @property
    def finished(self) -> bool:
        return not self.ready and not self.active and not self.waiting

    def _lat(self, shapes, phase, dop=1, L=0.0) -> float:
        return estimate_batch_latency(shapes, dop, L, self.model, phase) if shapes else 0.0

    def _ttft_ref(self, n_tokens: int) -> float:
        total = 0.0
        ch = self.cfg.chunk_size
        for start in range(0, n_tokens, ch):
            total += self._lat([RequestShape(start, min(ch, n_tokens - start))], PREFILL)
        return total

    def _queued_tokens(self, inst: int) -> int:
        q = 0
        for r in self.active:
            if r.instance == inst or r.decode_instance == inst:
                q += (r.rec.input_len - r.done) + (r.rec.output_len - r.generated)
        return q

    def _pool_of(self, inst: int) -> _Pool:
        return self.pools[inst] if self.kind in LOCAL_POLICIES else self.pools[0]

    # -- admission ----------------------------------------------------------------

    def _make_request(self, idx: int, eff_arrival: float) -> _Req:
        rec = self.trace[idx]
        toks = self.tokens.prompt_tokens(rec)
        keys = segment_keys(toks, self.C)
        m = RequestMetrics(rec.request_id, rec.session_id, rec.input_len, rec.output_len, eff_arrival)
        m.ttft_ref = self._ttft_ref(rec.input_len)
        return _Req(rec, eff_arrival, toks, keys, m)

    def route_baseline(self, req: _Req) -> int:
        """Execution instance of a new request under a baseline policy."""
        pol = self.cfg.policy
        if self.kind == "cache_aware_router":
            best, best_score = 0, -math.inf
            for i in range(self.n):
                _, hit = match_prefix(self.pools[i].tree, req.tokens, keys=req.keys)
                score = pol.w_hit * hit - pol.w_load * self._queued_tokens(i)
                if score > best_score:
                    best, best_score = i, score
            return best
        if self.kind == "pd_disagg":
            return min(self.prefill_insts, key=lambda i: (self._queued_tokens(i), i))
        if self.kind == "strict_locality":
            chain, _ = match_prefix(self.pools[0].tree, req.tokens, keys=req.keys)
            if chain:
                return min(self.pools[0].tree.nodes[chain[-1]].replicas)
            return home_instance(req.keys[0], self.n)
        raise ValueError("route_baseline is for baseline policies")

    def _try_admit(self, req: _Req, log: IterationLog, counts: np.ndarray) -> bool:
        if self.kind != "pooled" and req.instance < 0:
            req.instance = self.route_baseline(req)
        req.pool = req.instance if self.kind in LOCAL_POLICIES else 0
        pool = self.pools[req.pool]
        chain, hit = match_prefix(pool.tree, req.tokens, keys=req.keys)
        # pinned-capacity deadlock: pinning must leave a free-able slot on every instance touched
        extra = Counter()
        for k in chain:
            if not pool.dir.pinned[k]:
                for i in pool.tree.nodes[k].replicas:
                    extra[i] += 1
        cap = pool.dir.slot_capacity
        if any(pool.dir.pinned_per_instance[i] + c >= cap for i, c in extra.items()):
            return False
        pool.dir.pin(pool.tree, chain)
        req.chain = chain
        req.metrics.hit_tokens = hit
        req.done = min(hit, req.rec.input_len - 1) if req.rec.input_len > 0 else 0
        # read the cached prefix once: these are the cache accesses of the request
        chosen = touch_chain(pool.tree, pool.dir, chain, self.rng, self.iteration)
        offset = req.pool if self.kind in LOCAL_POLICIES else 0
        for k, i in zip(chain, chosen):
            counts[i + offset] += 1
            req.q_tokens[i + offset] += pool.tree.nodes[k].token_count
        self.report.hit_tokens += hit
        self.report.cacheable_tokens += req.rec.input_len
        log.admitted.append(req.rec.request_id)
        return True

    def _drop(self, req: _Req, log: IterationLog) -> None:
        req.metrics.dropped = True
        self.report.drops += 1
        self.report.requests.append(req.metrics)
        log.dropped.append(req.rec.request_id)
        # the rest of the session cannot run without this turn
        nxt = self._next_turn.get((req.rec.session_id, req.rec.turn_index + 1))
        while nxt is not None:
            rec = self.trace[nxt]
            m = RequestMetrics(rec.request_id, rec.session_id, rec.input_len, rec.output_len, rec.arrival_time, dropped=True)
            self.report.requests.append(m)
            self.report.drops += 1
            log.dropped.append(rec.request_id)
            nxt = self._next_turn.get((rec.session_id, rec.turn_index + 1))

    def _admit(self, log: IterationLog, counts: np.ndarray) -> None:
        still: list[_Req] = []
        for req in self.waiting:
            if len(self.active) >= self.cfg.max_active:
                still.append(req)
                continue
            if self._try_admit(req, log, counts):
                self.active.append(req)
                continue
            req.attempts += 1
            if req.attempts > self.cfg.admission_retries:
                self._drop(req, log)
            else:
                still.append(req)
        self.waiting = still
        while self.ready and self.ready[0][0] <= self.clock and len(self.active) < self.cfg.max_active:
            eff, idx = heapq.heappop(self.ready)
            req = self._make_request(idx, eff)
            if self._try_admit(req, log, counts):
                self.active.append(req)
            else:
                req.attempts = 1
                self.waiting.append(req)

    # -- caching ------------------------------------------------------------------

    def _insert(self, req: _Req, pool_idx: int, tokens: np.ndarray, keys: list[int] | None, placed=None, place=None) -> int:
        pool = self.pools[pool_idx]
        try:
            insert_prefix(pool.tree, pool.dir, tokens, self.iteration, keys=keys, placed=placed, place=place)
        except AdmissionError:
            return 0
        return 1

    def _strict_place(self, req: _Req, spill: list[int]):
        d = self.pools[0].dir

        def place(seg: Segment) -> int:
            own = req.instance
            if d.free_slots(own) > 0:
                return own
            other = max(range(self.n), key=lambda j: (d.free_slots(j), -j))
            if other != own and d.free_slots(other) > 0:
                spill.append(other)
                return other
            return own  # evict locally

        return place

    def _cache_progress(self, req: _Req, log: IterationLog) -> None:
        """Insert the prompt segments completed so far (the tail once prefill ends)."""
        C = self.C
        full = req.done // C
        complete = not req.in_prefill
        if full <= req.inserted_segments and not complete:
            return
        upto = req.rec.input_len if complete else full * C
        nkeys = len(req.keys) if complete else full
        placed: list[tuple[int, int]] = []
        spill: list[int] = []
        place = self._strict_place(req, spill) if self.kind == "strict_locality" else None
        pool_idx = req.instance if self.kind in LOCAL_POLICIES else 0
        self._insert(req, pool_idx, req.tokens[:upto], req.keys[:nkeys], placed, place)
        req.inserted_segments = full
        if self.kind in ("pooled", "strict_locality"):
            nodes = self.pools[0].tree.nodes
            for key, inst in placed:
                req.q_tokens[inst] += nodes[key].token_count
        if spill:
            b = kv_put_volume(self.profile, C) * self.profile.layers * len(spill)
            log.comm_bytes += b
            self._pending_comm[req.instance] += b / self.profile.net_bw

    # -- execution ------------------------------------------------------------------

    def _work_items(self):
        """PhaseRequests for this iteration plus a lookup back to the state objects."""
        items = []
        by_id = {}
        for r in self.active:
            if r.in_prefill:
                inp = min(self.cfg.chunk_size, r.rec.input_len - r.done)
                ctx = r.done + inp
                ref = self._lat([RequestShape(r.done, inp)], PREFILL)
                pr = PhaseRequest(r.rec.request_id, r.rec.session_id, PREFILL, ctx, inp, self.cfg.slo_multiplier * ref)
            else:
                ctx = r.rec.input_len + r.generated + 1
                ref = self._lat([RequestShape(ctx - 1, 1)], DECODE)
                pr = PhaseRequest(r.rec.request_id, r.rec.session_id, DECODE, ctx, 1, self.cfg.slo_multiplier * ref)
            items.append(pr)
            by_id[pr.request_id] = (r, pr)
        return items, by_id

    def _comm_seconds(self, bytes_per_layer: int, messages: int) -> float:
        p = self.profile
        if bytes_per_layer <= 0 and messages <= 0:
            return 0.0
        return p.layers * (2 * p.alpha_net * messages + bytes_per_layer / p.net_bw)

    def _run_pooled(self, log: IterationLog) -> set[int]:
        n = self.n
        items, by_id = self._work_items()
        if not items:
            return set()
        shapes = [pr.shape for pr in items]
        phases = [pr.phase for pr in items]
        L = consume_cache_load(shapes, n, self.profile, self.model, phases)
        decision = plan(items, n, L, self.model)
        nodes: list[dispatcher.BatchNode] = []
        node_batch = {}
        C = self.C
        vb = self.profile.vector_bytes
        for bid, b in enumerate(decision.batches):
            touches = []
            for rid in b.request_ids:
                r, pr = by_id[rid]
                for inst, tok in sorted(r.q_tokens.items()):
                    touches.append(dispatcher.SegmentTouch(tok, query_instance=inst))
                if b.phase == PREFILL:
                    # segments completed by this chunk will be stored at their home instance
                    first = r.done // C
                    last = (r.done + pr.input_len) // C
                    end_seg = len(r.keys) if r.done + pr.input_len == r.rec.input_len else last
                    for s in range(max(first, r.inserted_segments), end_seg):
                        if r.keys[s] not in self.pools[0].tree.nodes:
                            touches.append(dispatcher.SegmentTouch(min(C, r.rec.input_len - s * C), put_instance=home_instance(r.keys[s], n)))
                touches.append(dispatcher.SegmentTouch(pr.input_len))
            batch = dispatcher.Batch(bid, list(b.request_ids), touches)
            for nd in dispatcher.decompose(batch, b.dop, n):
                nodes.append(nd)
                node_batch[nd.node_id] = b
        dplan = dispatcher.assign(nodes, n, self.profile)
        for nd in nodes:
            v = dplan.instance_of(nd)
            b = node_batch[nd.node_id]
            bshapes = [by_id[rid][1].shape for rid in b.request_ids]
            q_tok = sum(s.input_len for s in bshapes) / b.dop
            remote_q = [i for i in nd.query_set if i != v]
            remote_p = {i: c for i, c in nd.put_map.items() if i != v}
            bytes_pl = int(vb * q_tok * len(remote_q)) + vb * C * sum(remote_p.values())
            comm = self._comm_seconds(bytes_pl, len(remote_q) + len(remote_p))
            attn = self_attention_time(bshapes, b.dop, L, self.model, b.phase)
            log.busy[v] += b.latency
            log.comm_latency[v] += max(0.0, comm - attn)
            log.comm_bytes += bytes_pl * self.profile.layers
        return {rid for b in decision.batches for rid in b.request_ids}

    def _run_local(self, log: IterationLog) -> set[int]:
        items, by_id = self._work_items()
        per_pre: dict[int, list[RequestShape]] = {}
        per_dec: dict[int, list[RequestShape]] = {}
        for pr in items:
            r, _ = by_id[pr.request_id]
            if pr.phase == PREFILL:
                per_pre.setdefault(r.instance, []).append(pr.shape)
            else:
                inst = r.decode_instance if self.kind == "pd_disagg" else r.instance
                per_dec.setdefault(inst, []).append(pr.shape)
        comm_remote = np.zeros(self.n)
        if self.kind == "strict_locality":
            vb = self.profile.vector_bytes
            for pr in items:
                r, _ = by_id[pr.request_id]
                remote = [i for i in r.q_tokens if i != r.instance]
                if remote:
                    bpl = vb * pr.input_len * len(remote)
                    comm_remote[r.instance] += self._comm_seconds(bpl, len(remote))
                    log.comm_bytes += bpl * self.profile.layers
        for i in range(self.n):
            pre, dec = per_pre.get(i, []), per_dec.get(i, [])
            compute = self._lat(pre, PREFILL) + self._lat(dec, DECODE)
            attn = (self_attention_time(pre, 1, 0.0, self.model, PREFILL) if pre else 0.0) + (
                self_attention_time(dec, 1, 0.0, self.model, DECODE) if dec else 0.0
            )
            comm = comm_remote[i] + self._pending_comm[i]
            log.busy[i] += compute
            log.comm_latency[i] += max(0.0, comm - attn)
        self._pending_comm[:] = 0.0
        return set(by_id)

    def _handoff(self, r: _Req, log: IterationLog) -> None:
        """pd_disagg: move the prompt KV from the prefill to a decode instance."""
        dst = min(self.decode_insts, key=lambda i: (self._queued_tokens(i), i))
        r.decode_instance = dst
        p = self.profile
        vol = kv_put_volume(p, r.rec.input_len) * p.layers
        log.comm_bytes += vol
        self._pending_comm[dst] += 2 * p.alpha_net * p.layers + vol / p.net_bw
        ok = self._insert(r, dst, r.tokens, r.keys)
        if not ok:
            # no room for the transferred cache: the decode side recomputes it
            r.metrics.recompute_tokens += r.rec.input_len
            self.report.recompute_tokens += r.rec.input_len
            log.recomputations += 1
            self._pending_comm[dst] += self._lat([RequestShape(0, r.rec.input_len)], PREFILL)
        pool = self.pools[r.pool]
        pool.dir.unpin(pool.tree, r.chain)
        r.chain = []

    def _retire(self, r: _Req, log: IterationLog) -> None:
        full = self.tokens.full_tokens(r.rec)
        keys = segment_keys(full, self.C)
        if self.kind == "pd_disagg":
            self._insert(r, r.decode_instance, full, keys)
            # later turns start on a prefill instance, so the context travels back
            self._insert(r, r.instance, full, keys)
            log.comm_bytes += kv_put_volume(self.profile, len(full)) * self.profile.layers
        else:
            pool_idx = r.instance if self.kind in LOCAL_POLICIES else 0
            spill: list[int] = []
            place = self._strict_place(r, spill) if self.kind == "strict_locality" else None
            self._insert(r, pool_idx, full, keys, None, place)
        if r.chain:
            pool = self.pools[r.pool]
            pool.dir.unpin(pool.tree, r.chain)
            r.chain = []
        self.report.requests.append(r.metrics)
        log.retired.append(r.rec.request_id)
        nxt = self._next_turn.get((r.rec.session_id, r.rec.turn_index + 1))
        if nxt is not None:
            heapq.heappush(self.ready, (max(self.trace[nxt].arrival_time, self.clock), nxt))

    # -- main loop ------------------------------------------------------------------

    def step(self) -> IterationLog:
        n = self.n
        log = IterationLog(self.iteration, self.clock, busy=np.zeros(n), accesses=np.zeros(n, dtype=np.int64),
                           comm_latency=np.zeros(n))
        if not self.active and not self.waiting and self.ready and self.ready[0][0] > self.clock:
            self.clock = self.ready[0][0]  # idle: jump to the next arrival
            log.start = self.clock
        removed_before = sum(p.dir.removed for p in self.pools)
        self._admit(log, log.accesses)

        ran = self._run_pooled(log) if self.kind == "pooled" else self._run_local(log)
        latency = float(np.max(log.busy + log.comm_latency)) if n else 0.0
        log.latency = latency
        self.clock += latency
        end = self.clock

        still = []
        for r in self.active:
            rid = r.rec.request_id
            if rid in ran:
                if r.in_prefill:
                    r.done = min(r.rec.input_len, r.done + self.cfg.chunk_size)
                    self._cache_progress(r, log)
                    if not r.in_prefill:
                        r.metrics.ttft = end - r.arrival
                        r.last_token = end
                        if self.kind == "pd_disagg":
                            self._handoff(r, log)
                else:
                    r.generated += 1
                    ctx = r.rec.input_len + r.generated
                    r.metrics.tbt.append(end - r.last_token)
                    r.metrics.tbt_ref.append(self._lat([RequestShape(ctx - 1, 1)], DECODE))
                    r.last_token = end
            if r.finished:
                self._retire(r, log)
            else:
                still.append(r)
        self.active = still

        if self.kind == "pooled":
            pool = self.pools[0]
            pool.dir.decay()
            actions = rebalance(pool.tree, pool.dir, self.iteration, delta=self.cfg.overload_delta, budget=self.budget)
            done_keys = {a.key for a in actions}
            log.heavy_keys = len(done_keys)
            log.replications = sum(1 for a in actions if not a.skipped)
            log.comm_bytes += log.replications * kv_put_volume(self.profile, self.C) * self.profile.layers
        else:
            for p in self.pools:
                p.dir.decay()
        log.evictions = sum(p.dir.removed for p in self.pools) - removed_before

        if self.cfg.check_invariants:
            for p in self.pools:
                for msg in check_invariants(p.tree, p.dir):
                    if len(self.report.invariant_violations) < 1000:
                        self.report.invariant_violations.append(f"iteration {self.iteration}: {msg}")

        self._record(log)
        self.iteration += 1
        return log

    def _record(self, log: IterationLog) -> None:
        rep = self.report
        if log.accesses.any():
            self._acc_times.append(log.start)
            self._acc_rows.append(log.accesses)
        rep.comm_bytes += log.comm_bytes
        rep.evictions += log.evictions
        rep.replications += log.replications
        rep.max_heavy_keys = max(rep.max_heavy_keys, log.heavy_keys)
        rep.busy_time += float(log.busy.sum())

    def finalize(self) -> MetricsReport:
        rep = self.report
        rep.iterations = self.iteration
        rep.sim_time = self.clock
        if self._acc_rows:
            rep.access_times = np.array(self._acc_times)
            rep.access_counts = np.vstack(self._acc_rows)
        rep.requests.sort(key=lambda m: m.request_id)
        return rep


def run(config: SimConfig, trace: Sequence[TraceRecord], max_iterations: int | None = None) -> MetricsReport:
    """Simulate ``trace`` to completion (every request retired or dropped)."""
    sim = Simulation(config, trace)
    while not sim.finished:
        if max_iterations is not None and sim.iteration >= max_iterations:
            raise RuntimeError(f"simulation did not finish within {max_iterations} iterations")
        sim.step()
    return sim.finalize()


def trace_footprint(trace: Sequence[TraceRecord], segment_size: int, seed: int = 0, system_prompt_len: int = 1024) -> int:
    """Distinct segments needed to cache every prompt and full context of ``trace``."""
    tf = TokenFactory(trace, seed, system_prompt_len)
    seen: set[int] = set()
    for r in trace:
        seen.update(segment_keys(tf.prompt_tokens(r), segment_size))
        seen.update(segment_keys(tf.full_tokens(r), segment_size))
    return len(seen)
