"""Global segment-level prefix tree with hash placement, heavy-hitter
replication, power-of-two-choices replica selection and global LRU eviction.

Segment keys are 64-bit FNV-1a hashes of the token byte stream (each token a
little-endian uint32) from the root through the segment's last token.
FNV-1a is streaming, so a segment's key is also the hash state from which
its children are hashed.
"""

from __future__ import annotations

import heapq
import math
import random
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numba
import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class AdmissionError(RuntimeError):
    """Capacity exhausted even after eviction (everything left is pinned)."""


class EvictionError(RuntimeError):
    """Eviction could not free the requested number of slots."""

    def __init__(self, msg: str, evicted: list[tuple[int, int]]):
        super().__init__(msg)
        self.evicted = evicted


# -- hashing ------------------------------------------------------------------


@numba.njit(cache=True)
def _fnv_chain(tokens, seg_size, offset):
    n = tokens.shape[0]
    n_seg = (n + seg_size - 1) // seg_size
    out = np.empty(n_seg, dtype=np.uint64)
    prime = np.uint64(0x100000001B3)
    state = np.uint64(offset)
    for s in range(n_seg):
        end = min(n, (s + 1) * seg_size)
        for i in range(s * seg_size, end):
            t = tokens[i]
            state ^= np.uint64(t & 0xFF)
            state *= prime
            state ^= np.uint64((t >> 8) & 0xFF)
            state *= prime
            state ^= np.uint64((t >> 16) & 0xFF)
            state *= prime
            state ^= np.uint64((t >> 24) & 0xFF)
            state *= prime
        out[s] = state
    return out


@numba.njit(cache=True)
def _fnv_running(tokens, state):
    out = np.empty(tokens.shape[0], dtype=np.uint64)
    prime = np.uint64(0x100000001B3)
    for i in range(tokens.shape[0]):
        t = tokens[i]
        state ^= np.uint64(t & 0xFF)
        state *= prime
        state ^= np.uint64((t >> 8) & 0xFF)
        state *= prime
        state ^= np.uint64((t >> 16) & 0xFF)
        state *= prime
        state ^= np.uint64((t >> 24) & 0xFF)
        state *= prime
        out[i] = state
    return out


def as_tokens(tokens: Sequence[int] | np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(tokens, dtype=np.uint32)


def fnv1a_64(data: bytes, state: int = FNV_OFFSET) -> int:
    """Byte-at-a-time FNV-1a; slow, used for short inputs and cross-checks."""
    for byte in data:
        state = ((state ^ byte) * FNV_PRIME) & _MASK64
    return state


def segment_keys(tokens: Sequence[int] | np.ndarray, segment_size: int) -> list[int]:
    """Chain keys of every segment of ``tokens`` (the last one may be partial)."""
    arr = as_tokens(tokens)
    if arr.size == 0:
        return []
    return _fnv_chain(arr, segment_size, np.uint64(FNV_OFFSET)).tolist()


def home_instance(key: int, n: int) -> int:
    """Hash placement: ``floor(key * n / 2**64)``.

    Uses the high bits of the key; FNV-1a's low bits are poorly mixed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    return (key * n) >> 64


# -- state --------------------------------------------------------------------


@dataclass
class Segment:
    key: int
    parent: int | None
    depth: int
    token_count: int
    partial: bool = False
    access_count: int = 0
    last_access: int = 0
    # instance -> last access time of that replica
    replicas: dict[int, int] = field(default_factory=dict)
    heavy: bool = False


@dataclass
class GlobalPrefixTree:
    segment_size: int
    nodes: dict[int, Segment] = field(default_factory=dict)
    children: dict[int, set[int]] = field(default_factory=dict)
    root_children: set[int] = field(default_factory=set)
    # parent (None for root) -> token_count -> partial segment keys
    partials: dict[int | None, dict[int, set[int]]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.segment_size < 1:
            raise ValueError("segment_size must be >= 1")

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, key: int) -> bool:
        return key in self.nodes

    def kids(self, key: int | None) -> set[int]:
        if key is None:
            return self.root_children
        return self.children.get(key, _EMPTY)

    def add(self, seg: Segment) -> None:
        self.nodes[seg.key] = seg
        if seg.parent is None:
            self.root_children.add(seg.key)
        else:
            self.children.setdefault(seg.parent, set()).add(seg.key)
        if seg.partial:
            self.partials.setdefault(seg.parent, {}).setdefault(seg.token_count, set()).add(seg.key)

    def remove(self, key: int) -> Segment:
        seg = self.nodes.pop(key)
        if seg.parent is None:
            self.root_children.discard(key)
        else:
            sibs = self.children.get(seg.parent)
            if sibs is not None:
                sibs.discard(key)
                if not sibs:
                    del self.children[seg.parent]
        if seg.partial:
            by_len = self.partials[seg.parent]
            by_len[seg.token_count].discard(key)
            if not by_len[seg.token_count]:
                del by_len[seg.token_count]
            if not by_len:
                del self.partials[seg.parent]
        self.children.pop(key, None)
        return seg

    def subtree(self, key: int) -> list[int]:
        """Strict descendants of ``key``, deepest first."""
        out = []
        frontier = list(self.kids(key))
        while frontier:
            out.extend(frontier)
            nxt = []
            for k in frontier:
                nxt.extend(self.kids(k))
            frontier = nxt
        out.reverse()
        return out

    def chain_to(self, key: int) -> list[int]:
        chain = []
        cur: int | None = key
        while cur is not None:
            chain.append(cur)
            cur = self.nodes[cur].parent
        chain.reverse()
        return chain


_EMPTY: frozenset = frozenset()


@dataclass
class InstanceDirectory:
    n_instances: int
    slot_capacity: int
    half_life: float = 32.0
    stored: list[set[int]] = field(default_factory=list)
    access_load: np.ndarray = field(default=None)  # type: ignore[assignment]
    pinned: Counter = field(default_factory=Counter)
    pinned_per_instance: list[int] = field(default_factory=list)
    _lru: list[list[tuple[int, int]]] = field(default_factory=list, repr=False)
    removed: int = 0  # replicas dropped so far (evictions)

    def __post_init__(self) -> None:
        if self.n_instances < 1 or self.slot_capacity < 1:
            raise ValueError("n_instances and slot_capacity must be >= 1")
        n = self.n_instances
        if not self.stored:
            self.stored = [set() for _ in range(n)]
        if self.access_load is None:
            self.access_load = np.zeros(n)
        if not self.pinned_per_instance:
            self.pinned_per_instance = [0] * n
        if not self._lru:
            self._lru = [[] for _ in range(n)]

    def free_slots(self, i: int) -> int:
        return self.slot_capacity - len(self.stored[i])

    def decay(self, iterations: int = 1) -> None:
        self.access_load *= 0.5 ** (iterations / self.half_life)

    def is_overloaded(self, delta: float) -> np.ndarray:
        mean = self.access_load.mean()
        return self.access_load > (1 + delta) * mean

    # replica bookkeeping keeps tree, stored sets, pins and LRU heaps in sync
    def add_replica(self, seg: Segment, i: int, now: int) -> None:
        if i in seg.replicas:
            return
        if len(self.stored[i]) >= self.slot_capacity:
            raise AdmissionError(f"instance {i} is full")
        seg.replicas[i] = now
        self.stored[i].add(seg.key)
        if self.pinned[seg.key]:
            self.pinned_per_instance[i] += 1
        heap = self._lru[i]
        heapq.heappush(heap, (now, seg.key))
        if len(heap) > 4 * len(self.stored[i]) + 64:
            self._compact(i)

    def remove_replica(self, seg: Segment, i: int) -> None:
        del seg.replicas[i]
        self.removed += 1
        self.stored[i].discard(seg.key)
        if self.pinned[seg.key]:
            self.pinned_per_instance[i] -= 1
        if len(seg.replicas) <= 1:
            seg.heavy = False

    def _compact(self, i: int) -> None:
        # Rebuilt entries may be lower bounds of the true replica times; eviction re-checks.
        heap = self._lru[i]
        latest: dict[int, int] = {}
        for t, k in heap:
            if k in self.stored[i] and t > latest.get(k, -1):
                latest[k] = t
        self._lru[i] = [(t, k) for k, t in latest.items()]
        heapq.heapify(self._lru[i])

    def pin(self, tree: GlobalPrefixTree, keys: Iterable[int]) -> None:
        for k in keys:
            self.pinned[k] += 1
            if self.pinned[k] == 1:
                for i in tree.nodes[k].replicas:
                    self.pinned_per_instance[i] += 1

    def unpin(self, tree: GlobalPrefixTree, keys: Iterable[int]) -> None:
        for k in keys:
            c = self.pinned[k]
            if c <= 0:
                raise ValueError(f"segment {k:#x} is not pinned")
            if c == 1:
                del self.pinned[k]
                seg = tree.nodes.get(k)
                if seg is not None:
                    for i in seg.replicas:
                        self.pinned_per_instance[i] -= 1
            else:
                self.pinned[k] = c - 1

    def is_pinned(self, key: int) -> bool:
        return self.pinned[key] > 0


@dataclass(frozen=True)
class ReplicationAction:
    key: int
    from_instance: int
    to_instance: int | None  # None: skipped, no eligible target

    @property
    def skipped(self) -> bool:
        return self.to_instance is None


# -- operations ---------------------------------------------------------------


def _chain_spec(tokens: np.ndarray, seg_size: int, keys: Sequence[int] | None):
    if keys is None:
        keys = segment_keys(tokens, seg_size)
    n = len(tokens)
    counts = [seg_size] * (n // seg_size)
    if n % seg_size:
        counts.append(n % seg_size)
    return keys, counts


def heavy_budget(n: int, constant: float = 1.0) -> int:
    """ceil(c * N * ln N) heavy-hitter keys for N instances (0 for a single instance)."""
    return math.ceil(constant * n * math.log(n)) if n > 1 else 0


def insert_prefix(
    tree: GlobalPrefixTree,
    directory: InstanceDirectory,
    tokens: Sequence[int] | np.ndarray,
    now: int,
    *,
    keys: Sequence[int] | None = None,
    place: Callable[[Segment], int] | None = None,
    placed: list[tuple[int, int]] | None = None,
) -> list[int]:
    """Store ``tokens`` as a deduplicated segment chain and return its keys root to tail.

    New segments go to ``place(seg)`` (default: their hash home instance).  When
    ``placed`` is given, ``(key, instance)`` is appended for every new segment.
    """
    arr = as_tokens(tokens)
    if arr.size == 0:
        raise ValueError("tokens must be non-empty")
    C = tree.segment_size
    keys, counts = _chain_spec(arr, C, keys)
    chain: list[int] = []
    parent: int | None = None
    try:
        for depth, (key, count) in enumerate(zip(keys, counts)):
            seg = tree.nodes.get(key)
            if seg is None:
                seg = Segment(key, parent, depth, count, partial=count < C, last_access=now)
                inst = place(seg) if place is not None else home_instance(key, directory.n_instances)
                if directory.free_slots(inst) <= 0:
                    try:
                        evict(tree, directory, inst, 1)
                    except EvictionError as exc:
                        raise AdmissionError(f"no evictable slot on instance {inst}") from exc
                tree.add(seg)
                directory.add_replica(seg, inst, now)
                if placed is not None:
                    placed.append((key, inst))
            else:
                seg.last_access = max(seg.last_access, now)
                for i in seg.replicas:
                    seg.replicas[i] = max(seg.replicas[i], now)
            # hold the chain so eviction for a later segment cannot cut it
            directory.pin(tree, (key,))
            chain.append(key)
            parent = key
    finally:
        directory.unpin(tree, chain)
    return chain


def match_prefix(
    tree: GlobalPrefixTree,
    tokens: Sequence[int] | np.ndarray,
    *,
    keys: Sequence[int] | None = None,
) -> tuple[list[int], int]:
    """Longest cached segment chain whose tokens prefix ``tokens``."""
    arr = as_tokens(tokens)
    n = arr.size
    if n == 0:
        return [], 0
    C = tree.segment_size
    if keys is None:
        keys = segment_keys(arr, C)
    chain: list[int] = []
    hit = 0
    parent: int | None = None
    nodes = tree.nodes
    for s in range(n // C):
        seg = nodes.get(keys[s])
        if seg is None or seg.partial or seg.parent != parent:
            break
        chain.append(seg.key)
        hit += C
        parent = seg.key
    by_len = tree.partials.get(parent)
    if by_len:
        remaining = min(n - hit, C - 1)
        lengths = [ln for ln in by_len if ln <= remaining]
        if lengths:
            state = FNV_OFFSET if parent is None else parent
            running = _fnv_running(arr[hit : hit + max(lengths)], np.uint64(state))
            for ln in sorted(lengths, reverse=True):
                k = int(running[ln - 1])
                if k in by_len[ln]:
                    chain.append(k)
                    hit += ln
                    break
    return chain, hit


def find_heavy_hitters(tree: GlobalPrefixTree, budget: int) -> list[int]:
    """Top ``budget`` full segments by access count (ties: smaller key), found by pruned BFS.

    A node whose count is below the current k-th best is not expanded: access
    counts never increase going down a root path.
    """
    if budget <= 0:
        return []
    heap: list[tuple[int, int]] = []  # (count, -key); heap[0] is the current k-th best
    nodes = tree.nodes
    # the selection depends only on (count, key), so visiting order is free
    queue = deque(tree.root_children)
    while queue:
        key = queue.popleft()
        seg = nodes[key]
        cnt = seg.access_count
        if len(heap) == budget and cnt < heap[0][0]:
            continue
        if not seg.partial:
            item = (cnt, -key)
            if len(heap) < budget:
                heapq.heappush(heap, item)
            elif item > heap[0]:
                heapq.heapreplace(heap, item)
        kids = tree.children.get(key)
        if kids:
            queue.extend(kids)
    heap.sort(key=lambda t: (-t[0], -t[1]))
    return [-nk for _, nk in heap]


def rebalance(
    tree: GlobalPrefixTree,
    directory: InstanceDirectory,
    now: int,
    *,
    delta: float = 0.2,
    budget: int | None = None,
) -> list[ReplicationAction]:
    """Replicate heavy hitters held by overloaded instances onto the least-loaded instances without a copy."""
    n = directory.n_instances
    loads = directory.access_load
    if n < 2 or loads.mean() <= 0:
        return []
    overloaded = np.flatnonzero(directory.is_overloaded(delta)).tolist()
    if not overloaded:
        return []
    if budget is None:
        budget = heavy_budget(n)
    heavy = find_heavy_hitters(tree, budget)
    actions: list[ReplicationAction] = []
    done: set[int] = set()
    for src in overloaded:
        for key in heavy:
            if key in done:
                continue
            seg = tree.nodes.get(key)
            if seg is None or src not in seg.replicas:
                continue
            done.add(key)
            targets = sorted((j for j in range(n) if j not in seg.replicas), key=lambda j: (loads[j], j))
            dst = None
            for j in targets:
                if directory.free_slots(j) <= 0:
                    directory.pin(tree, (key,))
                    try:
                        evict(tree, directory, j, 1)
                    except EvictionError:
                        continue
                    finally:
                        directory.unpin(tree, (key,))
                directory.add_replica(seg, j, now)
                seg.heavy = True
                dst = j
                break
            actions.append(ReplicationAction(key, src, dst))
    return actions


def select_replica(segment: Segment, directory: InstanceDirectory, rng: random.Random, now: int) -> int:
    """Power of two choices over the segment's replicas; records the access."""
    reps = segment.replicas
    if not reps:
        raise ValueError("segment has no replicas")
    if len(reps) == 1:
        choice = next(iter(reps))
    else:
        ordered = sorted(reps)
        a, b = rng.sample(ordered, 2)
        la, lb = directory.access_load[a], directory.access_load[b]
        choice = a if (la, a) < (lb, b) else b
    directory.access_load[choice] += 1
    segment.access_count += 1
    segment.last_access = now
    reps[choice] = now
    return choice


def touch_chain(
    tree: GlobalPrefixTree,
    directory: InstanceDirectory,
    keys: Iterable[int],
    rng: random.Random,
    now: int,
    counts: np.ndarray | None = None,
) -> list[int]:
    """select_replica over every cached key of a chain; returns the chosen instance per key.

    Keys no longer cached are skipped.  ``counts`` (per instance) is
    incremented in place when given.
    """
    nodes = tree.nodes
    loads = directory.access_load
    chosen = []
    for k in keys:
        seg = nodes.get(k)
        if seg is None:
            continue
        reps = seg.replicas
        if len(reps) == 1:
            # fast path of select_replica
            for i in reps:
                break
            loads[i] += 1
            seg.access_count += 1
            seg.last_access = now
            reps[i] = now
        else:
            i = select_replica(seg, directory, rng, now)
        chosen.append(i)
        if counts is not None:
            counts[i] += 1
    return chosen


def evict(tree: GlobalPrefixTree, directory: InstanceDirectory, instance: int, demand: int) -> list[tuple[int, int]]:
    """Free at least ``demand`` slots on ``instance`` in ascending replica last-access order.

    The last copy of a segment with cached descendants goes only together
    with its whole cached subtree (deepest first); pinned segments, and last
    copies whose subtree holds a pinned segment, are skipped.
    Returns every removed ``(key, instance)`` replica.
    """
    if demand < 0:
        raise ValueError("demand must be >= 0")
    evicted: list[tuple[int, int]] = []
    if demand == 0:
        return evicted
    heap = directory._lru[instance]
    stored = directory.stored[instance]
    nodes = tree.nodes
    held: list[tuple[int, int]] = []
    freed = 0
    while freed < demand and heap:
        t, key = heapq.heappop(heap)
        if key not in stored:
            continue
        seg = nodes[key]
        actual = seg.replicas[instance]
        if actual != t:
            heapq.heappush(heap, (actual, key))
            continue
        if directory.pinned[key]:
            held.append((t, key))
            continue
        if len(seg.replicas) > 1:
            directory.remove_replica(seg, instance)
            evicted.append((key, instance))
            freed += 1
            continue
        sub = tree.subtree(key)
        if any(directory.pinned[k] for k in sub):
            held.append((t, key))
            continue
        for k in (*sub, key):
            s = nodes[k]
            for i in list(s.replicas):
                directory.remove_replica(s, i)
                evicted.append((k, i))
                if i == instance:
                    freed += 1
            tree.remove(k)
    for item in held:
        heapq.heappush(heap, item)
    if freed < demand:
        raise EvictionError(f"freed {freed} of {demand} slots on instance {instance}", evicted)
    return evicted


def check_invariants(tree: GlobalPrefixTree, directory: InstanceDirectory) -> list[str]:
    """Return human-readable violations of the pool invariants (empty when healthy)."""
    problems = []
    C = tree.segment_size
    nodes = tree.nodes
    stored = directory.stored
    for i, keys in enumerate(stored):
        if len(keys) > directory.slot_capacity:
            problems.append(f"instance {i} holds {len(keys)} > {directory.slot_capacity} segments")
        for k in keys:
            seg = nodes.get(k)
            if seg is None or i not in seg.replicas:
                problems.append(f"instance {i} lists {k:#x} without a matching replica")
    for k, seg in nodes.items():
        reps = seg.replicas
        n = seg.token_count
        parent = seg.parent
        par = nodes.get(parent) if parent is not None else None
        # fast path for a healthy node; the slow checks below name the problem
        if (reps and (seg.heavy or len(reps) == 1) and 0 < n <= C and seg.partial == (n < C)
                and (par.depth + 1 == seg.depth and not par.partial if par is not None
                     else parent is None and seg.depth == 0)
                and all(k in stored[i] for i in reps)):
            continue
        if not reps:
            problems.append(f"{k:#x} has no replicas")
        if not seg.heavy and len(reps) != 1:
            problems.append(f"non-heavy {k:#x} has {len(reps)} replicas")
        if not 0 < n <= C or seg.partial != (n < C):
            problems.append(f"{k:#x} has bad token_count {n}")
        if parent is not None:
            if par is None:
                problems.append(f"{k:#x} has missing parent")
            elif par.depth + 1 != seg.depth:
                problems.append(f"{k:#x} depth {seg.depth} != parent depth + 1")
            elif par.partial:
                problems.append(f"{k:#x} hangs under a partial segment")
        elif seg.depth != 0:
            problems.append(f"root child {k:#x} has depth {seg.depth}")
        for i in reps:
            if k not in stored[i]:
                problems.append(f"{k:#x} replica on {i} missing from directory")
    for k, c in directory.pinned.items():
        if c > 0 and k not in nodes:
            problems.append(f"pinned {k:#x} is not cached")
    return problems
