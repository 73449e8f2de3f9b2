"""Communication-minimizing dispatch of (sub-)batches to instances.

Each batch node is matched to one instance; the edge weight is minus the
bytes the node would send off-instance (one vector per remote query target,
one vector per new KV segment stored remotely).  The maximum-weight perfect
matching is found with the Hungarian algorithm on integer costs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .cost_model import HardwareProfile


class InvalidPlanError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentTouch:
    """One segment in a batch's token span.

    ``query_instance`` is where a cached segment is read from; ``put_instance``
    is where a segment produced by this batch will be stored.
    """

    tokens: int
    query_instance: int | None = None
    put_instance: int | None = None


@dataclass
class Batch:
    batch_id: int
    request_ids: list
    touches: list[SegmentTouch] = field(default_factory=list)

    @property
    def tokens(self) -> int:
        return sum(t.tokens for t in self.touches)


@dataclass(frozen=True)
class BatchNode:
    batch_id: int
    request_ids: tuple
    dop_index: int
    query_set: frozenset
    put_map: Mapping[int, int]
    tokens: int = 0

    @property
    def node_id(self) -> tuple[int, int]:
        return (self.batch_id, self.dop_index)


@dataclass
class DispatchPlan:
    assignment: dict[tuple[int, int], int]
    total_volume: int  # bytes per layer

    def instance_of(self, node: BatchNode) -> int:
        return self.assignment[node.node_id]


def _node(batch: Batch, idx: int, touches: Sequence[SegmentTouch], put_touches: Sequence[SegmentTouch], tokens: int) -> BatchNode:
    q = frozenset(t.query_instance for t in touches if t.query_instance is not None)
    puts: dict[int, int] = {}
    for t in put_touches:
        if t.put_instance is not None:
            puts[t.put_instance] = puts.get(t.put_instance, 0) + 1
    return BatchNode(batch.batch_id, tuple(batch.request_ids), idx, q, puts, tokens)


def decompose(batch: Batch, dop: int, n_available: int | None = None, split_rule: str = "contiguous") -> list[BatchNode]:
    """Split a batch into ``dop`` sub-batch nodes over contiguous, balanced token shards.

    A segment contributes its query target to every shard it overlaps and its
    put to the shard holding its first token.
    """
    if dop < 1:
        raise InvalidPlanError("dop must be >= 1")
    if n_available is not None and dop > n_available:
        raise InvalidPlanError(f"dop {dop} exceeds {n_available} available instances")
    if split_rule != "contiguous":
        raise ValueError(f"unknown split rule {split_rule!r}")
    total = batch.tokens
    if dop == 1:
        return [_node(batch, 0, batch.touches, batch.touches, total)]
    bounds = [s * total // dop for s in range(dop + 1)]
    shard_q: list[list[SegmentTouch]] = [[] for _ in range(dop)]
    shard_p: list[list[SegmentTouch]] = [[] for _ in range(dop)]
    pos = 0
    s = 0
    for t in batch.touches:
        start, end = pos, pos + t.tokens
        while s < dop - 1 and bounds[s + 1] <= start:
            s += 1
        shard_p[s].append(t)
        k = s
        while k < dop and bounds[k] < end:
            if bounds[k + 1] > start:
                shard_q[k].append(t)
            k += 1
        pos = end
    return [_node(batch, i, shard_q[i], shard_p[i], bounds[i + 1] - bounds[i]) for i in range(dop)]


def edge_weight(node: BatchNode, instance: int, profile: HardwareProfile) -> int:
    unit = profile.vector_bytes
    remote_q = sum(1 for v in node.query_set if v != instance)
    remote_p = sum(c for v, c in node.put_map.items() if v != instance)
    return -(unit * remote_q + unit * remote_p)


def hungarian(cost: Sequence[Sequence[int]]) -> list[int]:
    """Minimum-cost perfect matching on a square matrix; returns column per row.

    Shortest augmenting path with potentials, O(n^3).  Works on exact ints.
    """
    n = len(cost)
    if n == 0:
        return []
    if any(len(row) != n for row in cost):
        raise ValueError("cost matrix must be square")
    inf = float("inf")
    u = [0] * (n + 1)
    v = [0] * (n + 1)
    p = [0] * (n + 1)  # p[j]: row matched to column j (1-based, 0 = free)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            row = cost[i0 - 1]
            ui0 = u[i0]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of = [0] * n
    for j in range(1, n + 1):
        if p[j]:
            col_of[p[j] - 1] = j - 1
    return col_of


def assign(nodes: Sequence[BatchNode], n_instances: int, profile: HardwareProfile) -> DispatchPlan:
    """Place every node on a distinct instance minimizing total off-instance bytes.

    Among optimal placements the lexicographically smallest instance vector
    (in node order) wins; this is encoded exactly by scaling costs and adding
    a positional tie-break term.
    """
    m = len(nodes)
    if m > n_instances:
        raise InvalidPlanError(f"{m} nodes cannot be placed on {n_instances} instances")
    if m == 0:
        return DispatchPlan({}, 0)
    n = n_instances
    base = [[-edge_weight(node, j, profile) for j in range(n)] for node in nodes]
    scale = n**n
    cost = []
    for r in range(n):
        if r < m:
            pos = n ** (m - 1 - r)
            cost.append([base[r][j] * scale + j * pos for j in range(n)])
        else:
            cost.append([0] * n)  # dummy node
    cols = hungarian(cost)
    assignment = {nodes[r].node_id: cols[r] for r in range(m)}
    total = sum(base[r][cols[r]] for r in range(m))
    return DispatchPlan(assignment, total)
