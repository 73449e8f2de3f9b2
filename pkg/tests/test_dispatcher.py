import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from segpool.cost_model import CALIBRATION_PROFILE as P
from segpool.dispatcher import (
    Batch,
    BatchNode,
    InvalidPlanError,
    SegmentTouch,
    assign,
    decompose,
    edge_weight,
    hungarian,
)

UNIT = 16384  # 4d bytes with d=4096, 2-byte elements


def node(q=(), p=None, bid=0):
    return BatchNode(bid, (bid,), 0, frozenset(q), dict(p or {}), 0)


def brute_force(nodes, n):
    """Minimum total volume over all injective placements, then the lexicographically smallest vector."""
    best = None
    for perm in itertools.permutations(range(n), len(nodes)):
        vol = sum(-edge_weight(nd, j, P) for nd, j in zip(nodes, perm))
        key = (vol, perm)
        if best is None or key < best:
            best = key
    return best


def random_nodes(rng, n):
    m = rng.randint(1, n)
    nodes = []
    for b in range(m):
        q = rng.sample(range(n), rng.randint(0, n))
        p = {v: rng.randint(1, 4) for v in rng.sample(range(n), rng.randint(0, n))}
        nodes.append(node(q, p, bid=b))
    return nodes


class TestEdgeWeight:
    def test_figure_case(self):
        # batch whose segments sit on instance 2 and whose new cache goes to instance 3
        r3 = node(q={2}, p={3: 1})
        assert edge_weight(r3, 3, P) == -1 * UNIT
        assert edge_weight(r3, 1, P) == -2 * UNIT

    def test_full_locality(self):
        assert edge_weight(node(q={5}, p={5: 3}), 5, P) == 0

    def test_term_by_term(self):
        assert edge_weight(node(q={0, 1}, p={2: 3}), 1, P) == -(1 * 16384 + 3 * 16384) == -65536

    @given(st.sets(st.integers(0, 7)), st.dictionaries(st.integers(0, 7), st.integers(0, 5)), st.integers(0, 7))
    def test_non_positive(self, q, p, v):
        assert edge_weight(node(q, p), v, P) <= 0


class TestDecompose:
    def batch(self):
        C = 640
        return Batch(7, [1], [SegmentTouch(C, query_instance=1), SegmentTouch(C, query_instance=2)])

    def test_dop_one(self):
        b = Batch(3, [1, 2], [SegmentTouch(10, 4, None), SegmentTouch(5, None, 6), SegmentTouch(5, None, 6)])
        (nd,) = decompose(b, 1)
        assert nd.query_set == {4} and nd.put_map == {6: 2} and nd.tokens == 20 and nd.request_ids == (1, 2)

    def test_split_by_hand(self):
        n0, n1 = decompose(self.batch(), 2)
        assert n0.query_set == {1} and n1.query_set == {2}
        assert n0.tokens == n1.tokens == 640

    def test_too_many(self):
        with pytest.raises(InvalidPlanError):
            decompose(self.batch(), 3, n_available=2)
        with pytest.raises(InvalidPlanError):
            decompose(self.batch(), 0)

    @given(st.lists(st.tuples(st.integers(1, 50), st.none() | st.integers(0, 5), st.none() | st.integers(0, 5)), min_size=1, max_size=12),
           st.integers(1, 8))
    def test_partition_property(self, touches, dop):
        b = Batch(0, [0], [SegmentTouch(*t) for t in touches])
        parts = decompose(b, dop)
        (whole,) = decompose(b, 1)
        assert len(parts) == dop
        assert frozenset().union(*(p.query_set for p in parts)) == whole.query_set
        merged: dict[int, int] = {}
        for p in parts:
            for k, c in p.put_map.items():
                merged[k] = merged.get(k, 0) + c
        assert merged == whole.put_map
        sizes = [p.tokens for p in parts]
        assert sum(sizes) == b.tokens and max(sizes) - min(sizes) <= 1


class TestAssign:
    def test_single(self):
        plan = assign([node(q={0})], 1, P)
        assert plan.assignment == {(0, 0): 0} and plan.total_volume == 0

    def test_forced_optimum(self):
        a, b = node(q={2}, p={2: 1}, bid=0), node(q={0}, bid=1)
        plan = assign([a, b], 3, P)
        assert plan.instance_of(a) == 2 and plan.instance_of(b) == 0 and plan.total_volume == 0

    def test_too_many_nodes(self):
        with pytest.raises(InvalidPlanError):
            assign([node(bid=i) for i in range(3)], 2, P)

    def test_uncontested_locality(self):
        nodes = [node(q={3}, p={3: 2}, bid=0), node(q=set(), bid=1)]
        assert assign(nodes, 4, P).instance_of(nodes[0]) == 3

    def test_empty(self):
        assert assign([], 4, P).total_volume == 0

    def test_matches_brute_force(self):
        rng = random.Random(2024)
        for _ in range(300):
            n = rng.randint(1, 5)
            nodes = random_nodes(rng, n)
            plan = assign(nodes, n, P)
            vol, perm = brute_force(nodes, n)
            assert plan.total_volume == vol
            assert tuple(plan.instance_of(nd) for nd in nodes) == perm
            assert sum(-edge_weight(nd, plan.instance_of(nd), P) for nd in nodes) == plan.total_volume

    def test_deterministic(self):
        rng = random.Random(5)
        nodes = random_nodes(rng, 6)
        assert assign(nodes, 6, P) == assign(nodes, 6, P)


def test_hungarian_small():
    cost = [[4, 1, 3], [2, 0, 5], [3, 2, 2]]
    cols = hungarian(cost)
    assert sorted(cols) == [0, 1, 2]
    best = min(sum(cost[i][p[i]] for i in range(3)) for p in itertools.permutations(range(3)))
    assert sum(cost[i][cols[i]] for i in range(3)) == best


def test_dummy_padding_preserves_cost():
    rng = random.Random(9)
    for _ in range(50):
        nodes = random_nodes(rng, 4)[:2]
        small = assign(nodes, 4, P).total_volume
        assert small == brute_force(nodes, 4)[0]
