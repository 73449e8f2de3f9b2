import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segpool.workload import (
    QUESTION_LEN,
    SIGMA,
    TokenFactory,
    TraceRecord,
    TraceSchemaError,
    TraceFormatError,
    TraceSpec,
    generate,
    load,
    save,
    summarize,
)


def test_zero_rate_empty():
    assert generate(TraceSpec(rate_lambda=0.0, duration=100)) == []


def test_sigma_tail():
    from statistics import NormalDist
    import math

    mu = -SIGMA**2 / 2  # unit mean
    assert 1 - NormalDist(mu, SIGMA).cdf(math.log(2)) == pytest.approx(0.10, abs=1e-9)


def test_interarrival_mean():
    t = generate(TraceSpec("sharegpt_like", rate_lambda=2.0, max_sessions=10_000, seed=11))
    assert len(t) == 10_000
    gaps = np.diff([0.0] + [r.arrival_time for r in t])
    assert 0.48 <= gaps.mean() <= 0.52


def test_scbench_shape():
    t = generate(TraceSpec("scbench_like", rate_lambda=1.0, max_sessions=2000, seed=5))
    s = summarize(t)
    assert abs(s["mean_turns"] - 5) <= 0.2
    assert abs(s["mean_session_len"] - 227_000) <= 22_700


def test_sharegpt_bounds():
    t = generate(TraceSpec("sharegpt_like", rate_lambda=5.0, duration=100, seed=2, system_prompt_len=0))
    assert all(64 <= r.input_len <= 2400 for r in t)


def test_deterministic():
    spec = TraceSpec("mixed", rate_lambda=1.0, duration=60, seed=9)
    assert generate(spec) == generate(spec)
    assert generate(spec) != generate(TraceSpec("mixed", rate_lambda=1.0, duration=60, seed=10))


def test_mixed_cycle():
    t = generate(TraceSpec("mixed", rate_lambda=1.0, max_sessions=30, seed=1))
    first = sorted((r for r in t if r.turn_index == 0), key=lambda r: r.session_id)
    kinds = ["s" if r.shared_prefix_id is None else ("c" if r.shared_prefix_id >= 1 << 32 else "l") for r in first]
    assert kinds == ["s", "l", "c"] * 10


def test_ids_and_session_order():
    t = generate(TraceSpec("scbench_like", rate_lambda=0.5, duration=60, seed=3))
    assert [r.request_id for r in t] == list(range(len(t)))
    assert all(a.arrival_time <= b.arrival_time for a, b in zip(t, t[1:]))
    last = {}
    for r in t:
        assert r.turn_index == last.get(r.session_id, -1) + 1
        last[r.session_id] = r.turn_index


def test_round_trip(tmp_path):
    t = generate(TraceSpec("mixed", rate_lambda=1.0, duration=40, seed=4))
    p = tmp_path / "t.jsonl"
    save(t, p)
    assert load(p) == t
    first = json.loads(p.read_text().splitlines()[0])
    assert tuple(first) == ("request_id", "session_id", "turn_index", "arrival_time", "input_len", "output_len", "shared_prefix_id")


def test_empty_round_trip(tmp_path):
    save([], tmp_path / "e.jsonl")
    assert load(tmp_path / "e.jsonl") == []


def test_missing_field(tmp_path):
    rec = dict(request_id=0, session_id=0, turn_index=0, arrival_time=1.0, input_len=5, output_len=1, shared_prefix_id=None)
    bad = dict(rec)
    del bad["arrival_time"]
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps(rec) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(TraceSchemaError, match="line 2.*arrival_time"):
        load(p)


def test_malformed_line(tmp_path):
    p = tmp_path / "b.jsonl"
    p.write_text("{not json\n")
    with pytest.raises(TraceFormatError, match="line 1"):
        load(p)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**63 - 1), st.sampled_from(["loogle_like", "scbench_like", "sharegpt_like", "mixed"]))
def test_tokens_share_system_prompt_and_history(seed, preset):
    spec = TraceSpec(preset, rate_lambda=1.0, duration=20, seed=seed, length_scale=0.02, system_prompt_len=64)
    t = generate(spec)
    f = TokenFactory(t, seed, 64)
    sys_run = None
    by_turn = {(r.session_id, r.turn_index): r for r in t}
    for r in t:
        toks = f.prompt_tokens(r)
        assert len(toks) == r.input_len
        sys_run = toks[:64] if sys_run is None else sys_run
        assert np.array_equal(toks[:64], sys_run)
        if r.turn_index:
            prev = by_turn[(r.session_id, r.turn_index - 1)]
            assert np.array_equal(toks[: prev.input_len + prev.output_len], f.full_tokens(prev))


def test_shared_document_prefix():
    spec = TraceSpec("loogle_like", rate_lambda=2.0, duration=60, seed=1, n_documents=3, length_scale=0.05)
    t = generate(spec)
    f = TokenFactory(t, 1, spec.system_prompt_len)
    groups = {}
    for r in t:
        groups.setdefault(r.shared_prefix_id, []).append(r)
    a, b = next(g for g in groups.values() if len(g) >= 2)[:2]
    ta, tb = f.prompt_tokens(a), f.prompt_tokens(b)
    body = a.input_len - QUESTION_LEN
    assert a.input_len == b.input_len
    assert np.array_equal(ta[:body], tb[:body]) and not np.array_equal(ta[body:], tb[body:])


def test_spec_validation():
    with pytest.raises(ValueError):
        TraceSpec(preset="nope")
    with pytest.raises(ValueError):
        TraceSpec(rate_lambda=-1)
