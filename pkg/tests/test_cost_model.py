import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segpool.cost_model import (
    CALIBRATION_PROFILE,
    DECODE,
    PREFILL,
    HardwareProfile,
    InfeasibleLoadError,
    LatencyModel,
    PhaseCoeffs,
    RequestShape,
    cache_load,
    calibration_points,
    comm_time,
    default_segment_size,
    estimate_batch_latency,
    fit_latency_model,
    ideal_time,
    k_comp,
    kv_put_volume,
    min_segment_size,
    query_comm_volume,
)

P = CALIBRATION_PROFILE
MODEL = LatencyModel(PhaseCoeffs(2e-9, 4e-5, 1e-3), PhaseCoeffs(3e-7, 0.0, 6e-3))

shapes = st.builds(RequestShape, st.integers(0, 50_000), st.integers(0, 8192))


def test_profile_rejects_nonpositive():
    with pytest.raises(ValueError):
        HardwareProfile(d=0)


def test_shipped_profile_matches_calibration():
    assert HardwareProfile.load("a100") == CALIBRATION_PROFILE


class TestRoofline:
    def test_k_comp_memory_bound(self):
        # 4d / B_mem = 16384 / 2.039e12
        assert k_comp(P) == pytest.approx(16384 / 2.039e12, rel=1e-15)
        assert k_comp(P) == pytest.approx(8.035e-9, rel=1e-3)

    def test_k_comp_symmetry_point(self):
        # 4d/F == 4d/B_mem when F == B_mem with 2-byte elements
        prof = replace(P, flops=2.0e12, mem_bw=2.0e12)
        assert k_comp(prof) == 4 * prof.d / prof.flops == prof.vector_bytes / prof.mem_bw

    def test_k_comp_linear_in_d(self):
        assert k_comp(replace(P, d=2 * P.d)) == pytest.approx(2 * k_comp(P), rel=1e-15)

    def test_comm_time_reduces_to_zero(self):
        assert comm_time(replace(P, alpha_net=1e-300, net_bw=1e300)) < 1e-250

    def test_comm_time_anchor(self):
        assert comm_time(P) == pytest.approx(4.66e-6, rel=0.01)
        assert comm_time(P) == pytest.approx(2 * 2.3e-6 + 16384 / 400e9, rel=1e-15)

    def test_comm_time_alpha_slope(self):
        delta = 1e-6
        assert comm_time(replace(P, alpha_net=P.alpha_net + delta)) - comm_time(P) == pytest.approx(2 * delta, rel=1e-9)

    def test_min_segment_anchor(self):
        assert 560 <= min_segment_size(P) <= 585
        assert default_segment_size(P) == 640

    def test_min_segment_alpha_zero(self):
        prof = replace(P, alpha_net=1e-300)
        assert min_segment_size(prof) == pytest.approx(prof.vector_bytes / (k_comp(prof) * prof.net_bw), rel=1e-12)

    @given(st.floats(1e-7, 1e-4), st.floats(1e9, 1e12))
    def test_min_segment_monotone(self, alpha, bw):
        base = replace(P, alpha_net=alpha, net_bw=bw)
        assert min_segment_size(replace(base, alpha_net=alpha * 1.5)) > min_segment_size(base)
        assert min_segment_size(replace(base, net_bw=bw * 1.5)) < min_segment_size(base)

    @given(st.floats(1e-7, 1e-4), st.floats(1e9, 1e12), st.integers(128, 16384))
    def test_min_segment_ties_out(self, alpha, bw, d):
        prof = replace(P, alpha_net=alpha, net_bw=bw, d=d)
        lhs = k_comp(prof) * min_segment_size(prof)
        assert lhs >= comm_time(prof) * (1 - 1e-12)
        assert lhs == pytest.approx(comm_time(prof), rel=1e-12)


class TestVolumes:
    def test_query_volume(self):
        assert query_comm_volume(P, 1, 0) == 0
        assert query_comm_volume(P, 1, 1) == 16384
        assert query_comm_volume(P, 7, 3) == 7 * 3 * 16384

    def test_kv_put_volume(self):
        assert kv_put_volume(P, 1) == 16384
        assert kv_put_volume(P, 0) == 0
        assert kv_put_volume(P, 512) == 8 * 2**20

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            kv_put_volume(P, -1)
        with pytest.raises(ValueError):
            query_comm_volume(P, -1, 1)


class TestLatency:
    def test_empty_batch_floor(self):
        assert estimate_batch_latency([], 2, 0.25, MODEL) == MODEL.prefill.c / (2 * 0.75)

    def test_load_scaling(self):
        reqs = [RequestShape(1000, 200), RequestShape(0, 512)]
        assert estimate_batch_latency(reqs, 1, 0.5, MODEL) == pytest.approx(
            2 * estimate_batch_latency(reqs, 1, 0.0, MODEL), rel=1e-15
        )

    def test_formula(self):
        reqs = [RequestShape(1000, 200), RequestShape(0, 512)]
        quad = 1200 * 200 + 512 * 512
        expect = (2e-9 * quad + 4e-5 * 712 + 1e-3) / 3
        assert estimate_batch_latency(reqs, 3, 0.0, MODEL) == pytest.approx(expect, rel=1e-15)

    def test_decode_uses_one_token(self):
        reqs = [RequestShape(999, 50)]
        assert estimate_batch_latency(reqs, 1, 0.0, MODEL, DECODE) == pytest.approx(3e-7 * 1000 + 6e-3)

    def test_infeasible_load(self):
        with pytest.raises(InfeasibleLoadError):
            estimate_batch_latency([], 1, 1.0, MODEL)
        with pytest.raises(ValueError):
            estimate_batch_latency([], 0, 0.0, MODEL)

    @given(st.lists(shapes, max_size=6), st.integers(1, 8), st.floats(0, 0.98))
    def test_monotone_in_dop_and_load(self, reqs, dop, L):
        t = estimate_batch_latency(reqs, dop, L, MODEL)
        assert estimate_batch_latency(reqs, dop + 1, L, MODEL) <= t
        assert estimate_batch_latency(reqs, dop, min(L + 0.01, 0.99), MODEL) >= t

    def test_fit_round_trip(self):
        model = fit_latency_model(P, n_points=50, seed=1)
        rng = np.random.default_rng(12345)
        for phase in (PREFILL, DECODE):
            batches, times = calibration_points(P, phase, 100, rng)
            est = np.array([estimate_batch_latency(b, 1, 0.0, model, phase) for b in batches])
            assert np.max(np.abs(est - times) / times) < 0.05

    def test_fit_is_deterministic(self):
        assert fit_latency_model(P, seed=3) == fit_latency_model(P, seed=3)


class TestCacheLoad:
    def test_ideal_time(self):
        r = RequestShape(300, 700)
        assert ideal_time([], 4, P, MODEL) == 0
        assert ideal_time([r], 1, P, MODEL) == estimate_batch_latency([r], 1, 0.0, MODEL)
        reqs = [r, RequestShape(10, 20)]
        assert ideal_time(reqs, 2, P, MODEL) == pytest.approx(ideal_time(reqs, 1, P, MODEL) / 2, rel=1e-15)

    def test_empty(self):
        assert cache_load([], 8, P, 0.0) == 0.0

    def test_zero_time_rejected(self):
        with pytest.raises(ValueError):
            cache_load([RequestShape(1, 1)], 8, P, 0.0)

    def test_no_prefix_memory_branch(self):
        r = RequestShape(0, 400)
        T = 0.01
        m = 16384 * 400 * 32
        assert cache_load([r], 4, P, T) == pytest.approx(m / (m + 4 * 2.039e12 * T), rel=1e-15)

    def test_hand_evaluation(self):
        model = LatencyModel.from_profile(P)
        r = RequestShape(1000, 100)
        # T_r: (a*(1100*100) + b*100 + c) / 8
        co = model.prefill
        T_r = (co.a * 110_000 + co.b * 100 + co.c) / 8
        assert ideal_time([r], 8, P, model) == pytest.approx(T_r, rel=1e-15)
        m_r = 4 * 4096 * 1100 * 32
        f_r = 2 * 4096 * 1000 * 100 * 32
        expect = max(m_r / (m_r + 8 * 2.039e12 * T_r), f_r / (f_r + 8 * 312e12 * T_r))
        assert cache_load([r], 8, P, T_r) == pytest.approx(expect, rel=1e-14)

    @given(st.lists(shapes, min_size=1, max_size=6), st.integers(1, 16), st.floats(1e-4, 10.0))
    @settings(max_examples=200)
    def test_range_and_monotone(self, reqs, n, T_r):
        L = cache_load(reqs, n, P, T_r)
        assert 0 <= L < 1
        bigger = [RequestShape(reqs[0].prefix_len + 100, reqs[0].input_len + 10)] + reqs[1:]
        assert cache_load(bigger, n, P, T_r) >= L

    def test_pure(self):
        reqs = [RequestShape(5000, 300)] * 3
        assert cache_load(reqs, 8, P, 0.2) == cache_load(reqs, 8, P, 0.2)
