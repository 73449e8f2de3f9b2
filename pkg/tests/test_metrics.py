import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from segpool.metrics import (
    CSV_COLUMNS,
    MetricsReport,
    RequestMetrics,
    UndefinedMetricError,
    access_cv,
    cv_of,
    hit_rate,
    p90_goodput,
    slo_attainment,
    to_csv,
    write_outputs,
)


def report(rows, times=None, n=None):
    rows = np.asarray(rows, dtype=np.int64)
    n = n or rows.shape[1]
    t = np.arange(len(rows), dtype=float) * 10 if times is None else np.asarray(times, dtype=float)
    return MetricsReport(n, access_times=t, access_counts=rows)


def req(rid, ttft, ref, tbt=(), tbt_ref=()):
    return RequestMetrics(rid, rid, 100, len(tbt), 0.0, 0, ttft, ref, list(tbt), list(tbt_ref))


def test_hit_rate_basic():
    r = MetricsReport(2, hit_tokens=0, cacheable_tokens=100)
    assert hit_rate(r) == 0
    r.hit_tokens = 40
    assert hit_rate(r) == 0.4
    with pytest.raises(UndefinedMetricError):
        hit_rate(MetricsReport(2))


def test_cv_equal_and_all_on_one():
    assert access_cv(report([[5, 5, 5, 5]]))[1] == 0
    for n in (2, 3, 8):
        row = [0] * n
        row[1] = 7
        assert access_cv(report([row]))[1] == pytest.approx(math.sqrt(n - 1))


def test_cv_zero_window():
    assert cv_of([0, 0, 0]) == 0.0


@given(st.lists(st.integers(0, 1000), min_size=2, max_size=8), st.integers(1, 50))
def test_cv_scale_invariant(row, k):
    assert cv_of(np.array(row) * k) == pytest.approx(cv_of(row))


def test_cv_windows_aggregate():
    # two iterations in the same 10 s window add up before the CV is taken
    r = report([[4, 0], [0, 4]], times=[1.0, 2.0])
    cvs, mean = access_cv(r, window=10.0)
    assert cvs == [0.0] and mean == 0.0
    assert access_cv(r, window=1.0)[0] == [1.0, 1.0]


def test_slo_attainment():
    r = MetricsReport(2, requests=[req(0, 1.0, 1.0, [0.1], [0.1]), req(1, 1.0, 1.0, [0.1], [0.1])])
    assert slo_attainment(r) == 1.0
    r.requests[1].tbt = [2.0]
    assert slo_attainment(r) == 0.5
    assert slo_attainment(r) == slo_attainment(r)
    with pytest.raises(UndefinedMetricError):
        slo_attainment(MetricsReport(2))


def test_dropped_counts_as_miss():
    m = req(0, 1.0, 1.0)
    m.dropped = True
    assert slo_attainment(MetricsReport(1, requests=[m])) == 0.0


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_goodput_bisection_equals_linear_scan(values):
    att = sorted(values, reverse=True)  # non-increasing in rate
    rates = [float(i + 1) for i in range(len(att))]
    fn = dict(zip(rates, att)).__getitem__
    linear = max((r for r, a in zip(rates, att) if a >= 0.9), default=0.0)
    assert p90_goodput(fn, rates) == linear


def test_goodput_rejects_unsorted():
    with pytest.raises(ValueError):
        p90_goodput(lambda r: 1.0, [2.0, 1.0])


def test_csv_layout(tmp_path):
    r = report([[1, 2], [3, 4]])
    r.hit_tokens, r.cacheable_tokens = 1, 2
    r.requests = [req(0, 0.5, 0.1, [0.01], [0.01])]
    text = to_csv(r)
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert "hit_rate,cluster,,0.5" in lines
    assert text == to_csv(r)
    assert to_csv(r, extra={"slot_capacity": 8}).splitlines()[0] == "slot_capacity," + ",".join(CSV_COLUMNS)
    csv_path, sum_path = write_outputs(r, tmp_path / "o")
    assert csv_path.read_text() == text and sum_path.exists()
