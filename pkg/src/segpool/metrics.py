"""Evaluation metrics over simulation reports, plus CSV and JSON emission."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DEFAULT_CV_WINDOW = 10.0  # simulated seconds
DEFAULT_SLO_MULTIPLIER = 10.0
CSV_COLUMNS = ("metric", "scope", "window_start", "value")


class UndefinedMetricError(ValueError):
    pass


@dataclass
class RequestMetrics:
    request_id: int
    session_id: int
    input_len: int
    output_len: int
    arrival: float
    hit_tokens: int = 0
    ttft: float = math.nan
    ttft_ref: float = math.nan  # batch-size-1 processing time of the whole prompt
    tbt: list[float] = field(default_factory=list)
    tbt_ref: list[float] = field(default_factory=list)
    dropped: bool = False
    recompute_tokens: int = 0


@dataclass
class MetricsReport:
    n_instances: int
    policy: str = ""
    requests: list[RequestMetrics] = field(default_factory=list)
    # rows: iterations with any cache access; access_counts[r, i] is instance i's count
    access_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    access_counts: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    hit_tokens: int = 0
    cacheable_tokens: int = 0
    comm_bytes: int = 0
    recompute_tokens: int = 0
    drops: int = 0
    evictions: int = 0
    replications: int = 0
    iterations: int = 0
    sim_time: float = 0.0
    busy_time: float = 0.0
    max_heavy_keys: int = 0
    heavy_budget: int = 0
    invariant_violations: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.access_counts.size == 0:
            self.access_counts = np.zeros((0, self.n_instances), dtype=np.int64)

    @property
    def completed(self) -> list[RequestMetrics]:
        return [r for r in self.requests if not r.dropped]


def hit_rate(report: MetricsReport) -> float:
    if report.cacheable_tokens <= 0:
        raise UndefinedMetricError("no cacheable tokens")
    return report.hit_tokens / report.cacheable_tokens


def windowed_counts(report: MetricsReport, window: float = DEFAULT_CV_WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """(window start times, per-window per-instance access totals), non-empty windows only."""
    if window <= 0:
        raise ValueError("window must be > 0")
    if len(report.access_times) == 0:
        return np.zeros(0), np.zeros((0, report.n_instances))
    idx = np.floor(report.access_times / window).astype(np.int64)
    wins, inv = np.unique(idx, return_inverse=True)
    totals = np.zeros((len(wins), report.n_instances))
    np.add.at(totals, inv, report.access_counts)
    return wins * window, totals


def cv_of(counts: np.ndarray) -> float:
    """Population coefficient of variation of one window (0 when nothing was accessed)."""
    counts = np.asarray(counts, dtype=float)
    mean = counts.mean()
    return 0.0 if mean == 0 else float(counts.std() / mean)


def access_cv(report: MetricsReport, window: float = DEFAULT_CV_WINDOW) -> tuple[list[float], float]:
    """Per-window CV of instance access counts and their mean."""
    if report.n_instances < 2:
        raise ValueError("CV needs at least two instances")
    _, totals = windowed_counts(report, window)
    cvs = [cv_of(row) for row in totals]
    return cvs, float(np.mean(cvs)) if cvs else 0.0


def request_meets_slo(r: RequestMetrics, multiplier: float = DEFAULT_SLO_MULTIPLIER) -> bool:
    if r.dropped or math.isnan(r.ttft):
        return False
    # input-token latency is ttft / input_len on both sides, so the length cancels
    if r.ttft > multiplier * r.ttft_ref:
        return False
    return all(t <= multiplier * ref for t, ref in zip(r.tbt, r.tbt_ref))


def slo_attainment(report: MetricsReport, multiplier: float = DEFAULT_SLO_MULTIPLIER) -> float:
    if not report.requests:
        raise UndefinedMetricError("empty report")
    met = sum(request_meets_slo(r, multiplier) for r in report.requests)
    return met / len(report.requests)


def p90_goodput(run_fn: Callable[[float], float], rates: Sequence[float], target: float = 0.9) -> float:
    """Largest rate whose attainment (``run_fn(rate)``) reaches ``target``; 0 if none.

    Bisection over the ascending rate list, assuming attainment is
    non-increasing in rate.
    """
    rates = list(rates)
    if any(b < a for a, b in zip(rates, rates[1:])):
        raise ValueError("rates must be ascending")
    lo, hi = -1, len(rates)  # rates[lo] passes, rates[hi] fails
    cache: dict[int, float] = {}

    def ok(k: int) -> bool:
        if k not in cache:
            cache[k] = run_fn(rates[k])
        return cache[k] >= target

    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return rates[lo] if lo >= 0 else 0.0


# -- serialization ----------------------------------------------------------------


def summary(report: MetricsReport, window: float = DEFAULT_CV_WINDOW, multiplier: float = DEFAULT_SLO_MULTIPLIER) -> dict:
    done = report.completed
    out = {
        "policy": report.policy,
        "n_instances": report.n_instances,
        "requests": len(report.requests),
        "completed": len(done),
        "drops": report.drops,
        "hit_rate": hit_rate(report) if report.cacheable_tokens else None,
        "mean_access_cv": access_cv(report, window)[1] if report.n_instances > 1 else None,
        "slo_attainment": slo_attainment(report, multiplier) if report.requests else None,
        "mean_ttft": float(np.mean([r.ttft for r in done])) if done else None,
        "comm_bytes": report.comm_bytes,
        "recompute_tokens": report.recompute_tokens,
        "evictions": report.evictions,
        "replications": report.replications,
        "iterations": report.iterations,
        "sim_time": report.sim_time,
        "max_heavy_keys": report.max_heavy_keys,
        "heavy_budget": report.heavy_budget,
        "invariant_violations": len(report.invariant_violations),
    }
    return out


def csv_rows(report: MetricsReport, window: float = DEFAULT_CV_WINDOW, multiplier: float = DEFAULT_SLO_MULTIPLIER) -> list[tuple]:
    """Rows of (metric, scope, window_start, value); ``window_start`` is empty for totals."""
    rows: list[tuple] = []
    for key, val in summary(report, window, multiplier).items():
        if isinstance(val, (int, float)) and not isinstance(val, bool):
            rows.append((key, "cluster", "", val))
    starts, totals = windowed_counts(report, window)
    for t0, row in zip(starts, totals):
        rows.append(("access_cv", "cluster", t0, cv_of(row)))
        for i, c in enumerate(row):
            rows.append(("accesses", f"instance{i}", t0, int(c)))
    for r in report.requests:
        scope = f"request{r.request_id}"
        rows.append(("hit_tokens", scope, "", r.hit_tokens))
        if not r.dropped:
            rows.append(("ttft", scope, "", r.ttft))
            rows.append(("input_token_latency", scope, "", r.ttft / r.input_len if r.input_len else 0.0))
            rows.append(("mean_tbt", scope, "", float(np.mean(r.tbt)) if r.tbt else 0.0))
        rows.append(("slo_met", scope, "", int(request_meets_slo(r, multiplier))))
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_csv(report: MetricsReport, window: float = DEFAULT_CV_WINDOW, multiplier: float = DEFAULT_SLO_MULTIPLIER,
           extra: dict | None = None) -> str:
    """CSV text; ``extra`` columns (e.g. a sweep key) are prepended to every row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    extra = extra or {}
    w.writerow([*extra, *CSV_COLUMNS])
    for row in csv_rows(report, window, multiplier):
        w.writerow([*(_fmt(v) for v in extra.values()), *(_fmt(v) for v in row)])
    return buf.getvalue()


def write_outputs(report: MetricsReport, out_dir: str | Path, window: float = DEFAULT_CV_WINDOW,
                  multiplier: float = DEFAULT_SLO_MULTIPLIER) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    csv_path.write_text(to_csv(report, window, multiplier), encoding="utf-8")
    sum_path = out / "summary.json"
    sum_path.write_text(json.dumps(summary(report, window, multiplier), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, sum_path


def report_to_dict(report: MetricsReport) -> dict:
    d = asdict(report)
    d["access_times"] = report.access_times.tolist()
    d["access_counts"] = report.access_counts.tolist()
    return d
