"""Command line front door: ``segpool gen-trace | run | sweep | validate``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import metrics, sim, workload
from .config import OUT_ENV, ConfigValidationError, ExperimentConfig, load_trace_spec


def _fail(msg: str, code: int = 2) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _out_dir(args, cfg: ExperimentConfig | None) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return cfg.resolve(cfg.output_dir) if cfg is not None else Path("out")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "trace", None):
        cfg.trace.path = str(Path(args.trace).resolve())
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def cmd_gen_trace(args) -> int:
    try:
        spec = load_trace_spec(args.config)
        if args.seed is not None:
            spec.seed = args.seed
    except (OSError, ConfigValidationError) as e:
        return _fail(str(e))
    out = Path(args.out)
    trace = workload.generate(spec)
    try:
        workload.save(trace, out)
    except OSError as e:
        return _fail(f"cannot write {out}: {e.strerror or e}")
    s = workload.summarize(trace)
    print(f"wrote {s['records']} records to {out}")
    for k, v in s.items():
        if k != "records":
            print(f"  {k}: {v:.4g}" if isinstance(v, float) else f"  {k}: {v}")
    return 0


def _simulate(cfg: ExperimentConfig) -> metrics.MetricsReport:
    return sim.run(cfg.sim_config(), cfg.load_trace())


def _print_summary(s: dict) -> None:
    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    print(f"hit rate: {fmt(s['hit_rate'])}  mean access CV: {fmt(s['mean_access_cv'])}  "
          f"SLO attainment: {fmt(s['slo_attainment'])}")


def cmd_run(args) -> int:
    try:
        cfg = _load_config(args)
    except (OSError, ConfigValidationError, workload.TraceFormatError) as e:
        return _fail(str(e))
    out = _out_dir(args, cfg)
    report = _simulate(cfg)
    try:
        metrics.write_outputs(report, out, cfg.metrics.cv_window, cfg.scheduler.slo_multiplier)
    except OSError as e:
        return _fail(f"cannot write outputs to {out}: {e}")
    _print_summary(metrics.summary(report, cfg.metrics.cv_window, cfg.scheduler.slo_multiplier))
    print(f"outputs in {out}")
    return 0


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _sweep_one(job):
    key, value, cfg_dict, base = job
    cfg = ExperimentConfig.from_dict(cfg_dict, base).with_value(key, value)
    cfg.validate()
    report = _simulate(cfg)
    w, m = cfg.metrics.cv_window, cfg.scheduler.slo_multiplier
    return metrics.to_csv(report, w, m, extra={key: value}), metrics.summary(report, w, m)


def cmd_sweep(args) -> int:
    try:
        cfg = _load_config(args)
    except (OSError, ConfigValidationError, workload.TraceFormatError) as e:
        return _fail(str(e))
    keys = cfg.keys()
    if args.param not in keys:
        return _fail(f"unknown sweep key {args.param!r}; valid keys: {', '.join(keys)}")
    values = [_parse_value(v.strip()) for v in args.values.split(",") if v.strip()]
    if not values:
        return _fail("--values must list at least one value")
    try:
        for v in values:
            cfg.with_value(args.param, v).validate()
    except (ConfigValidationError, ValueError) as e:
        return _fail(f"invalid value for {args.param}: {e}")
    jobs = [(args.param, v, cfg.to_dict(), cfg.base_dir) for v in values]
    n_jobs = args.jobs or os.cpu_count() or 1
    if n_jobs == 1 or len(jobs) == 1:
        results = [_sweep_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(n_jobs, len(jobs))) as ex:
            results = list(ex.map(_sweep_one, jobs))
    out = _out_dir(args, cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
        merged = results[0][0] + "".join(text.split("\n", 1)[1] for text, _ in results[1:])
        (out / "sweep.csv").write_text(merged, encoding="utf-8")
        summaries = [{args.param: v, **s} for v, (_, s) in zip(values, results)]
        (out / "sweep_summary.json").write_text(json.dumps(summaries, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        return _fail(f"cannot write outputs to {out}: {e}")
    for v, (_, s) in zip(values, results):
        print(f"{args.param}={v}: ", end="")
        _print_summary(s)
    print(f"outputs in {out}")
    return 0


def cmd_validate(args) -> int:
    try:
        _load_config(args)
    except (OSError, ConfigValidationError, workload.TraceFormatError) as e:
        return _fail(str(e))
    print("config OK")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segpool", description="Segment-level prefix cache pool simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-trace", help="generate a synthetic trace file")
    g.add_argument("--config", required=True, help="trace spec TOML")
    g.add_argument("--out", required=True, help="output JSONL path")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_trace)

    for name, func, hlp in (("run", cmd_run, "run one simulation"), ("validate", cmd_validate, "check a config")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--config", required=True)
        s.add_argument("--trace", help="trace file overriding the config")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help=f"output directory (else ${OUT_ENV}, else the config)")
        s.set_defaults(func=func)

    w = sub.add_parser("sweep", help="run one simulation per parameter value")
    w.add_argument("--config", required=True)
    w.add_argument("--param", required=True, help="dotted config key, e.g. pool.slot_capacity")
    w.add_argument("--values", required=True, help="comma separated values")
    w.add_argument("--trace")
    w.add_argument("--seed", type=int)
    w.add_argument("--out")
    w.add_argument("--jobs", type=int, help="parallel runs (default: logical cores)")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
