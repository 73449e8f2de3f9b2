"""Shared setup for the experiment scripts."""

import argparse
import math

from segpool.sim import PolicyConfig, SimConfig, trace_footprint
from segpool.workload import TraceSpec, generate

POLICIES = {"pooled": "pooled", "router": "cache_aware_router", "pd": "pd_disagg"}


def base_parser(desc: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=desc)
    p.add_argument("--preset", default="loogle_like")
    p.add_argument("--sessions", type=int, default=2000)
    p.add_argument("--rate", type=float, default=4.0, help="session arrival rate per second")
    p.add_argument("--length-scale", type=float, default=0.25)
    p.add_argument("--instances", type=int, default=8)
    p.add_argument("--system-prompt", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    return p


def make_trace(args, rate=None):
    spec = TraceSpec(args.preset, rate_lambda=rate or args.rate, max_sessions=args.sessions, seed=args.seed,
                     system_prompt_len=args.system_prompt, output_mean=32, length_scale=args.length_scale)
    return generate(spec)


def config(args, policy: str, cap: int = 4096) -> SimConfig:
    kind = POLICIES[policy]
    split = None
    if kind == "pd_disagg":  # one prefill instance per four, as in a 2:6 split of eight
        pre = max(1, args.instances // 4)
        split = (pre, args.instances - pre)
    pol = PolicyConfig(kind, split)
    return SimConfig(n_instances=args.instances, policy=pol, system_prompt_len=args.system_prompt,
                     slot_capacity=cap, seed=args.seed)


def capacity_for(trace, args, fraction: float) -> int:
    fp = trace_footprint(trace, 640, args.seed, args.system_prompt)
    return max(1, math.ceil(fraction * fp / args.instances))


def emit(rows, header, out):
    import csv
    import sys

    f = open(out, "w", newline="") if out else sys.stdout
    w = csv.writer(f, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if out:
        f.close()
