"""Hit rate of each policy as per-instance capacity shrinks relative to the trace footprint."""

from _common import base_parser, capacity_for, config, emit, make_trace

from segpool.metrics import hit_rate
from segpool.sim import run


def main():
    p = base_parser(__doc__)
    p.add_argument("--fractions", default="0.1,0.25,0.5,1.0", help="total capacity as a fraction of footprint")
    p.add_argument("--policies", default="pooled,router,pd")
    args = p.parse_args()
    trace = make_trace(args)
    rows = []
    for frac in (float(f) for f in args.fractions.split(",")):
        cap = capacity_for(trace, args, frac)
        for name in args.policies.split(","):
            rows.append((frac, cap, name, repr(hit_rate(run(config(args, name, cap), trace)))))
    emit(rows, ("fraction", "slots_per_instance", "policy", "hit_rate"), args.out)


if __name__ == "__main__":
    main()
