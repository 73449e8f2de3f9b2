"""P90 goodput: the highest session rate at which 90% of requests meet the latency SLO."""

from _common import base_parser, config, emit, make_trace

from segpool.metrics import p90_goodput, slo_attainment
from segpool.sim import run


def main():
    p = base_parser(__doc__)
    p.add_argument("--rates", default="1,2,4,8,16,32")
    p.add_argument("--multiplier", type=float, default=10.0)
    p.add_argument("--policies", default="pooled,router,pd")
    args = p.parse_args()
    rates = [float(r) for r in args.rates.split(",")]
    rows = []
    for name in args.policies.split(","):
        def attainment(rate):
            return slo_attainment(run(config(args, name), make_trace(args, rate)), args.multiplier)

        rows.append((name, repr(p90_goodput(attainment, rates))))
    emit(rows, ("policy", "p90_goodput"), args.out)


if __name__ == "__main__":
    main()
