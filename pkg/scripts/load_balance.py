"""Per-window access CV of each policy on one trace."""

from _common import base_parser, config, emit, make_trace

from segpool.metrics import access_cv
from segpool.sim import run


def main():
    p = base_parser(__doc__)
    p.add_argument("--window", type=float, default=10.0)
    p.add_argument("--policies", default="pooled,router")
    args = p.parse_args()
    trace = make_trace(args)
    rows = []
    for name in args.policies.split(","):
        cvs, mean = access_cv(run(config(args, name), trace), args.window)
        rows += [(name, i, repr(c)) for i, c in enumerate(cvs)]
        rows.append((name, "mean", repr(mean)))
    emit(rows, ("policy", "window", "access_cv"), args.out)


if __name__ == "__main__":
    main()
