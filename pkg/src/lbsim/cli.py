"""Command-line entry point: ``lbsim run`` and ``lbsim certify``."""

from __future__ import annotations

import argparse
import sys

from . import experiment


def _run(args) -> int:
    scenario = experiment.load_scenario(args.scenario)
    out = experiment.resolve_out(scenario, args.out)
    rows = experiment.run_scenario(scenario, jobs=args.jobs, horizon=args.horizon)
    for path in experiment.write_outputs(scenario, rows, out, plot=args.plot):
        print(path)
    return 0


def _certify(args) -> int:
    mu = experiment.read_rates(args.hetero) if args.hetero else None
    n = len(mu) if mu is not None and args.n is None else args.n
    if n is None:
        raise ValueError("--n is required without --hetero")
    report = experiment.certify(args.policy, n, mu, trials=args.trials, seed=args.seed)
    print("\n".join(report.lines()))
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lbsim", description="Discrete-time load-balancing simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario sweep and write CSV")
    r.add_argument("scenario", help="scenario TOML file, or the name of a bundled scenario")
    r.add_argument("--out", help="output directory (default: scenario's, or $LBSIM_OUT)")
    r.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    r.add_argument("--horizon", type=int, help="override the slot horizon")
    r.add_argument("--plot", action="store_true", help="also write two-column data files")
    r.set_defaults(func=_run)

    c = sub.add_parser("certify", help="check tilt classification and drift bounds")
    c.add_argument("--policy", required=True, help="JSQ, SQ(d), Random, WRandom, JBT-d or JBTG-d")
    c.add_argument("--n", type=int, help="number of servers (homogeneous unless --hetero)")
    c.add_argument("--hetero", help="file with one service rate per server")
    c.add_argument("--trials", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_certify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"lbsim: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
