"""Command line front-end: ``mipdeco {gen,solve,bench,oracle,validate-fem,trace}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from mipdeco import experiments as ex
from mipdeco import fem
from mipdeco.oracle import EnumerationBudget, enumerate_global_min

KINDS = (fem.POISSON, fem.CONVECTION_DIFFUSION, fem.NONLINEAR_POISSON)


def _add_outer_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration (defaults embedded)")
    p.add_argument("--p-max", type=int, dest="p_max")
    p.add_argument("--theta", type=int)
    p.add_argument("--eps0", type=float)


def _run_config(args) -> ex.RunConfig:
    cfg = ex.load_config(args.config)
    return ex.with_overrides(cfg, p_max=args.p_max, theta=args.theta, eps0=args.eps0)


def _specs_from(paths) -> list[ex.InstanceSpec]:
    files = []
    for p in paths:
        p = Path(p)
        files.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    return [ex.InstanceSpec.load(f) for f in files]


def cmd_gen(args) -> int:
    template = ex.InstanceSpec(kind=args.kind, h=2.0**-args.level, m=args.m, S=args.S[0], recipe=args.recipe)
    specs = ex.generate_test_set(template, args.count, args.S, args.seed, args.out)
    print(f"wrote {len(specs)} instances to {args.out}")
    return 0


def cmd_solve(args) -> int:
    spec = ex.InstanceSpec.load(args.instance)
    cfg = _run_config(args)
    problem = ex.build_problem(spec)
    report = ex.solve(problem, args.algorithm, cfg, args.seed)
    out = report.to_json(indent=2)
    if args.out:
        Path(args.out).write_text(out + "\n")
    else:
        print(out)
    if args.trace:
        ex.emit_trace(report, args.trace)
    return 0


def cmd_bench(args) -> int:
    specs = _specs_from(args.instances)
    cfg = _run_config(args)
    rows, table = ex.run_comparison(specs, args.algorithms, cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ex.write_runs_csv(rows, out / "runs.csv")
    ex.write_metrics_csv(table, out / "metrics.csv")
    for alg, m in table.items():
        print(f"{alg:8s} min_count={m['min_count']:3d} rel_err_av={m['rel_err_av']:.3e} "
              f"t_av={m['t_av']:.3f}s failures={m['failures']}")
    return 0


def cmd_oracle(args) -> int:
    spec = ex.InstanceSpec.load(args.instance)
    problem = ex.build_problem(spec)
    res = enumerate_global_min(problem, EnumerationBudget(args.budget), keep_table=bool(args.table))
    if args.table:
        res.write_csv(args.table)
    print(json.dumps({"u": [int(v) for v in res.u], "objective": res.objective, "candidates": res.n_candidates}))
    return 0


def cmd_validate_fem(args) -> int:
    errors = [fem.manufactured_l2_error(2.0**-k) for k in args.levels]
    prev = None
    for k, e in zip(args.levels, errors):
        ratio = "" if prev is None else f"  ratio={prev / e:.3f}"
        print(f"h=2^-{k}  L2 error={e:.6e}{ratio}")
        prev = e
    ratios = [a / b for a, b in zip(errors, errors[1:])]
    return 0 if all(3.2 <= r <= 4.8 for r in ratios) else 1


def cmd_trace(args) -> int:
    spec = ex.InstanceSpec.load(args.instance)
    cfg = _run_config(args)
    report = ex.solve(ex.build_problem(spec), "ipa", cfg, args.seed)
    ex.emit_trace(report, args.out)
    print(f"wrote {len(report.ipm_calls)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mipdeco", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a test set of instance files")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=KINDS, default=fem.POISSON)
    p.add_argument("--level", type=int, default=5, help="mesh step h = 2^-level")
    p.add_argument("--m", type=int, default=4, help="source grid dimension (l = m²)")
    p.add_argument("--S", type=int, nargs="+", default=[2, 3])
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--recipe", choices=("random-centers", "grid-exact"), default="random-centers")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("solve", help="solve one instance")
    p.add_argument("instance")
    p.add_argument("--algorithm", choices=ex.ALGORITHMS, default="ipa")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--trace")
    _add_outer_overrides(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("bench", help="compare algorithms on a test set")
    p.add_argument("instances", nargs="+", help="instance files or directories")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--algorithms", nargs="+", choices=ex.ALGORITHMS, default=["penalty", "ipa"])
    _add_outer_overrides(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("oracle", help="brute-force global minimum")
    p.add_argument("instance")
    p.add_argument("--budget", type=int, default=EnumerationBudget().max_candidates)
    p.add_argument("--table", help="write the full candidate table as CSV")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("validate-fem", help="manufactured-solution convergence check")
    p.add_argument("--levels", type=int, nargs="+", default=[3, 4, 5])
    p.set_defaults(func=cmd_validate_fem)

    p = sub.add_parser("trace", help="ε / aGMRES / NLI trace of an IPA run")
    p.add_argument("instance")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_outer_overrides(p)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("config", help="print the default run configuration")
    p.set_defaults(func=lambda a: print(json.dumps(ex.default_config_dict(), indent=2)) or 0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
