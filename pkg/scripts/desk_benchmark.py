"""Desk-scale comparison of simple penalty, IPA and the enumeration oracle.

Generates random-center instances (l = 16, h = 2^-5), solves each with every
algorithm and writes ``runs.csv`` and ``metrics.csv`` to the output folder.
"""
import argparse
import dataclasses
from pathlib import Path

from mipdeco import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/desk")
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--count", type=int, default=10)
    ap.add_argument("--S", type=int, nargs="+", default=[2, 3])
    ap.add_argument("--level", type=int, default=5)
    ap.add_argument("--p-max", type=int, default=50)
    args = ap.parse_args()

    out = Path(args.out)
    template = ex.InstanceSpec(h=2.0**-args.level, m=4)
    specs = ex.generate_test_set(template, args.count, args.S, args.seed, out / "instances")
    cfg = ex.RunConfig()
    cfg = dataclasses.replace(cfg, outer=dataclasses.replace(cfg.outer, p_max=args.p_max))
    rows, table = ex.run_comparison(specs, ["penalty", "ipa", "oracle"], cfg, args.seed)
    ex.write_runs_csv(rows, out / "runs.csv")
    ex.write_metrics_csv(table, out / "metrics.csv")
    print(f"{'algorithm':10s} {'min_count':>9s} {'rel_err_av':>11s} {'t_av (s)':>9s}")
    for alg, m in table.items():
        print(f"{alg:10s} {m['min_count']:9d} {m['rel_err_av']:11.3e} {m['t_av']:9.3f}")


if __name__ == "__main__":
    main()
