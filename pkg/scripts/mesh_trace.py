"""ε / aGMRES / NLI traces of one IPA run on two mesh sizes.

Writes one three-column trace file per (kind, h) pair, the data behind a
plot of preconditioned GMRES counts over the penalty parameter.
"""
import argparse
from pathlib import Path

import numpy as np

from mipdeco import experiments as ex
from mipdeco.penalty import OuterConfig, ipa


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/traces")
    ap.add_argument("--levels", type=int, nargs="+", default=[4, 5])
    ap.add_argument("--kinds", nargs="+", default=["poisson", "convection-diffusion"])
    ap.add_argument("--S", type=int, default=3)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--p-max", type=int, default=50)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    centers = tuple(tuple(c) for c in rng.uniform(0.1, 0.9, (args.S, 2)))
    for kind in args.kinds:
        for k in args.levels:
            spec = ex.InstanceSpec(kind=kind, h=2.0**-k, m=4, S=args.S, centers=centers, seed=args.seed)
            rep = ipa(ex.build_problem(spec), config=OuterConfig(p_max=args.p_max, seed=args.seed))
            path = ex.emit_trace(rep, out / f"{kind}_h{k}.txt")
            agm = [r.average_gmres for r in rep.ipm_calls]
            print(f"{kind:22s} h=2^-{k}: {len(agm):3d} local solves, aGMRES mean {np.mean(agm):.2f} "
                  f"max {np.max(agm):.2f}, objective {rep.objective:.4e} -> {path}")


if __name__ == "__main__":
    main()
