"""Relaxed against strict optimum for every shipped scenario, with paired standard errors.

Writes ``results/relaxation_gap.csv``.  Same numbers as ``csvelab compare``.
"""
import argparse
import csv
from pathlib import Path

from csvelab import load_scenario, shipped_configs
from csvelab.optimize import optimize_relaxed, optimize_strict, paired_evaluation


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", default="results")
    args = ap.parse_args(argv)

    rows = []
    for path in shipped_configs():
        sc = load_scenario(path, args.set)
        rs = optimize_strict(sc)
        rr = optimize_relaxed(sc, warm_start=rs.control)
        cfg = sc.sim.replace(M=sc.optimizer.eval_M or sc.sim.M, seed=sc.optimizer.eval_seed)
        pe = paired_evaluation(sc, rr.control, rs.control, cfg)
        rows.append([sc.name, sc.convex, pe["J1"], pe["J2"], -pe["diff"], pe["se_diff"]])
        print(f"{sc.name:24s} relaxed={pe['J1']:.4f} strict={pe['J2']:.4f} "
              f"gap={-pe['diff']:.4f} +- {pe['se_diff']:.4f}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "relaxation_gap.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "convex", "relaxed", "strict", "gap", "se_gap"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
