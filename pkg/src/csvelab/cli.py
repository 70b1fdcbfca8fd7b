"""Command-line runner: ``csvelab <subcommand> --config PATH [--set k=v ...] --out DIR``.

Every subcommand writes its artifacts plus ``manifest.json`` (config hash, seeds,
library versions, artifact digests).  Artifacts contain no timestamps or host data, so
identical configs reproduce them byte for byte.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .control import (constant_control, read_relaxed_csv, read_strict_csv, uniform_control,
                      write_relaxed_csv, write_strict_csv)
from .cost import evaluate_cost, path_costs
from .dynamics import (holder_estimate, integrated_residual, mean_stderr, moment_sup,
                       sample_relaxed, simulate_csve)
from .kernel import estimate_gamma, feasible_budget, kernel_from_config, regularity
from .optimize import (StrictificationError, optimize_relaxed, optimize_strict,
                       paired_evaluation, selection_cost, strictify)
from .scenarios import (ConfigError, build_scenario, config_hash, load_config,
                        shipped_configs, validate_scenario)
from .selftest import CHECKS, dumps, run_selftest

log = logging.getLogger("csvelab")

BUDGET_PS = (4.0, 8.0, 16.0, 32.0)
H_GRID = np.logspace(-4, -1, 7)


class Run:
    """Output directory bookkeeping: artifacts are registered as they are written."""

    def __init__(self, out: Path, subcommand: str):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.subcommand = subcommand
        self.artifacts: dict[str, str] = {}

    def write_text(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text, encoding="utf-8")
        self.artifacts[name] = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return path

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, dumps(obj))

    def write_csv(self, name: str, header, rows) -> Path:
        lines = [",".join(header)]
        for r in rows:
            lines.append(",".join(_cell(v) for v in r))
        return self.write_text(name, "\n".join(lines) + "\n")

    def register(self, name: str) -> None:
        self.artifacts[name] = hashlib.sha256((self.out / name).read_bytes()).hexdigest()

    def manifest(self, configs: list[dict], seeds: dict) -> None:
        body = {
            "subcommand": self.subcommand,
            "configs": [{"name": c.get("name"), "sha256": config_hash(c), "resolved": c}
                        for c in configs],
            "seeds": seeds,
            "versions": {"csvelab": __version__, "numpy": np.__version__,
                         "scipy": _scipy_version(), "python": platform.python_version()},
            "artifacts": dict(sorted(self.artifacts.items())),
        }
        (self.out / "manifest.json").write_text(dumps(body), encoding="utf-8")


def _scipy_version() -> str:
    import scipy
    return scipy.__version__


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _seeds(tree: dict) -> dict:
    op = tree.get("optimizer", {})
    return {"sim": tree.get("sim", {}).get("seed"), "crn": op.get("crn_seed"),
            "eval": op.get("eval_seed")}


def _load_tree(args) -> dict:
    tree = load_config(args.config, args.set)
    if args.threads is not None and isinstance(tree.get("sim"), dict):
        tree["sim"]["threads"] = int(args.threads)
    return tree


def _scenario(args):
    tree = _load_tree(args)
    return tree, build_scenario(tree, Path(args.config).parent)


def _control(spec: str, sc):
    t = sc.sim.time_grid
    if spec == "uniform":
        return uniform_control(sc.grid, t)
    if spec.startswith("atom:"):
        return constant_control(sc.grid, t, int(spec.split(":", 1)[1]))
    path = Path(spec)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if header == ["t_lo", "t_hi", "atom_index"]:
        return read_strict_csv(path, sc.grid)
    return read_relaxed_csv(path, sc.grid)


# --------------------------------------------------------------------------
# subcommands

def cmd_validate_kernel(args) -> int:
    tree = _load_tree(args)
    base = Path(args.config).parent
    k = kernel_from_config(tree["kernel"], base)
    T = float(tree.get("sim", {}).get("T", 1.0))
    r_sup, gamma = regularity(k)
    ps = sorted(set(BUDGET_PS) | ({float(tree["cost"]["p"])} if "cost" in tree else set()))
    report = {
        "kernel": k.describe(),
        "gamma_est": estimate_gamma(k, H_GRID * T, T),
        "gamma_theory": gamma,
        "h_grid": H_GRID * T,
        "r_range": [2.0, r_sup if np.isfinite(r_sup) else "inf"],
        "feasible_budgets": [feasible_budget(k, p).as_dict() for p in ps],
    }
    status = 0
    if all(s in tree for s in ("coefficients", "cost", "controls", "sim", "optimizer")):
        report["scenario"] = validate_scenario(build_scenario(tree, base))
        status = 0 if report["scenario"]["passed"] else 1
    run = Run(args.out, "validate-kernel")
    run.write_json("kernel_report.json", report)
    run.manifest([tree], _seeds(tree))
    print(dumps({"gamma_est": report["gamma_est"], "gamma_theory": gamma}), end="")
    return status


def _dump_paths(run: Run, X: np.ndarray, t: np.ndarray, fmt: str) -> None:
    M, n1, d = X.shape
    if fmt == "binary":
        name = "paths.bin"
        with open(run.out / name, "wb") as fh:
            fh.write(np.array([M, n1 - 1, d], dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(X, dtype="<f8").tobytes())
        run.register(name)
    elif fmt == "csv":
        header = ["path", "step", "t"] + [f"x_{i + 1}" for i in range(d)]
        rows = ([m, j, t[j]] + list(X[m, j]) for m in range(M) for j in range(n1))
        run.write_csv("paths.csv", header, rows)


def read_paths_bin(path) -> np.ndarray:
    """Inverse of the binary dump: returns ``X`` with shape ``(M, N + 1, d)``."""
    raw = Path(path).read_bytes()
    M, N, d = np.frombuffer(raw[:24], dtype="<i8")
    return np.frombuffer(raw[24:], dtype="<f8").reshape(int(M), int(N) + 1, int(d))


def _lags(N: int) -> list[int] | None:
    lags = [2 ** i for i in range(int(np.log2(max(N // 4, 1))) + 1)]
    return lags if len(lags) >= 2 and lags[-1] >= 10 * lags[0] else None


def cmd_simulate(args) -> int:
    tree, sc = _scenario(args)
    ctrl = _control(args.control, sc)
    if args.sample_relaxed is not None:
        ctrl = sample_relaxed(ctrl, sc.sim, args.sample_relaxed)
    pb = simulate_csve(sc.kernel, sc.coeffs, ctrl, sc.sim, keep=("X", "Z"))
    m_val, m_se = moment_sup(pb, args.moment)
    lags = _lags(sc.sim.N)
    resid = integrated_residual(pb, sc.kernel)
    J, se = mean_stderr(path_costs(pb, sc.cost))
    summary = {
        "scenario": sc.name, "control": args.control,
        "sampled_relaxed_seed": args.sample_relaxed, "M": sc.sim.M, "N": sc.sim.N,
        "moment_sup": {"m": args.moment, "value": m_val, "stderr": m_se},
        "holder_slope": {"m": 2, "lags": lags,
                         "value": holder_estimate(pb, 2, lags) if lags else None},
        "residual_curve": resid,
        "cost": {"J": J, "stderr": se},
    }
    run = Run(args.out, "simulate")
    run.write_json("summary.json", summary)
    run.write_csv("residual_curve.csv", ["t", "residual"], zip(pb.t, resid))
    X = pb.X
    run.write_csv("moments.csv", ["t", "mean", "var"],
                  zip(pb.t, X[..., 0].mean(axis=0), X[..., 0].var(axis=0)))
    if args.dump != "none":
        _dump_paths(run, X, pb.t, args.dump)
    run.manifest([tree], _seeds(tree))
    print(dumps({"moment_sup": m_val, "holder_slope": summary["holder_slope"]["value"],
                 "J": J}), end="")
    return 0


def cmd_estimate_regularity(args) -> int:
    tree, sc = _scenario(args)
    T = sc.sim.T
    r_sup, gamma = regularity(sc.kernel)
    ctrl = _control(args.control, sc)
    pb = simulate_csve(sc.kernel, sc.coeffs, ctrl, sc.sim, keep=("X",))
    lags = _lags(sc.sim.N)
    budget = feasible_budget(sc.kernel, sc.cost.p)
    report = {
        "scenario": sc.name,
        "gamma_est": estimate_gamma(sc.kernel, H_GRID * T, T),
        "gamma_theory": gamma,
        "r_sup": r_sup if np.isfinite(r_sup) else "inf",
        "budget": budget.as_dict(),
        "increment_slope": {str(m): (holder_estimate(pb, m, lags) if lags else None)
                            for m in (2.0, float(args.moment))},
        "lags": lags,
        "slope_theory": gamma / 2,
    }
    run = Run(args.out, "estimate-regularity")
    run.write_json("regularity.json", report)
    run.manifest([tree], _seeds(tree))
    print(dumps({"gamma_est": report["gamma_est"], "increment_slope": report["increment_slope"]}),
          end="")
    return 0


def _optimize_one(sc) -> dict:
    rs = optimize_strict(sc)
    rr = optimize_relaxed(sc, warm_start=rs.control)
    cfg = sc.sim.replace(M=sc.optimizer.eval_M or sc.sim.M, seed=sc.optimizer.eval_seed)
    out = {"strict": rs, "relaxed": rr, "eval_cfg": cfg, "strictified": None, "report": None}
    try:
        pb = simulate_csve(sc.kernel, sc.coeffs, rr.control, cfg, keep=("X",))
        rep = strictify(rr.control, sc, pb=pb)
        out["report"] = rep
        if rep.mode == "affine":
            out["strictified"] = evaluate_cost(sc.kernel, sc.coeffs, sc.cost, rep.control, cfg)
        else:
            out["strictified"] = selection_cost(rep, sc.cost)
        out["strictify"] = rep.summary()
    except StrictificationError as e:
        out["report"] = e.report
        out["strictify"] = {**e.report.summary(), "error": str(e)}
    return out


def cmd_optimize(args) -> int:
    tree, sc = _scenario(args)
    res = _optimize_one(sc)
    rs, rr = res["strict"], res["relaxed"]
    strictified = res["strictified"]
    result = {
        "scenario": sc.name,
        "J_relaxed": rr.J, "J_strict": rs.J,
        "J_strictified": strictified[0] if strictified else None,
        "stderr": {"relaxed": rr.stderr, "strict": rs.stderr,
                   "strictified": strictified[1] if strictified else None},
        "train": {"relaxed": rr.train_J, "strict": rs.train_J},
        "iterations": {"relaxed": len(rr.trace), "strict": len(rs.trace)},
        "evaluations": {"relaxed": rr.evaluations, "strict": rs.evaluations},
        "restarts": rr.restarts,
        "stagnated": rr.stagnated,
        "seeds": {**rr.seeds, "sim": sc.sim.seed},
        "eval_M": res["eval_cfg"].M,
        "strictify": res["strictify"],
        "validation": validate_scenario(sc),
    }
    run = Run(args.out, "optimize")
    run.write_json("result.json", result)
    write_relaxed_csv(rr.control, run.out / "relaxed_control.csv")
    run.register("relaxed_control.csv")
    write_strict_csv(rs.control, run.out / "strict_control.csv")
    run.register("strict_control.csv")
    for name, r in (("relaxed", rr), ("strict", rs)):
        run.write_csv(f"trace_{name}.csv", ["iteration", "best_J"], enumerate(r.trace, 1))
    run.manifest([tree], _seeds(tree))
    print(dumps({k: result[k] for k in ("J_relaxed", "J_strict", "J_strictified")}), end="")
    return 0


def cmd_compare(args) -> int:
    paths = args.config or [str(p) for p in shipped_configs()]
    trees, rows = [], []
    for p in paths:
        tree = load_config(p, args.set)
        if args.threads is not None:
            tree["sim"]["threads"] = int(args.threads)
        sc = build_scenario(tree, Path(p).parent)
        rs = optimize_strict(sc)
        rr = optimize_relaxed(sc, warm_start=rs.control)
        cfg = sc.sim.replace(M=sc.optimizer.eval_M or sc.sim.M, seed=sc.optimizer.eval_seed)
        pr = paired_evaluation(sc, rr.control, rs.control, cfg)
        se = max(pr["se1"], pr["se2"])
        rows.append([sc.name, pr["J1"], pr["J2"], pr["J2"] - pr["J1"], 3 * se])
        trees.append(tree)
    run = Run(args.out, "compare")
    run.write_csv("compare.csv", ["scenario", "relaxed", "strict", "gap", "band_3se"], rows)
    run.manifest(trees, {t["name"]: _seeds(t) for t in trees})
    for r in rows:
        print(",".join(_cell(v) for v in r))
    return 0


def cmd_selftest(args) -> int:
    only = [int(x) for x in args.only.split(",")] if args.only else None
    results = run_selftest(only, log=lambda s: print(s, flush=True))
    run = Run(args.out, "selftest")
    ok = all(r.passed for r in results)
    run.write_json("selftest.json", {"passed": ok, "criteria": [r.record() for r in results]})
    timings = {str(r.id): {"seconds": r.runtime, "budget": r.budget, "within_budget": r.runtime_ok}
               for r in results}
    # timings vary run to run; kept out of the digest list
    (run.out / "timings.json").write_text(dumps(timings), encoding="utf-8")
    run.manifest([], {})
    all_ok = ok and all(r.runtime_ok for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} criteria passed")
    return 0 if all_ok else 1


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (dotted key, YAML value)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="worker threads for simulation")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="csvelab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate-kernel", parents=[common], help="kernel regularity report")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_validate_kernel)

    for name, func, helptext in (("simulate", cmd_simulate, "simulate paths and summaries"),
                                 ("estimate-regularity", cmd_estimate_regularity,
                                  "kernel and path regularity estimates")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--control", default="uniform",
                       help="'uniform', 'atom:<i>' or a control CSV file")
        s.add_argument("--moment", type=float, default=2.0, help="moment order m")
        if name == "simulate":
            s.add_argument("--dump", choices=("none", "csv", "binary"), default="none")
            s.add_argument("--sample-relaxed", type=int, default=None, metavar="SEED",
                           help="draw atoms from the relaxed weights per path and step")
        s.set_defaults(func=func)

    s = sub.add_parser("optimize", parents=[common], help="relaxed, strict and strictified optima")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("compare", parents=[common], help="relaxed vs strict table over scenarios")
    s.add_argument("--config", action="append", default=None,
                   help="scenario config (repeatable; default: all shipped)")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("selftest", parents=[common], help="acceptance battery")
    s.add_argument("--only", default=None,
                   help=f"comma-separated criterion ids out of {min(CHECKS)}..{max(CHECKS)}")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args))
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
