"""Scenario assembly from YAML configs: kernel, coefficients, cost, controls and run settings.

Coefficients come from two built-in families with polynomial control dependence
(``linear``: ``b = b0(u) + b1(u) x``, ``sigma = s0(u) + s1(u) x``; ``quadratic``:
``b = bx x + bu u^2``, ``sigma = s u``) or from a table sampled on an ``(x, u)`` grid.
Polynomial coefficients are listed in ascending order.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml
from numpy.polynomial import polynomial as P
from scipy.interpolate import RegularGridInterpolator

from .control import ControlGrid
from .cost import CostSpec, coercivity_check, theta_order_check
from .dynamics import CoefficientSet, SimConfig, growth_check
from .kernel import Kernel, feasible_budget, kernel_from_config
from .optimize import OptimizerConfig

__all__ = [
    "ConfigError",
    "StrictifyConfig",
    "Scenario",
    "load_config",
    "apply_overrides",
    "build_scenario",
    "load_scenario",
    "validate_scenario",
    "shipped_configs",
    "config_hash",
]

CONFIG_DIR = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    """Every violated invariant of a config, one message per entry in ``problems``."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n  - " + "\n  - ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class StrictifyConfig:
    mode: str
    infeasible_fraction: float = 0.01
    match_tol: float = 1e-6
    cost_tol: float = 1e-6


@dataclass(eq=False)
class Scenario:
    name: str
    kernel: Kernel
    coeffs: CoefficientSet
    cost: CostSpec
    grid: ControlGrid
    sim: SimConfig
    optimizer: OptimizerConfig
    strictify: StrictifyConfig
    validation: dict
    raw: dict = field(repr=False)
    base_dir: Path | None = None

    @property
    def convex(self) -> bool:
        return bool(self.cost.convex_in_u)

    def with_changes(self, **dotted) -> "Scenario":
        raw = copy.deepcopy(self.raw)
        for key, value in dotted.items():
            _set_dotted(raw, key.replace("__", "."), value)
        return build_scenario(raw, self.base_dir)

    def restricted(self, N: int = 2, n_atoms: int = 3) -> "Scenario":
        """Copy on ``N`` cells keeping the first, middle and last atoms (for ``n_atoms=3``)."""
        A = self.grid.n_atoms
        keep = np.unique(np.round(np.linspace(0, A - 1, min(n_atoms, A))).astype(int))
        raw = copy.deepcopy(self.raw)
        raw["controls"]["atoms"] = self.grid.atoms[keep].tolist()
        raw["sim"]["N"] = N
        return build_scenario(raw, self.base_dir)


# --------------------------------------------------------------------------
# config files

def _set_dotted(tree: dict, key: str, value) -> None:
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def apply_overrides(tree: dict, overrides) -> dict:
    """Apply ``key.sub=value`` strings; values are parsed as YAML scalars or lists."""
    out = copy.deepcopy(tree)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not of the form key=value"])
        key, text = item.split("=", 1)
        _set_dotted(out, key.strip(), yaml.safe_load(text))
    return out


def load_config(path, overrides=()) -> dict:
    with open(path, encoding="utf-8") as fh:
        tree = yaml.safe_load(fh)
    if not isinstance(tree, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return apply_overrides(tree, overrides)


def config_hash(tree: dict) -> str:
    blob = json.dumps(tree, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def shipped_configs() -> list[Path]:
    return sorted(CONFIG_DIR.glob("*.yaml"))


# --------------------------------------------------------------------------
# builders

def _poly(c) -> np.ndarray:
    return np.atleast_1d(np.asarray(c, dtype=float))


def _is_const(c: np.ndarray) -> bool:
    return bool(np.all(c[1:] == 0))


def _u(u) -> float:
    return float(np.asarray(u, dtype=float).reshape(-1)[0])


def _linear_family(spec: dict) -> tuple[Callable, Callable, bool]:
    b0, b1 = _poly(spec.get("b0", [0.0])), _poly(spec.get("b1", [0.0]))
    s0, s1 = _poly(spec.get("sigma0", [0.0])), _poly(spec.get("sigma1", [0.0]))

    def b(t, x, u):
        v = _u(u)
        return P.polyval(v, b0) + P.polyval(v, b1) * np.asarray(x, dtype=float)

    def sigma(t, x, u):
        v = _u(u)
        s = P.polyval(v, s0) + P.polyval(v, s1) * np.asarray(x, dtype=float)
        return s.reshape(-1, 1, 1)

    return b, sigma, _is_const(s0) and _is_const(s1)


def _quadratic_family(spec: dict) -> tuple[Callable, Callable, bool]:
    bx, bu, s = float(spec.get("bx", 0.0)), float(spec.get("bu", 0.0)), float(spec.get("s", 0.0))

    def b(t, x, u):
        v = _u(u)
        return bx * np.asarray(x, dtype=float) + bu * v * v

    def sigma(t, x, u):
        x = np.asarray(x, dtype=float)
        return np.full((len(x), 1, 1), s * _u(u))

    return b, sigma, s == 0.0


def _table_family(spec: dict, base_dir) -> tuple[Callable, Callable, bool]:
    path = Path(spec["table"])
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    with np.load(path) as data:
        xg, ug = data["x"], data["u"]
        bt, st = data["b"], data["sigma"]
    ib = RegularGridInterpolator((xg, ug), bt, bounds_error=False, fill_value=None)
    isg = RegularGridInterpolator((xg, ug), st, bounds_error=False, fill_value=None)

    def pts(x, u):
        x = np.asarray(x, dtype=float).reshape(-1)
        return np.column_stack([x, np.full_like(x, _u(u))])

    def b(t, x, u):
        return ib(pts(x, u)).reshape(-1, 1)

    def sigma(t, x, u):
        return isg(pts(x, u)).reshape(-1, 1, 1)

    return b, sigma, bool(np.all(st == st[:, :1]))


def _theta(spec: dict, l0: Callable) -> Callable:
    kind = spec.get("type")
    if kind == "power_of_l0":
        C, p = float(spec["C"]), float(spec["p"])
        return lambda t, u: float((C * l0(u)) ** (1.0 / p))
    if kind == "const":
        v = float(spec["value"])
        return lambda t, u: v
    raise ConfigError([f"unknown theta type {kind!r}"])


def _cost(spec: dict) -> tuple[CostSpec, Callable]:
    l0c = _poly(spec["l0"])
    var = spec.get("l0_var", "u")
    if var not in ("u", "u2"):
        raise ConfigError([f"cost.l0_var must be 'u' or 'u2', got {var!r}"])

    def l0(u):
        v = _u(u)
        return float(P.polyval(v * v if var == "u2" else v, l0c))

    lx, gx = float(spec.get("lx", 0.0)), float(spec.get("gx", 0.0))

    def l(t, x, u):
        x = np.asarray(x, dtype=float).reshape(len(x), -1)
        return l0(u) + lx * np.sum(x * x, axis=1)

    def G(x):
        x = np.asarray(x, dtype=float).reshape(len(x), -1)
        return gx * np.sum(x * x, axis=1)

    theta2 = _theta(spec["theta"], l0)
    cost = CostSpec(l=l, G=G, theta2=theta2, C1=float(spec["C1"]), C2=float(spec["C2"]),
                    p=float(spec["p"]), convex_in_u=bool(spec.get("convex_in_u", False)))
    return cost, l0


REQUIRED = {
    "name": (),
    "kernel": ("type",),
    "coefficients": ("family", "c_lin"),
    "cost": ("l0", "theta", "C1", "C2", "p"),
    "controls": ("atoms", "bounds"),
    "sim": ("T", "N", "M", "seed", "x0"),
    "optimizer": ("method", "iterations", "step_size", "restarts", "crn_seed", "fd_step",
                  "eval_seed"),
    "strictify": ("mode",),
}


def _missing(raw: dict) -> list[str]:
    problems = []
    for section, keys in REQUIRED.items():
        if section not in raw:
            problems.append(f"missing section {section!r}")
            continue
        if keys and not isinstance(raw[section], dict):
            problems.append(f"section {section!r} must be a mapping")
            continue
        for k in keys:
            if k not in raw[section]:
                problems.append(f"missing {section}.{k}")
    return problems


def build_scenario(raw: dict, base_dir=None) -> Scenario:
    """Assemble a scenario; collects every problem before raising :class:`ConfigError`."""
    problems = _missing(raw)
    if problems:
        raise ConfigError(problems)
    built: dict[str, Any] = {}

    def attempt(name, fn):
        try:
            built[name] = fn()
        except ConfigError as e:
            problems.extend(e.problems)
        except (ValueError, TypeError, KeyError, OSError) as e:
            problems.append(f"{name}: {e}")

    co = raw["coefficients"]
    attempt("kernel", lambda: kernel_from_config(raw["kernel"], base_dir))
    attempt("grid", lambda: ControlGrid(np.asarray(raw["controls"]["atoms"], dtype=float).reshape(
        len(raw["controls"]["atoms"]), -1), tuple(raw["controls"]["bounds"])))
    attempt("cost", lambda: _cost(raw["cost"]))

    def coeffs():
        fam = co["family"]
        if fam == "linear":
            b, s, free = _linear_family(co)
        elif fam == "quadratic":
            b, s, free = _quadratic_family(co)
        elif fam == "table":
            b, s, free = _table_family(co, base_dir)
        else:
            raise ConfigError([f"unknown coefficient family {fam!r}"])
        theta1 = _theta(co.get("theta1", raw["cost"]["theta"]), built["cost"][1]) \
            if "cost" in built else (lambda t, u: 0.0)
        return CoefficientSet(b=b, sigma=s, c_lin=float(co["c_lin"]), theta1=theta1,
                              control_free_sigma=free)

    attempt("coeffs", coeffs)
    si = raw["sim"]

    def sim():
        x0 = float(si["x0"])
        return SimConfig(T=float(si["T"]), N=int(si["N"]), M=int(si["M"]), seed=int(si["seed"]),
                         x0=lambda t: np.full(np.shape(t), x0),
                         near_cell=si.get("near_cell", "exact"), chunk=int(si.get("chunk", 4096)),
                         threads=int(si.get("threads", 1)))

    attempt("sim", sim)
    op = raw["optimizer"]
    attempt("optimizer", lambda: OptimizerConfig(
        method=op["method"], iterations=int(op["iterations"]), step_size=float(op["step_size"]),
        restarts=int(op["restarts"]), crn_seed=int(op["crn_seed"]), fd_step=float(op["fd_step"]),
        eval_seed=int(op["eval_seed"]), eval_M=int(op["eval_M"]) if "eval_M" in op else None,
        exhaustive_limit=int(op.get("exhaustive_limit", 1000)), mesh=int(op.get("mesh", 10)),
        population=int(op.get("population", 24)), elite=int(op.get("elite", 6))))
    st = raw["strictify"]

    def strict_cfg():
        if st["mode"] not in ("affine", "general"):
            raise ConfigError([f"strictify.mode must be 'affine' or 'general', got {st['mode']!r}"])
        return StrictifyConfig(mode=st["mode"],
                               infeasible_fraction=float(st.get("infeasible_fraction", 0.01)),
                               match_tol=float(st.get("match_tol", 1e-6)),
                               cost_tol=float(st.get("cost_tol", 1e-6)))

    attempt("strictify", strict_cfg)
    if "grid" in built and built["grid"].dim != 1:
        problems.append("built-in coefficient families take scalar controls")
    if problems:
        raise ConfigError(problems)
    return Scenario(name=str(raw["name"]), kernel=built["kernel"], coeffs=built["coeffs"],
                    cost=built["cost"][0], grid=built["grid"], sim=built["sim"],
                    optimizer=built["optimizer"], strictify=built["strictify"],
                    validation=dict(raw.get("validation", {})), raw=copy.deepcopy(raw),
                    base_dir=Path(base_dir) if base_dir is not None else None)


def load_scenario(path, overrides=()) -> Scenario:
    path = Path(path)
    return build_scenario(load_config(path, overrides), path.parent)


# --------------------------------------------------------------------------
# validation

def validate_scenario(sc: Scenario) -> dict:
    """Growth, coercivity, theta ordering and exponent-budget checks on sampled points.

    ``validation.expect_feasible`` declares whether the exponent budget is meant to be
    feasible; a mismatch fails validation, an infeasible budget by itself does not.
    """
    v = sc.validation
    t_s = np.linspace(0.0, sc.sim.T, int(v.get("n_t", 5)))
    lim = float(v.get("x_range", 5.0))
    x_s = np.linspace(-lim, lim, int(v.get("n_x", 41)))[:, None]
    growth = growth_check(sc.coeffs, sc.grid, t_s, x_s)
    coerc = coercivity_check(sc.cost, sc.grid, t_s, x_s)
    order = theta_order_check(sc.coeffs.theta1, sc.cost.theta2, sc.grid, t_s)
    budget = feasible_budget(sc.kernel, sc.cost.p)
    expect = v.get("expect_feasible")
    budget_ok = expect is None or bool(expect) == budget.feasible
    problems = []
    if growth > 1e-9:
        problems.append(f"growth bound violated by {growth:.3g}")
    if not coerc.passed:
        problems.append(f"coercivity violated by {coerc.max_violation:.3g}")
    if order > 1e-12:
        problems.append(f"theta1 exceeds theta2 by {order:.3g}")
    if not budget_ok:
        problems.append(f"exponent budget feasible={budget.feasible}, declared {bool(expect)}")
    return {
        "scenario": sc.name,
        "growth_max_violation": growth,
        "coercivity": coerc.as_dict(),
        "theta_order_max": order,
        "budget": budget.as_dict(),
        "budget_matches_declared": budget_ok,
        "passed": not problems,
        "problems": problems,
    }
