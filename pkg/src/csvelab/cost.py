"""Running/terminal costs, Monte-Carlo cost evaluation and the coercivity check."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .control import ControlGrid
from .dynamics import (CoefficientSet, Noise, PathBundle, SimConfig, mean_stderr,
                       simulate_csve)
from .kernel import Kernel

__all__ = [
    "CostSpec",
    "InfiniteCostError",
    "CoercivityReport",
    "relaxed_running_cost",
    "path_costs",
    "evaluate_cost",
    "coercivity_check",
    "theta_order_check",
]


class InfiniteCostError(ValueError):
    """A visited running cost is +inf (or NaN); carries the offending time and atom."""

    def __init__(self, t: float, atom: int):
        super().__init__(f"running cost is not finite at t={t!r}, atom {atom}")
        self.t = t
        self.atom = atom


@dataclass(frozen=True)
class CostSpec:
    """Running cost ``l(t, x, u) -> (B,)``, terminal cost ``G(x) -> (B,)`` and coercivity data."""

    l: Callable
    G: Callable
    theta2: Callable
    C1: float
    C2: float
    p: float
    convex_in_u: bool = False

    def __post_init__(self):
        if not self.C2 > 0:
            raise ValueError("C2 must be positive")
        if not self.p >= 1:
            raise ValueError("p must be at least 1")


def _l_values(cost: CostSpec, t: float, x: np.ndarray, u: np.ndarray, a: int) -> np.ndarray:
    v = np.asarray(cost.l(t, x, u), dtype=float).reshape(len(x))
    if not np.all(np.isfinite(v)):
        raise InfiniteCostError(t, a)
    return v


def relaxed_running_cost(cost: CostSpec, grid: ControlGrid, t: float, x, weights_row) -> np.ndarray:
    """``sum_a w_a l(t, x, u_a)`` over atoms with positive weight."""
    xb = np.atleast_2d(np.asarray(x, dtype=float))
    w = np.asarray(weights_row, dtype=float)
    out = np.zeros(len(xb))
    for a in np.flatnonzero(w):
        out += w[a] * _l_values(cost, t, xb, grid.atoms[a], a)
    return out


def path_costs(pb: PathBundle, cost: CostSpec) -> np.ndarray:
    """Per-path ``sum_j dt * lbar(t_j, X_j, pi_j) + G(X_T)`` (left-point in time)."""
    cfg, plan = pb.cfg, pb.plan
    X = pb.X
    dt = cfg.dt
    run = np.zeros(len(X))
    sl = slice(pb.paths.start, pb.paths.stop)
    for j in range(cfg.N):
        w, idx = plan.rows(j, sl)
        if w is not None:
            run += dt * relaxed_running_cost(cost, plan.grid, pb.t[j], X[:, j], w)
        else:
            for a in np.unique(idx):
                m = idx == a
                run[m] += dt * _l_values(cost, pb.t[j], X[m, j], plan.grid.atoms[a], a)
    G = np.asarray(cost.G(X[:, -1]), dtype=float).reshape(len(X))
    return run + G


def evaluate_cost(k: Kernel, coeffs: CoefficientSet, cost: CostSpec, control, cfg: SimConfig,
                  noise: Noise | None = None) -> tuple[float, float]:
    """Monte-Carlo estimate of the (relaxed) cost and its jackknife standard error."""
    pb = simulate_csve(k, coeffs, control, cfg, noise=noise, keep=("X",))
    return mean_stderr(path_costs(pb, cost))


@dataclass(frozen=True)
class CoercivityReport:
    max_violation: float
    passed: bool
    worst: tuple

    def as_dict(self) -> dict:
        t, x, u = self.worst
        return {"max_violation": self.max_violation, "passed": self.passed,
                "worst": {"t": t, "x": list(np.ravel(x)), "u": list(np.ravel(u))}}


def coercivity_check(cost: CostSpec, grid: ControlGrid, t_samples, x_samples,
                     tol: float = 1e-9) -> CoercivityReport:
    """Max of ``theta2(t,u)^p - C1 - C2 l(t,x,u)`` over the samples; passes iff ``<= tol``."""
    xs = np.asarray(x_samples, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    ts = np.atleast_1d(np.asarray(t_samples, dtype=float))
    if len(ts) == 0 or len(xs) == 0:
        raise ValueError("sample sets must be non-empty")
    worst, arg = -math.inf, None
    for t in ts:
        for u in grid.atoms:
            lv = np.asarray(cost.l(float(t), xs, u), dtype=float).reshape(len(xs))
            gap = cost.theta2(float(t), u) ** cost.p - cost.C1 - cost.C2 * lv
            i = int(np.argmax(gap))
            if gap[i] > worst:
                worst, arg = float(gap[i]), (float(t), xs[i].copy(), u.copy())
    return CoercivityReport(worst, worst <= tol, arg)


def theta_order_check(theta1: Callable, theta2: Callable, grid: ControlGrid, t_samples) -> float:
    """Max of ``theta1 - theta2`` over sampled ``(t, u)`` (``<= 0`` means ``theta1 <= theta2``)."""
    return max(theta1(float(t), u) - theta2(float(t), u)
               for t in np.atleast_1d(t_samples) for u in grid.atoms)
