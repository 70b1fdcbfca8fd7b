"""Simulation of controlled stochastic Volterra equations.

The state solves ``X_t = x0(t) + int K(t-s) b ds + int K(t-s) sigma dW`` on a uniform
grid.  Every past cell enters through the cell average of the kernel; the most recent
cell, where a singular kernel concentrates its mass, is integrated exactly: the
stochastic integral ``int_{t_j}^{t_{j+1}} K(t_{j+1} - s) dW_s`` is drawn jointly with
``dW_j`` as a correlated Gaussian pair.  With ``near_cell="average"`` the plain
left-point scheme is used for that cell too.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid

from . import rng
from .control import (ControlGrid, PathwiseStrictControl, RelaxedControl, StrictControl,
                      resample_weights)
from .kernel import ConstantKernel, ExponentBudget, Kernel, cell_averages

log = logging.getLogger(__name__)

__all__ = [
    "CoefficientSet",
    "SimConfig",
    "PathBundle",
    "ControlPlan",
    "Noise",
    "SimulationError",
    "CoefficientError",
    "growth_check",
    "relaxed_drift",
    "relaxed_diffusion",
    "psd_sqrt",
    "draw_noise",
    "sample_relaxed",
    "simulate_csve",
    "integrated_residual",
    "moment_sup",
    "increment_moments",
    "holder_estimate",
    "mean_stderr",
]

PSD_CLAMP = 1e-14
ASYM_TOL = 1e-10


class SimulationError(ArithmeticError):
    """Non-finite state; carries the global path index and the step."""

    def __init__(self, path: int, step: int):
        super().__init__(f"non-finite state on path {path} at step {step}")
        self.path = path
        self.step = step


class CoefficientError(ValueError):
    pass


@dataclass(frozen=True)
class CoefficientSet:
    """Drift ``b(t, x, u) -> (B, d)`` and diffusion ``sigma(t, x, u) -> (B, d, d')``.

    ``x`` is a batch of states of shape ``(B, d)`` and ``u`` a single atom of shape
    ``(k,)``.  ``c_lin`` and ``theta1(t, u)`` are the linear-growth data.
    """

    b: Callable
    sigma: Callable
    c_lin: float
    theta1: Callable
    d: int = 1
    d_noise: int = 1
    control_free_sigma: bool = False


@dataclass(frozen=True)
class SimConfig:
    T: float
    N: int
    M: int
    seed: int
    x0: Callable = field(repr=False)
    d: int = 1
    d_noise: int = 1
    near_cell: str = "exact"
    chunk: int = 4096
    threads: int = 1

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.N < 1 or self.M < 1:
            raise ValueError("N and M must be at least 1")
        if self.near_cell not in ("exact", "average"):
            raise ValueError("near_cell must be 'exact' or 'average'")
        x0 = self.x0_values()
        if not np.all(np.isfinite(x0)):
            raise ValueError("x0 must be finite on the grid")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def time_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    def x0_values(self) -> np.ndarray:
        v = np.asarray(self.x0(self.time_grid), dtype=float)
        return v.reshape(self.N + 1, self.d)

    def replace(self, **changes) -> "SimConfig":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class ControlPlan:
    """Control resolved on the simulation grid: shared rows or per-path atom indices."""

    grid: ControlGrid
    weights: np.ndarray | None = None
    index: np.ndarray | None = None

    @classmethod
    def build(cls, control, cfg: SimConfig) -> "ControlPlan":
        t = cfg.time_grid
        if isinstance(control, PathwiseStrictControl):
            if not np.allclose(control.time_grid, t, rtol=0, atol=1e-12 * cfg.T):
                raise ValueError("pathwise controls must live on the simulation grid")
            if control.atom_index.shape[0] != cfg.M:
                raise ValueError("pathwise control must have one row per path")
            return cls(control.grid, index=np.asarray(control.atom_index))
        if isinstance(control, (RelaxedControl, StrictControl)):
            if abs(control.time_grid[-1] - cfg.T) > 1e-12 * cfg.T:
                raise ValueError("control horizon differs from T")
            return cls(control.grid, weights=resample_weights(control, t))
        raise TypeError(f"unsupported control type {type(control).__name__}")

    def rows(self, j: int, paths: slice) -> tuple[np.ndarray | None, np.ndarray | None]:
        if self.weights is not None:
            return self.weights[j], None
        return None, self.index[paths, j]


@dataclass(eq=False)
class PathBundle:
    """Simulated paths; arrays not requested via ``keep`` are ``None``."""

    t: np.ndarray
    X: np.ndarray | None
    dW: np.ndarray | None
    Z: np.ndarray | None
    cfg: SimConfig
    plan: ControlPlan
    kernel: Kernel
    paths: range

    @property
    def x0(self) -> np.ndarray:
        return self.cfg.x0_values()


@dataclass(frozen=True, eq=False)
class Noise:
    """Pre-drawn standard normals ``(M, N, 2 d')`` for common random numbers."""

    xi: np.ndarray
    seed: int
    paths: range


def growth_check(coeffs: CoefficientSet, grid: ControlGrid, t_samples, x_samples) -> float:
    """Max of ``|b| + |sigma| - c_lin |x| - theta1(t, u)`` over the samples (<= 0 passes)."""
    xs = np.asarray(x_samples, dtype=float).reshape(-1, coeffs.d)
    worst = -math.inf
    for t in np.atleast_1d(t_samples):
        for u in grid.atoms:
            bb = np.linalg.norm(np.asarray(coeffs.b(float(t), xs, u)).reshape(len(xs), -1), axis=1)
            ss = np.linalg.norm(np.asarray(coeffs.sigma(float(t), xs, u)).reshape(len(xs), -1), axis=1)
            bound = coeffs.c_lin * np.linalg.norm(xs, axis=1) + coeffs.theta1(float(t), u)
            worst = max(worst, float(np.max(bb + ss - bound)))
    return worst


def _batch(x, d) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(-1, d)


def _finite(v: np.ndarray, what: str, t: float, a: int) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise CoefficientError(f"{what} not finite at t={t!r}, atom {a}")
    return v


def relaxed_drift(coeffs: CoefficientSet, grid: ControlGrid, t: float, x, weights_row) -> np.ndarray:
    """``sum_a w_a b(t, x, u_a)``; atoms with zero weight are skipped."""
    xb = _batch(x, coeffs.d)
    w = np.asarray(weights_row, dtype=float)
    out = np.zeros_like(xb)
    for a in np.flatnonzero(w):
        out += w[a] * _finite(np.asarray(coeffs.b(t, xb, grid.atoms[a]), dtype=float).reshape(xb.shape),
                              "drift", t, a)
    return out


def _sigma_sq(coeffs, grid, t, xb, w) -> np.ndarray:
    A = np.zeros((len(xb), coeffs.d, coeffs.d))
    for a in np.flatnonzero(w):
        s = np.asarray(coeffs.sigma(t, xb, grid.atoms[a]), dtype=float).reshape(len(xb), coeffs.d, -1)
        _finite(s, "diffusion", t, a)
        A += w[a] * np.einsum("bij,bkj->bik", s, s)
    return A


def psd_sqrt(A: np.ndarray) -> np.ndarray:
    """Principal square root of a batch of symmetric PSD matrices ``(B, d, d)``."""
    A = np.asarray(A, dtype=float)
    asym = np.max(np.abs(A - np.swapaxes(A, -1, -2))) if A.size else 0.0
    if asym > ASYM_TOL:
        raise CoefficientError(f"sigma sigma^T is not symmetric (deviation {asym:.3g})")
    if A.shape[-1] == 1:
        return np.sqrt(np.where(A > PSD_CLAMP, A, 0.0))
    lam, V = np.linalg.eigh(0.5 * (A + np.swapaxes(A, -1, -2)))
    lam = np.where(lam > PSD_CLAMP, lam, 0.0)
    return np.einsum("bij,bj,bkj->bik", V, np.sqrt(lam), V)


def relaxed_diffusion(coeffs: CoefficientSet, grid: ControlGrid, t: float, x, weights_row) -> np.ndarray:
    """Principal PSD root of ``sum_a w_a sigma sigma^T(t, x, u_a)``, shape ``(B, d, d)``."""
    xb = _batch(x, coeffs.d)
    return psd_sqrt(_sigma_sq(coeffs, grid, t, xb, np.asarray(weights_row, dtype=float)))


def _diffusion_factor(coeffs, grid, t, xb, w) -> np.ndarray:
    # Dirac rows keep sigma(u) itself, a valid square root that makes strict
    # controls run plain Euler-Maruyama-type updates.
    nz = np.flatnonzero(w)
    if len(nz) == 1:
        a = nz[0]
        s = np.asarray(coeffs.sigma(t, xb, grid.atoms[a]), dtype=float)
        return _finite(s.reshape(len(xb), coeffs.d, coeffs.d_noise), "diffusion", t, a)
    if coeffs.d_noise != coeffs.d:
        raise CoefficientError("relaxed (non-Dirac) rows need d' = d")
    return psd_sqrt(_sigma_sq(coeffs, grid, t, xb, w))


def sample_relaxed(control, cfg: SimConfig, seed: int) -> PathwiseStrictControl:
    """Draw ``u ~ pi_t`` independently per (path, step): the sampling cross-check of averaging.

    Atoms are drawn by inverse CDF from a counter-based stream keyed by ``(seed, path)``,
    separate from the Brownian draws when ``seed`` differs from the simulation seed.
    """
    plan = ControlPlan.build(control, cfg)
    if plan.weights is None:
        raise ValueError("control is already pathwise")
    cdf = np.cumsum(plan.weights, axis=1)
    cdf[:, -1] = 1.0
    U = rng.uniforms(seed, range(cfg.M), cfg.N)
    idx = np.empty((cfg.M, cfg.N), dtype=np.int64)
    for j in range(cfg.N):
        idx[:, j] = np.minimum(np.searchsorted(cdf[j], U[:, j], side="right"),
                               plan.grid.n_atoms - 1)
    return PathwiseStrictControl(cfg.time_grid, idx, plan.grid)


def draw_noise(cfg: SimConfig, seed: int | None = None, paths: range | None = None) -> Noise:
    seed = cfg.seed if seed is None else seed
    paths = range(cfg.M) if paths is None else paths
    return Noise(rng.normals(seed, paths, cfg.N, 2 * cfg.d_noise), seed, paths)


def _near_cell_std(k: Kernel, dt: float, kappa0: float) -> float:
    if isinstance(k, ConstantKernel):
        return 0.0
    var = k.square_integral(dt) - kappa0 * kappa0 * dt
    return math.sqrt(var) if var > 0 else 0.0


def _simulate_chunk(k, coeffs, plan, cfg, kappa, c_near, x0v, xi, paths: slice, keep):
    B = xi.shape[0]
    N, d, dp = cfg.N, cfg.d, cfg.d_noise
    dt = cfg.dt
    t = cfg.time_grid
    dW = np.sqrt(dt) * xi[:, :, :dp]
    perp = xi[:, :, dp:]
    X = np.empty((B, N + 1, d))
    Z = np.zeros((B, N + 1, d))
    X[:, 0] = x0v[0]
    incr = np.empty((N, B * d))
    krev = np.ascontiguousarray(kappa[::-1])
    constant = isinstance(k, ConstantKernel)
    exact_near = cfg.near_cell == "exact" and c_near > 0
    for j in range(N):
        x = X[:, j]
        w, idx = plan.rows(j, paths)
        if w is not None:
            drift = relaxed_drift(coeffs, plan.grid, t[j], x, w)
            sig = _diffusion_factor(coeffs, plan.grid, t[j], x, w)
        else:
            drift = np.empty((B, d))
            sig = np.empty((B, d, dp))
            for a in np.unique(idx):
                m = idx == a
                one = np.zeros(plan.grid.n_atoms)
                one[a] = 1.0
                drift[m] = relaxed_drift(coeffs, plan.grid, t[j], x[m], one)
                sig[m] = _diffusion_factor(coeffs, plan.grid, t[j], x[m], one)
        step = drift * dt + np.einsum("bij,bj->bi", sig, dW[:, j])
        Z[:, j + 1] = Z[:, j] + step
        if constant:
            X[:, j + 1] = x0v[j + 1] + kappa[0] * Z[:, j + 1]
        else:
            incr[j] = step.reshape(-1)
            # einsum keeps the summation order per path, so any chunking gives identical bits
            conv = np.einsum("l,lb->b", krev[N - 1 - j:], incr[: j + 1])
            X[:, j + 1] = x0v[j + 1] + conv.reshape(B, d)
            if exact_near:
                X[:, j + 1] += c_near * np.einsum("bij,bj->bi", sig, perp[:, j])
        if not np.all(np.isfinite(X[:, j + 1])):
            bad = int(np.flatnonzero(~np.all(np.isfinite(X[:, j + 1]), axis=1))[0])
            raise SimulationError(path=paths.start + bad, step=j + 1)
    return (X if "X" in keep else None, dW if "dW" in keep else None, Z if "Z" in keep else None)


def simulate_csve(k: Kernel, coeffs: CoefficientSet, control, cfg: SimConfig,
                  noise: Noise | None = None, paths: range | None = None,
                  keep: Sequence[str] = ("X", "dW", "Z")) -> PathBundle:
    """Simulate ``len(paths)`` paths (default all ``cfg.M``) under a strict or relaxed control.

    Paths are processed in chunks of ``cfg.chunk``; draws are keyed by the global path
    index, so any partition of the paths reproduces the same numbers.  Passing
    ``noise`` reuses pre-drawn normals (common random numbers).
    """
    if (coeffs.d, coeffs.d_noise) != (cfg.d, cfg.d_noise):
        raise ValueError("coefficient and simulation dimensions differ")
    if k.dim not in (1, cfg.d):
        raise ValueError("kernel dimension must be 1 or d")
    if noise is not None:
        paths = noise.paths if paths is None else paths
        if paths != noise.paths:
            raise ValueError("noise was drawn for different paths")
    paths = range(cfg.M) if paths is None else paths
    plan = control if isinstance(control, ControlPlan) else ControlPlan.build(control, cfg)
    kappa = cell_averages(k, cfg.dt, cfg.N)
    c_near = _near_cell_std(k, cfg.dt, kappa[0])
    x0v = cfg.x0_values()
    keep = tuple(keep)

    starts = list(range(0, len(paths), cfg.chunk))

    def run(s):
        sub = paths[s: s + cfg.chunk]
        if noise is not None:
            xi = noise.xi[s: s + cfg.chunk]
        else:
            xi = rng.normals(cfg.seed, sub, cfg.N, 2 * cfg.d_noise)
        return _simulate_chunk(k, coeffs, plan, cfg, kappa, c_near, x0v, xi,
                               slice(sub.start, sub.stop), keep)

    if cfg.threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]

    def cat(i):
        return np.concatenate([p[i] for p in parts]) if parts and parts[0][i] is not None else None

    return PathBundle(t=cfg.time_grid, X=cat(0), dW=cat(1), Z=cat(2), cfg=cfg, plan=plan,
                      kernel=k, paths=paths)


# --------------------------------------------------------------------------
# estimators

def mean_stderr(values: np.ndarray) -> tuple[float, float]:
    """Sample mean and its jackknife standard error (closed form for the mean)."""
    v = np.asarray(values, dtype=float)
    n = len(v)
    mean = float(np.mean(v))
    if n < 2:
        return mean, math.nan
    loo = (np.sum(v) - v) / (n - 1)
    se = math.sqrt((n - 1) / n * float(np.sum((loo - np.mean(loo)) ** 2)))
    return mean, se


def _norm(X: np.ndarray) -> np.ndarray:
    return np.abs(X[..., 0]) if X.shape[-1] == 1 else np.linalg.norm(X, axis=-1)


def integrated_residual(pb: PathBundle, k: Kernel) -> np.ndarray:
    """Path average of ``|int_0^t X - int_0^t x0 - int_0^t K(t - s) Z_s ds|`` per grid time."""
    if pb.X is None or pb.Z is None:
        raise ValueError("residual needs X and Z")
    cfg = pb.cfg
    dt, N = cfg.dt, cfg.N
    kappa = cell_averages(k, dt, N)
    L = np.zeros((N + 1, N + 1))
    for i in range(1, N + 1):
        L[i, :i] = kappa[i - 1::-1] * dt
    intX = cumulative_trapezoid(pb.X, pb.t, axis=1, initial=0.0)
    int0 = cumulative_trapezoid(pb.x0, pb.t, axis=0, initial=0.0)
    conv = np.einsum("ij,mjd->mid", L, pb.Z)
    return np.mean(_norm(intX - int0[None] - conv), axis=0)


def moment_sup(pb: PathBundle, m: float, budget: ExponentBudget | None = None) -> tuple[float, float]:
    """``max_t mean |X_t|^m`` and its jackknife standard error."""
    if m < 1:
        raise ValueError("m must be at least 1")
    if budget is not None and (not budget.feasible or m > budget.m):
        warnings.warn(f"m={m} outside the feasible moment range (m <= {budget.m:.4g})", stacklevel=2)
    V = _norm(pb.X) ** m
    M = V.shape[0]
    S = V.sum(axis=0)
    value = float(np.max(S / M))
    if M < 2:
        return value, math.nan
    loo = np.empty(M)
    for s in range(0, M, 2048):
        loo[s: s + 2048] = np.max((S[None] - V[s: s + 2048]) / (M - 1), axis=1)
    se = math.sqrt((M - 1) / M * float(np.sum((loo - loo.mean()) ** 2)))
    return value, se


def increment_moments(pb: PathBundle, m: float, lags: Sequence[int]) -> np.ndarray:
    """Mean of ``|X_{t+h} - X_t|^m`` over paths and all anchors, one value per lag (in steps)."""
    X = pb.X
    out = []
    for L in lags:
        if not 1 <= L <= pb.cfg.N:
            raise ValueError(f"lag {L} outside the grid")
        out.append(float(np.mean(_norm(X[:, L:] - X[:, :-L]) ** m)))
    return np.array(out)


def holder_estimate(pb: PathBundle, m: float, lag_set: Sequence[int]) -> float:
    """Increment-scaling exponent ``s/m`` from the log-log slope of increment moments."""
    lags = np.asarray(sorted(set(int(l) for l in lag_set)))
    if len(lags) < 2 or lags[-1] < 10 * lags[0]:
        raise ValueError("lags must span at least one decade")
    mom = increment_moments(pb, m, lags)
    if np.any(mom <= 0) or not np.all(np.isfinite(mom)):
        raise ValueError("degenerate regression: zero or non-finite increment moments")
    slope, _ = np.polyfit(np.log(lags * pb.cfg.dt), np.log(mom), 1)
    return float(slope) / m
