"""Policy search over relaxed and strict controls, strictification and convexity probing.

All candidates inside one optimisation run are scored on the same pre-drawn noise
(common random numbers), so the search works on a fixed sample-average surface; the
returned estimate is recomputed on a fresh evaluation seed.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
import numpy as np

from .control import (ControlGrid, PathwiseStrictControl, RelaxedControl, StrictControl,
                      delta_embedding, resample_weights)
from .cost import InfiniteCostError, evaluate_cost, path_costs, relaxed_running_cost
from .dynamics import (ControlPlan, PathBundle, _sigma_sq, draw_noise, mean_stderr, relaxed_drift,
                       simulate_csve)

log = logging.getLogger(__name__)

__all__ = [
    "OptimizerConfig",
    "OptimizeResult",
    "CostSurface",
    "SelectionReport",
    "StrictificationError",
    "ConvexityReport",
    "softmax",
    "simplex_mesh",
    "optimize_relaxed",
    "optimize_strict",
    "strictify",
    "selection_cost",
    "jensen_gaps",
    "paired_evaluation",
    "convexity_probe",
]

METHODS = ("softmax_gradient", "cross_entropy", "exhaustive")
EXHAUSTIVE_MAX = 10 ** 6
ADAM_B1, ADAM_B2 = 0.9, 0.999


@dataclass(frozen=True)
class OptimizerConfig:
    method: str
    iterations: int
    step_size: float
    restarts: int
    crn_seed: int
    fd_step: float
    eval_seed: int
    eval_M: int | None = None
    exhaustive_limit: int = 1000
    mesh: int = 10
    population: int = 24
    elite: int = 6
    warm_logit: float = 6.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        for name in ("iterations", "restarts", "mesh", "population", "elite"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.step_size <= 0 or self.fd_step <= 0:
            raise ValueError("step_size and fd_step must be positive")
        if self.elite > self.population:
            raise ValueError("elite cannot exceed population")


@dataclass
class OptimizeResult:
    control: RelaxedControl | StrictControl
    J: float
    stderr: float
    train_J: float
    train_stderr: float
    trace: list[float]
    stagnated: bool
    evaluations: int
    restarts: int
    seeds: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"J": self.J, "stderr": self.stderr, "train_J": self.train_J,
                "train_stderr": self.train_stderr, "iterations": len(self.trace),
                "evaluations": self.evaluations, "restarts": self.restarts,
                "stagnated": self.stagnated, "seeds": dict(self.seeds)}


class CostSurface:
    """Sample-average cost on frozen noise; infinite running cost rejects the candidate."""

    def __init__(self, scenario, seed: int, M: int | None = None):
        self.scenario = scenario
        self.cfg = scenario.sim.replace(seed=seed, M=M or scenario.sim.M)
        self.noise = draw_noise(self.cfg)
        self.evaluations = 0

    @property
    def time_grid(self) -> np.ndarray:
        return self.cfg.time_grid

    def __call__(self, control) -> tuple[float, float]:
        sc = self.scenario
        self.evaluations += 1
        try:
            return evaluate_cost(sc.kernel, sc.coeffs, sc.cost, control, self.cfg, noise=self.noise)
        except InfiniteCostError:
            return math.inf, math.nan


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def simplex_mesh(n_atoms: int, resolution: int) -> np.ndarray:
    """All probability vectors with entries in ``{0, 1/q, ..., 1}``, lexicographic order."""
    rows = []
    for combo in itertools.product(range(resolution + 1), repeat=n_atoms - 1):
        s = sum(combo)
        if s <= resolution:
            rows.append(list(combo) + [resolution - s])
    return np.array(rows, dtype=float) / resolution


def _fresh_estimate(scenario, opt: OptimizerConfig, control) -> tuple[float, float]:
    cfg = scenario.sim.replace(seed=opt.eval_seed, M=opt.eval_M or scenario.sim.M)
    sc = scenario
    return evaluate_cost(sc.kernel, sc.coeffs, sc.cost, control, cfg)


class _Tracker:
    def __init__(self):
        self.best = math.inf
        self.best_se = math.nan
        self.best_control = None
        self.trace: list[float] = []
        self.improvements = 0

    def offer(self, J, se, control, initial=False) -> bool:
        if J < self.best:
            if not initial and self.best_control is not None:
                self.improvements += 1
            self.best, self.best_se, self.best_control = J, se, control
            return True
        return False

    def tick(self):
        self.trace.append(self.best)


def optimize_relaxed(scenario, opt: OptimizerConfig | None = None,
                     warm_start: StrictControl | RelaxedControl | None = None) -> OptimizeResult:
    """Search the relaxed class; rows are softmax-parametrised per cell.

    ``softmax_gradient`` runs central finite-difference gradients on the logits with Adam
    steps of size ``step_size`` and restarts (uniform start, warm start when given, then random starts);
    ``cross_entropy`` runs a Gaussian cross-entropy search on the logits;
    ``exhaustive`` enumerates a simplex mesh per cell.  The warm start itself is scored
    exactly, so the relaxed result never loses to it on the training seed.
    """
    opt = opt or scenario.optimizer
    surface = CostSurface(scenario, opt.crn_seed)
    t = surface.time_grid
    grid = scenario.grid
    N, A = len(t) - 1, grid.n_atoms
    track = _Tracker()

    def make(logits):
        return RelaxedControl(t, softmax(logits), grid)

    def score(logits):
        return surface(make(logits))[0]

    warm_logits = None
    if warm_start is not None:
        ws = delta_embedding(warm_start) if isinstance(warm_start, StrictControl) else warm_start
        rows = resample_weights(ws, t)
        cand = RelaxedControl(t, rows, grid)
        J, se = surface(cand)
        track.offer(J, se, cand, initial=True)
        with np.errstate(divide="ignore"):
            warm_logits = np.where(rows > 0, opt.warm_logit * rows, 0.0)

    rng = np.random.default_rng([opt.crn_seed, 0xC0DE])
    if opt.method == "exhaustive":
        mesh = simplex_mesh(A, opt.mesh)
        total = len(mesh) ** N
        if total > EXHAUSTIVE_MAX:
            raise ValueError(f"weight mesh has {total} candidates (> {EXHAUSTIVE_MAX})")
        for combo in itertools.product(range(len(mesh)), repeat=N):
            cand = RelaxedControl(t, mesh[list(combo)], grid)
            J, se = surface(cand)
            track.offer(J, se, cand, initial=True)
        track.tick()
    elif opt.method == "softmax_gradient":
        h, lr = opt.fd_step, opt.step_size
        for r in range(opt.restarts):
            if r == 0:
                theta = np.zeros((N, A))
            elif r == 1 and warm_logits is not None:
                theta = warm_logits.copy()
            else:
                theta = rng.normal(0.0, 1.0, size=(N, A))
            cand = make(theta)
            J, se = surface(cand)
            track.offer(J, se, cand, initial=(r == 0 and warm_start is None))
            m1, m2 = np.zeros_like(theta), np.zeros_like(theta)
            for it in range(1, opt.iterations + 1):
                grad = np.zeros_like(theta)
                for i in range(N):
                    for a in range(A):
                        e = np.zeros_like(theta)
                        e[i, a] = h
                        fp, fm = score(theta + e), score(theta - e)
                        grad[i, a] = (fp - fm) / (2 * h) if math.isfinite(fp - fm) else 0.0
                m1 = ADAM_B1 * m1 + (1 - ADAM_B1) * grad
                m2 = ADAM_B2 * m2 + (1 - ADAM_B2) * grad * grad
                step = (m1 / (1 - ADAM_B1 ** it)) / (np.sqrt(m2 / (1 - ADAM_B2 ** it)) + 1e-12)
                theta = theta - lr * step
                cand = make(theta)
                J, se = surface(cand)
                track.offer(J, se, cand)
                track.tick()
    else:  # cross_entropy
        for r in range(opt.restarts):
            mean = np.zeros((N, A)) if (r != 1 or warm_logits is None) else warm_logits.copy()
            std = np.full((N, A), 2.0)
            for _ in range(opt.iterations):
                pop = mean + std * rng.normal(size=(opt.population, N, A))
                vals = []
                for th in pop:
                    cand = make(th)
                    J, se = surface(cand)
                    track.offer(J, se, cand)
                    vals.append(J)
                elite = pop[np.argsort(vals, kind="stable")[: opt.elite]]
                mean = elite.mean(axis=0)
                std = elite.std(axis=0) + 0.05
                track.tick()

    best = track.best_control
    J, se = _fresh_estimate(scenario, opt, best)
    return OptimizeResult(best, J, se, track.best, track.best_se, track.trace,
                          stagnated=track.improvements == 0 and opt.method != "exhaustive",
                          evaluations=surface.evaluations, restarts=opt.restarts,
                          seeds={"crn": opt.crn_seed, "eval": opt.eval_seed})


def optimize_strict(scenario, opt: OptimizerConfig | None = None) -> OptimizeResult:
    """Search strict controls: enumeration when ``A**N`` is small, else coordinate descent.

    Enumeration is lexicographic and keeps the first minimiser, so exact ties resolve to
    the lowest atom indices.
    """
    opt = opt or scenario.optimizer
    surface = CostSurface(scenario, opt.crn_seed)
    t = surface.time_grid
    grid = scenario.grid
    N, A = len(t) - 1, grid.n_atoms
    track = _Tracker()
    size = A ** N
    if size <= opt.exhaustive_limit or opt.method == "exhaustive":
        if size > EXHAUSTIVE_MAX:
            raise ValueError(f"{size} strict controls exceed the enumeration limit")
        for combo in itertools.product(range(A), repeat=N):
            cand = StrictControl(t, np.array(combo, dtype=np.int64), grid)
            J, se = surface(cand)
            track.offer(J, se, cand, initial=True)
        track.tick()
    else:
        for a in range(A):
            cand = StrictControl(t, np.full(N, a, dtype=np.int64), grid)
            J, se = surface(cand)
            track.offer(J, se, cand, initial=True)
        current = np.array(track.best_control.atom_index)
        for _ in range(opt.iterations):
            changed = False
            for i in range(N):
                for a in range(A):
                    if a == current[i]:
                        continue
                    trial = current.copy()
                    trial[i] = a
                    cand = StrictControl(t, trial, grid)
                    J, se = surface(cand)
                    if track.offer(J, se, cand):
                        current = trial
                        changed = True
            track.tick()
            if not changed:
                break
    best = track.best_control
    J, se = _fresh_estimate(scenario, opt, best)
    return OptimizeResult(best, J, se, track.best, track.best_se, track.trace,
                          stagnated=False, evaluations=surface.evaluations,
                          restarts=1, seeds={"crn": opt.crn_seed, "eval": opt.eval_seed})


# --------------------------------------------------------------------------
# strictification

class StrictificationError(RuntimeError):
    def __init__(self, report: "SelectionReport", threshold: float):
        super().__init__(f"selection infeasible on {report.infeasible_fraction:.2%} of cells "
                         f"(threshold {threshold:.2%}); Gamma(t, x) looks non-convex")
        self.report = report


@dataclass(eq=False)
class SelectionReport:
    """Outcome of strictification along the relaxed trajectory ``paths``.

    ``discrepancy[m, j]`` is ``|b(u) - bbar| + |sigma sigma^T(u) - target|`` at path ``m``
    and step ``j``; ``slack[j]`` is the path average of ``lbar - l(u)``.
    """

    mode: str
    control: StrictControl | PathwiseStrictControl
    discrepancy: np.ndarray
    slack: np.ndarray
    infeasible: np.ndarray
    paths: PathBundle

    @property
    def infeasible_fraction(self) -> float:
        return float(np.mean(self.infeasible)) if self.infeasible.size else 0.0

    def summary(self) -> dict:
        return {"mode": self.mode, "max_discrepancy": float(np.max(self.discrepancy)),
                "min_slack": float(np.min(self.slack)),
                "infeasible_fraction": self.infeasible_fraction}


def _targets(sc, grid, t, x, w):
    return (relaxed_drift(sc.coeffs, grid, t, x, w), _sigma_sq(sc.coeffs, grid, t, x, w),
            relaxed_running_cost(sc.cost, grid, t, x, w))


def _point_values(sc, t, x, u):
    b = np.asarray(sc.coeffs.b(t, x, u), dtype=float).reshape(len(x), -1)
    s = np.asarray(sc.coeffs.sigma(t, x, u), dtype=float).reshape(len(x), sc.coeffs.d, -1)
    S = np.einsum("bij,bkj->bik", s, s)
    lv = np.asarray(sc.cost.l(t, x, u), dtype=float).reshape(len(x))
    return b, S, lv


def _gap(b, S, b_t, S_t):
    return (np.linalg.norm(b - b_t, axis=1)
            + np.linalg.norm((S - S_t).reshape(len(S), -1), axis=1))


def strictify(relaxed: RelaxedControl, scenario, pb: PathBundle | None = None,
              mode: str | None = None) -> SelectionReport:
    """Replace a relaxed control by a strict one matching drift and diffusion.

    ``affine`` mode takes the barycentre of each row (exact when ``b`` is affine in ``u``
    and ``sigma`` is control-free); the grid is extended by the barycentres.
    ``general`` mode searches the atoms per (path, step) for the best match among atoms
    whose running cost does not exceed ``lbar`` by more than the tolerance.
    """
    cfg_s = scenario.strictify
    mode = mode or cfg_s.mode
    if pb is None:
        pb = simulate_csve(scenario.kernel, scenario.coeffs, relaxed, scenario.sim, keep=("X",))
    cfg = pb.cfg
    t = cfg.time_grid
    rows = resample_weights(relaxed, t)
    grid = relaxed.grid
    X = pb.X
    M, N = X.shape[0], cfg.N
    disc = np.zeros((M, N))
    slack = np.zeros(N)
    infeasible = np.zeros((M, N), dtype=bool)

    if mode == "affine":
        bary = rows @ grid.atoms
        ext, idx = grid.with_points(bary)
        for j in range(N):
            b_t, S_t, l_t = _targets(scenario, grid, t[j], X[:, j], rows[j])
            b, S, lv = _point_values(scenario, t[j], X[:, j], ext.atoms[idx[j]])
            disc[:, j] = _gap(b, S, b_t, S_t)
            slack[j] = float(np.mean(l_t - lv))
        control = StrictControl(t, idx, ext)
    elif mode == "general":
        chosen = np.zeros((M, N), dtype=np.int64)
        for j in range(N):
            b_t, S_t, l_t = _targets(scenario, grid, t[j], X[:, j], rows[j])
            gaps = np.empty((grid.n_atoms, M))
            costs = np.empty((grid.n_atoms, M))
            for a, u in enumerate(grid.atoms):
                b, S, lv = _point_values(scenario, t[j], X[:, j], u)
                gaps[a] = _gap(b, S, b_t, S_t)
                costs[a] = lv
            ok = costs <= l_t[None] + cfg_s.cost_tol
            masked = np.where(ok, gaps, np.inf)
            pick = np.argmin(masked, axis=0)
            fallback = np.argmin(gaps, axis=0)
            best = masked[pick, np.arange(M)]
            bad = ~np.isfinite(best) | (best > cfg_s.match_tol)
            pick = np.where(np.isfinite(best), pick, fallback)
            chosen[:, j] = pick
            disc[:, j] = gaps[pick, np.arange(M)]
            slack[j] = float(np.mean(l_t - costs[pick, np.arange(M)]))
            infeasible[:, j] = bad
        control = PathwiseStrictControl(t, chosen, grid)
    else:
        raise ValueError(f"unknown strictification mode {mode!r}")

    report = SelectionReport(mode, control, disc, slack, infeasible, pb)
    if report.infeasible_fraction > cfg_s.infeasible_fraction:
        raise StrictificationError(report, cfg_s.infeasible_fraction)
    return report


def selection_cost(report: SelectionReport, cost) -> tuple[float, float]:
    """Cost of the selected strict control along the relaxed trajectory."""
    pb = report.paths
    ctrl = report.control
    if isinstance(ctrl, StrictControl):
        plan = ControlPlan(ctrl.grid, weights=resample_weights(ctrl, pb.t))
    else:
        plan = ControlPlan(ctrl.grid, index=np.asarray(ctrl.atom_index))
    sub = PathBundle(pb.t, pb.X, None, None, pb.cfg, plan, pb.kernel, range(len(pb.X)))
    return mean_stderr(path_costs(sub, cost))


def paired_evaluation(scenario, c1, c2, cfg) -> dict:
    """Costs of two controls on the same noise, with the standard error of their difference."""
    noise = draw_noise(cfg)
    sc = scenario
    v1 = path_costs(simulate_csve(sc.kernel, sc.coeffs, c1, cfg, noise=noise, keep=("X",)), sc.cost)
    v2 = path_costs(simulate_csve(sc.kernel, sc.coeffs, c2, cfg, noise=noise, keep=("X",)), sc.cost)
    (j1, s1), (j2, s2), (d, sd) = mean_stderr(v1), mean_stderr(v2), mean_stderr(v1 - v2)
    return {"J1": j1, "se1": s1, "J2": j2, "se2": s2, "diff": d, "se_diff": sd}


def jensen_gaps(scenario, relaxed: RelaxedControl, pb: PathBundle) -> np.ndarray:
    """``lbar(t, X, pi) - l(t, X, barycentre(pi))`` for every path and step."""
    t = pb.cfg.time_grid
    rows = resample_weights(relaxed, t)
    out = np.empty((len(pb.X), pb.cfg.N))
    for j in range(pb.cfg.N):
        lbar = relaxed_running_cost(scenario.cost, relaxed.grid, t[j], pb.X[:, j], rows[j])
        u = rows[j] @ relaxed.grid.atoms
        out[:, j] = lbar - np.asarray(scenario.cost.l(t[j], pb.X[:, j], u), dtype=float).reshape(-1)
    return out


# --------------------------------------------------------------------------
# convexity probe

@dataclass
class ConvexityReport:
    violations: int
    n_pairs: int
    t: float
    x: list
    worst_gap: float
    examples: list

    def as_dict(self) -> dict:
        return {"violations": self.violations, "n_pairs": self.n_pairs, "t": self.t,
                "x": self.x, "worst_gap": self.worst_gap, "examples": self.examples[:5]}


def _fine_grid(grid: ControlGrid, n: int) -> tuple[np.ndarray, tuple[int, ...]]:
    lo, hi = grid.bounds
    k = grid.dim
    if k == 1:
        pts = np.union1d(np.linspace(lo, hi, n), grid.atoms[:, 0])
        return pts[:, None], (len(pts),)
    side = max(3, int(round(n ** (1.0 / k))))
    axes = np.linspace(lo, hi, side)
    mesh = np.stack(np.meshgrid(*([axes] * k), indexing="ij"), axis=-1)
    return mesh.reshape(-1, k), (side,) * k


def _max_adjacent(values: np.ndarray, shape: tuple[int, ...]) -> float:
    v = values.reshape(shape + (-1,))
    worst = 0.0
    for ax in range(len(shape)):
        d = np.diff(v, axis=ax)
        if d.size:
            worst = max(worst, float(np.max(np.linalg.norm(d, axis=-1))))
    return worst


def convexity_probe(scenario, t: float, x, n_pairs: int, seed: int = 0,
                    fine: int = 2001, tol: float = 1e-6) -> ConvexityReport:
    """Count sampled convex combinations of ``(sigma sigma^T, b, l)`` points outside Gamma(t, x).

    Pairs of atoms and mixing weights are drawn at random; membership is searched on a
    fine grid of ``U``, with a slack equal to the largest jump of the maps between
    neighbouring fine-grid points.  Zero violations is evidence, not proof, of convexity.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    grid = scenario.grid
    xs = np.asarray(x, dtype=float).reshape(1, -1)

    def lift(points):
        rows = []
        for u in points:
            b, S, lv = _point_values(scenario, t, xs, u)
            rows.append(np.concatenate([S.ravel(), b.ravel(), lv]))
        return np.array(rows)

    fine_pts, shape = _fine_grid(grid, fine)
    F = lift(fine_pts)
    nsb = F.shape[1] - 1
    slack_match = _max_adjacent(F[:, :nsb], shape)
    slack_cost = _max_adjacent(F[:, nsb:], shape)
    P = lift(grid.atoms)

    rng = np.random.default_rng(seed)
    violations, worst, examples = 0, 0.0, []
    for _ in range(n_pairs):
        a, c = rng.integers(grid.n_atoms, size=2)
        lam = float(rng.uniform(0.0, 1.0))
        target = lam * P[a] + (1 - lam) * P[c]
        gap = np.linalg.norm(F[:, :nsb] - target[:nsb], axis=1)
        ok = gap <= slack_match + tol
        excess = F[ok, nsb] - target[nsb] if np.any(ok) else np.array([np.inf])
        best = float(np.min(excess))
        if best > slack_cost + tol:
            violations += 1
            worst = max(worst, best)
            examples.append({"atoms": [int(a), int(c)], "lambda": lam, "cost_excess": best})
    return ConvexityReport(violations, n_pairs, float(t), xs.ravel().tolist(), worst, examples)
