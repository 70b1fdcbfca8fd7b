"""Strict and relaxed controls on a finite atom grid, plus Young-measure diagnostics.

A relaxed control stores one probability vector per time cell; the induced Young
measure is ``mu(du, dt) = pi_t(du) dt``.  Strict controls are atom indices per cell and
embed as Dirac rows.  The stable topology is probed through a finite bank of test
integrals; the bank used is always part of the returned diagnostics.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ControlGrid",
    "RelaxedControl",
    "StrictControl",
    "PathwiseStrictControl",
    "TestFunction",
    "delta_embedding",
    "integrate_against",
    "barycenter",
    "default_bank",
    "stable_distance",
    "chattering_approximation",
    "tightness_functional",
    "resample_weights",
    "uniform_control",
    "constant_control",
    "write_relaxed_csv",
    "read_relaxed_csv",
    "write_strict_csv",
    "read_strict_csv",
]

ROW_SUM_TOL = 1e-12
_SLIVER = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=a.dtype if a.dtype.kind in "iu" else float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Finite control atoms ``u_1..u_A`` inside the box ``[lo, hi]^k``."""

    atoms: np.ndarray
    bounds: tuple[float, float]

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.ndim != 2 or atoms.shape[0] < 1:
            raise ValueError("control grid needs at least one atom")
        lo, hi = (float(b) for b in self.bounds)
        if not lo <= hi:
            raise ValueError("bounds must satisfy lo <= hi")
        if np.any(atoms < lo) or np.any(atoms > hi):
            raise ValueError("every atom must lie inside the bounds")
        if len(np.unique(atoms, axis=0)) != len(atoms):
            raise ValueError("atoms must be pairwise distinct")
        object.__setattr__(self, "atoms", _frozen(atoms))
        object.__setattr__(self, "bounds", (lo, hi))

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def subset(self, indices: Sequence[int]) -> "ControlGrid":
        return ControlGrid(self.atoms[list(indices)], self.bounds)

    def with_points(self, points: np.ndarray) -> tuple["ControlGrid", np.ndarray]:
        """Grid extended by ``points`` (deduplicated); returns it with the index of each point."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        atoms = [tuple(a) for a in self.atoms]
        lookup = {a: i for i, a in enumerate(atoms)}
        idx = np.empty(len(pts), dtype=np.int64)
        for j, p in enumerate(map(tuple, pts)):
            if p not in lookup:
                lookup[p] = len(atoms)
                atoms.append(p)
            idx[j] = lookup[p]
        return ControlGrid(np.array(atoms), self.bounds), idx

    def __eq__(self, other):
        return (isinstance(other, ControlGrid) and self.bounds == other.bounds
                and np.array_equal(self.atoms, other.atoms))

    __hash__ = None


def _check_time_grid(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if t.ndim != 1 or len(t) < 2 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
        raise ValueError("time grid must start at 0 and increase strictly")
    return _frozen(t)


@dataclass(frozen=True, eq=False)
class RelaxedControl:
    """Row ``i`` of ``weights`` is the probability vector used on ``[t_i, t_{i+1})``."""

    time_grid: np.ndarray
    weights: np.ndarray
    grid: ControlGrid

    def __post_init__(self):
        t = _check_time_grid(self.time_grid)
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(t) - 1, self.grid.n_atoms):
            raise ValueError(f"weights must have shape {(len(t) - 1, self.grid.n_atoms)}, got {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        dev = np.max(np.abs(w.sum(axis=1) - 1.0))
        if dev > ROW_SUM_TOL:
            raise ValueError(f"every row must sum to 1 (max deviation {dev:.3g})")
        object.__setattr__(self, "time_grid", t)
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def n_cells(self) -> int:
        return len(self.time_grid) - 1

    @property
    def T(self) -> float:
        return float(self.time_grid[-1])

    def entropy(self) -> np.ndarray:
        w = self.weights
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(w > 0, -w * np.log(w), 0.0)
        return terms.sum(axis=1)

    def is_dirac(self) -> np.ndarray:
        return np.count_nonzero(self.weights, axis=1) == 1


@dataclass(frozen=True, eq=False)
class StrictControl:
    """Piecewise-constant control: atom ``atom_index[i]`` on ``[t_i, t_{i+1})``."""

    time_grid: np.ndarray
    atom_index: np.ndarray
    grid: ControlGrid

    def __post_init__(self):
        t = _check_time_grid(self.time_grid)
        idx = np.asarray(self.atom_index)
        if idx.shape != (len(t) - 1,) or (idx.size and idx.dtype.kind not in "iu"):
            raise ValueError("atom_index must be an integer array with one entry per cell")
        if np.any(idx < 0) or np.any(idx >= self.grid.n_atoms):
            raise ValueError("atom index out of range")
        object.__setattr__(self, "time_grid", t)
        object.__setattr__(self, "atom_index", _frozen(idx.astype(np.int64)))

    @property
    def n_cells(self) -> int:
        return len(self.time_grid) - 1

    def values(self) -> np.ndarray:
        return self.grid.atoms[self.atom_index]

    def at(self, t) -> np.ndarray:
        """Atom indices active at times ``t`` (right-continuous)."""
        i = np.searchsorted(self.time_grid, t, side="right") - 1
        return self.atom_index[np.clip(i, 0, self.n_cells - 1)]


@dataclass(frozen=True, eq=False)
class PathwiseStrictControl:
    """Strict control chosen per (path, step): ``atom_index`` has shape ``(M, N)``."""

    time_grid: np.ndarray
    atom_index: np.ndarray
    grid: ControlGrid

    def __post_init__(self):
        t = _check_time_grid(self.time_grid)
        idx = np.asarray(self.atom_index, dtype=np.int64)
        if idx.ndim != 2 or idx.shape[1] != len(t) - 1:
            raise ValueError("pathwise atom_index must have shape (M, N)")
        if np.any(idx < 0) or np.any(idx >= self.grid.n_atoms):
            raise ValueError("atom index out of range")
        object.__setattr__(self, "time_grid", t)
        object.__setattr__(self, "atom_index", _frozen(idx))


def uniform_control(grid: ControlGrid, time_grid) -> RelaxedControl:
    t = np.asarray(time_grid, dtype=float)
    w = np.full((len(t) - 1, grid.n_atoms), 1.0 / grid.n_atoms)
    return RelaxedControl(t, w, grid)


def constant_control(grid: ControlGrid, time_grid, index: int) -> StrictControl:
    t = np.asarray(time_grid, dtype=float)
    return StrictControl(t, np.full(len(t) - 1, index, dtype=np.int64), grid)


def delta_embedding(s: StrictControl) -> RelaxedControl:
    w = np.zeros((s.n_cells, s.grid.n_atoms))
    w[np.arange(s.n_cells), s.atom_index] = 1.0
    return RelaxedControl(s.time_grid, w, s.grid)


def _as_relaxed(mu) -> RelaxedControl:
    return delta_embedding(mu) if isinstance(mu, StrictControl) else mu


def _evaluate_on_grid(f: Callable, t: np.ndarray, atoms: np.ndarray) -> np.ndarray:
    """``F[i, a] = f(t_i, u_a)``; tries a broadcast call before looping."""
    n, A = len(t), len(atoms)
    try:
        with np.errstate(all="ignore"):
            out = np.asarray(f(t[:, None], atoms[None, :, :]), dtype=float)
        return np.array(np.broadcast_to(out, (n, A)))
    except Exception:
        pass
    F = np.empty((n, A))
    for i in range(n):
        for a in range(A):
            F[i, a] = float(np.squeeze(f(float(t[i]), atoms[a])))
    return F


def _overlap(time_grid: np.ndarray, D: tuple[float, float]) -> np.ndarray:
    lo, hi = D
    left, right = time_grid[:-1], time_grid[1:]
    return np.clip(np.minimum(right, hi) - np.maximum(left, lo), 0.0, None)


def integrate_against(mu, f: Callable, D: tuple[float, float] | None = None) -> float:
    """``int_{U x D} f(t, u) mu(du, dt)`` with left-endpoint time evaluation.

    ``f`` receives ``t`` and ``u`` where ``u`` carries the control coordinates on its
    last axis; cells cut by ``D`` contribute pro rata.
    """
    mu = _as_relaxed(mu)
    t = mu.time_grid
    D = (0.0, mu.T) if D is None else (float(D[0]), float(D[1]))
    if not 0.0 <= D[0] <= D[1] <= mu.T * (1 + 1e-12):
        raise ValueError(f"interval {D} is not inside [0, {mu.T}]")
    F = _evaluate_on_grid(f, t[:-1], mu.grid.atoms)
    if not np.all(np.isfinite(F)):
        i, a = np.argwhere(~np.isfinite(F))[0]
        raise ValueError(f"test function not finite at t={t[i]!r}, atom {a}")
    lengths = _overlap(t, D)
    return float(np.sum(lengths * np.sum(mu.weights * F, axis=1)))


def barycenter(mu, i: int) -> np.ndarray:
    mu = _as_relaxed(mu)
    return mu.weights[i] @ mu.grid.atoms


@dataclass(frozen=True)
class TestFunction:
    """Named entry of the test bank: integrand ``f`` over the time window ``D``."""

    name: str
    f: Callable
    D: tuple[float, float]


def _bank_functions():
    return {
        "1": lambda t, u: np.ones(np.broadcast_shapes(np.shape(t), np.shape(u)[:-1])),
        "u": lambda t, u: np.sum(u, axis=-1),
        "u^2": lambda t, u: np.sum(u * u, axis=-1),
        "sin(u)": lambda t, u: np.sum(np.sin(u), axis=-1),
        "cos(t)u": lambda t, u: np.cos(t) * np.sum(u, axis=-1),
    }


def default_bank(T: float, depth: int = 3) -> list[TestFunction]:
    """Five integrands times the dyadic windows of ``[0, T]`` down to ``depth``."""
    bank = []
    for name, f in _bank_functions().items():
        for level in range(depth + 1):
            n = 2 ** level
            for j in range(n):
                D = (T * j / n, T * (j + 1) / n)
                bank.append(TestFunction(f"{name}@[{j}/{n},{j + 1}/{n}]", f, D))
    return bank


def common_refinement(*grids: np.ndarray) -> np.ndarray:
    pts = np.unique(np.concatenate(grids))
    T = pts[-1]
    keep = np.concatenate([[True], np.diff(pts) > _SLIVER * T])
    return pts[keep]


def resample_weights(mu, new_grid) -> np.ndarray:
    """Time-averaged weights of ``mu`` on the cells of ``new_grid``.

    A new cell lying inside one old cell copies that row exactly, so Dirac rows stay
    exactly one-hot.
    """
    mu = _as_relaxed(mu)
    old = mu.time_grid
    new = np.asarray(new_grid, dtype=float)
    if abs(new[-1] - old[-1]) > _SLIVER * old[-1]:
        raise ValueError("time grids must share the horizon")
    if len(new) == len(old) and np.array_equal(new, old):
        return np.array(mu.weights)
    T = old[-1]
    out = np.zeros((len(new) - 1, mu.grid.n_atoms))
    for j in range(len(new) - 1):
        a, b = new[j], new[j + 1]
        lens = _overlap(old, (a, b))
        lens[lens <= _SLIVER * T] = 0.0
        nz = np.flatnonzero(lens)
        if len(nz) == 1:
            out[j] = mu.weights[nz[0]]
        else:
            out[j] = lens[nz] @ mu.weights[nz] / lens[nz].sum()
    return out


def stable_distance(mu1, mu2, bank: Iterable[TestFunction] | None = None) -> float:
    """Max over the bank of ``|int f dmu1 - int f dmu2|`` on a shared time grid."""
    mu1, mu2 = _as_relaxed(mu1), _as_relaxed(mu2)
    if mu1.grid != mu2.grid:
        raise ValueError("controls must share the control grid")
    bank = list(default_bank(mu1.T) if bank is None else bank)
    if not bank:
        raise ValueError("test bank must not be empty")
    if not np.array_equal(mu1.time_grid, mu2.time_grid):
        t = common_refinement(mu1.time_grid, mu2.time_grid)
        mu1 = RelaxedControl(t, resample_weights(mu1, t), mu1.grid)
        mu2 = RelaxedControl(t, resample_weights(mu2, t), mu2.grid)
    t = mu1.time_grid
    diff = mu1.weights - mu2.weights
    cache: dict[int, np.ndarray] = {}
    best = 0.0
    for item in bank:
        key = id(item.f)
        if key not in cache:
            cache[key] = np.sum(diff * _evaluate_on_grid(item.f, t[:-1], mu1.grid.atoms), axis=1)
        best = max(best, abs(float(np.sum(_overlap(t, item.D) * cache[key]))))
    return best


def _largest_remainder(w: np.ndarray, total: int) -> np.ndarray:
    raw = w * total
    counts = np.floor(raw + 1e-12).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        rem = raw - counts
        # stable sort: ties go to the lowest atom index
        order = np.argsort(-rem, kind="stable")
        counts[order[:short]] += 1
    elif short < 0:
        order = np.argsort(raw - counts, kind="stable")
        for a in order:
            if short == 0:
                break
            if counts[a] > 0:
                counts[a] -= 1
                short += 1
    return counts


def chattering_approximation(mu: RelaxedControl, n: int, slots: int | None = None) -> StrictControl:
    """Strict control that cycles through the atoms with the time fractions of ``mu``.

    Every cell is cut into ``n`` sub-cells of ``slots`` equal slots (default: number of
    atoms).  Slot counts per atom are apportioned over the whole cell by largest
    remainder (ties to the lowest index), spread evenly over the sub-cells, and laid out
    in atom order inside each sub-cell.  The result lives on the uniform refinement with
    ``n * slots`` slots per cell.
    """
    if n < 1:
        raise ValueError("n must be a positive integer")
    A = mu.grid.n_atoms
    slots = A if slots is None else int(slots)
    per_cell = n * slots
    if per_cell < A:
        raise ValueError(f"apportionment infeasible: {per_cell} slots per cell for {A} atoms")
    t = mu.time_grid
    fine_t = [0.0]
    idx = []
    for i in range(mu.n_cells):
        counts = _largest_remainder(mu.weights[i], per_cell)
        edges = np.floor(np.outer(np.arange(n + 1), counts) / n).astype(np.int64)
        for s in range(n):
            for a in range(A):
                idx.extend([a] * int(edges[s + 1, a] - edges[s, a]))
        fine_t.extend(t[i] + (t[i + 1] - t[i]) * np.arange(1, per_cell + 1) / per_cell)
        fine_t[-1] = t[i + 1]
    return StrictControl(np.array(fine_t), np.array(idx, dtype=np.int64), mu.grid)


def tightness_functional(mu, theta: Callable) -> float:
    """``int theta dmu`` over ``U x [0, T]``; take a max over a family for tightness."""
    mu = _as_relaxed(mu)
    F = _evaluate_on_grid(theta, mu.time_grid[:-1], mu.grid.atoms)
    if np.any(F < 0):
        raise ValueError("theta must be non-negative")
    return integrate_against(mu, theta, (0.0, mu.T))


# --------------------------------------------------------------------------
# CSV serialisation

def _fmt(x: float) -> str:
    return repr(float(x))


def write_relaxed_csv(mu: RelaxedControl, path) -> None:
    t = mu.time_grid
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_lo", "t_hi"] + [f"w_{a + 1}" for a in range(mu.grid.n_atoms)])
        for i in range(mu.n_cells):
            w.writerow([_fmt(t[i]), _fmt(t[i + 1])] + [_fmt(x) for x in mu.weights[i]])


def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _grid_from_rows(rows) -> np.ndarray:
    lo = np.array([float(r[0]) for r in rows])
    hi = np.array([float(r[1]) for r in rows])
    if not np.allclose(lo[1:], hi[:-1], rtol=0, atol=0):
        raise ValueError("cells must be contiguous")
    return np.concatenate([lo[:1], hi])


def read_relaxed_csv(path, grid: ControlGrid) -> RelaxedControl:
    header, rows = _read_rows(path)
    if len(header) != 2 + grid.n_atoms:
        raise ValueError(f"expected {grid.n_atoms} weight columns, found {len(header) - 2}")
    w = np.array([[float(x) for x in r[2:]] for r in rows])
    return RelaxedControl(_grid_from_rows(rows), w, grid)


def write_strict_csv(s: StrictControl, path) -> None:
    t = s.time_grid
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_lo", "t_hi", "atom_index"])
        for i in range(s.n_cells):
            w.writerow([_fmt(t[i]), _fmt(t[i + 1]), int(s.atom_index[i])])


def read_strict_csv(path, grid: ControlGrid) -> StrictControl:
    header, rows = _read_rows(path)
    if header != ["t_lo", "t_hi", "atom_index"]:
        raise ValueError(f"unexpected header {header}")
    idx = np.array([int(r[2]) for r in rows], dtype=np.int64)
    return StrictControl(_grid_from_rows(rows), idx, grid)
