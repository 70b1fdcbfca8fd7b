"""Convolution kernels, their cell averages, L2 moduli and regularity exponents.

Four kernel kinds are supported:

* :class:`FractionalKernel` ``K(t) = t**(H - 1/2)``, singular at zero when ``H < 1/2``;
* :class:`ConstantKernel` ``K(t) = c``;
* :class:`LipschitzKernel` wrapping an arbitrary callable with a declared Lipschitz constant;
* :class:`TableKernel`, a piecewise-linear interpolant of sampled values.

Matrix kernels are restricted to scalar multiples of the identity, so every kernel
is evaluated as a scalar and ``dim`` only records the state dimension it acts on.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

__all__ = [
    "Kernel",
    "FractionalKernel",
    "ConstantKernel",
    "LipschitzKernel",
    "TableKernel",
    "KernelRegularity",
    "ExponentBudget",
    "KernelDomainError",
    "QuadratureError",
    "DivergentIntegralError",
    "InfeasibleBudgetError",
    "eval_kernel",
    "cell_average",
    "cell_averages",
    "l2_moduli",
    "estimate_gamma",
    "regularity",
    "exponent_budget",
    "feasible_budget",
    "kernel_from_config",
]

CELL_RTOL = 1e-10
MODULI_RTOL = 1e-8


class KernelDomainError(ValueError):
    """Kernel evaluated outside its domain (negative time, or zero for a singular kernel)."""


class QuadratureError(RuntimeError):
    def __init__(self, message: str, estimate: float, error: float):
        super().__init__(f"{message} (estimate={estimate!r}, abserr={error!r})")
        self.estimate = estimate
        self.error = error


class DivergentIntegralError(ArithmeticError):
    """Kernel is not square integrable near zero."""


class InfeasibleBudgetError(ValueError):
    def __init__(self, budget: "ExponentBudget"):
        super().__init__("infeasible exponent budget: violated " + "; ".join(budget.violations))
        self.budget = budget


class Kernel:
    """Base class; subclasses implement ``_value`` and may override the integrals."""

    dim: int = 1

    @property
    def singular_at_zero(self) -> bool:
        return False

    @property
    def kind(self) -> str:
        raise NotImplementedError

    def _value(self, t: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < 0) or np.any(np.isnan(t_arr)):
            raise KernelDomainError(f"kernel evaluated at negative time {t!r}")
        if self.singular_at_zero and np.any(t_arr == 0):
            raise KernelDomainError("singular kernel evaluated at t = 0")
        out = self._value(t_arr)
        return float(out) if np.ndim(out) == 0 else out

    # integrals -----------------------------------------------------------
    def integral(self, a: float, b: float) -> float:
        """``int_a^b K(s) ds``; quadrature unless overridden."""
        return _quad(self._value, a, b, CELL_RTOL, points=self._breakpoints(a, b))

    def square_integral(self, h: float) -> float:
        """``int_0^h K(t)^2 dt``."""
        self._check_square_integrable(h)
        return _quad(lambda s: self._value(s) ** 2, 0.0, h, MODULI_RTOL,
                     points=self._breakpoints(0.0, h))

    def shift_square_integral(self, h: float, T: float) -> float:
        """``int_0^T (K(t + h) - K(t))^2 dt``."""
        pts = self._breakpoints(0.0, T)
        pts = np.union1d(pts, self._breakpoints(h, T + h) - h) if pts is not None else None
        return _quad(lambda s: (self._value(s + h) - self._value(s)) ** 2, 0.0, T,
                     MODULI_RTOL, points=pts)

    def _breakpoints(self, a: float, b: float):
        return None

    def _check_square_integrable(self, h: float) -> None:
        # local power law of K^2 at 0+; an exponent <= -1 means divergence
        t = h * np.array([1e-12, 1e-10, 1e-8])
        with np.errstate(all="ignore"):
            v = np.abs(np.asarray(self._value(t), dtype=float)) ** 2
        if not np.all(np.isfinite(v)):
            raise DivergentIntegralError("kernel is not finite near 0")
        if np.all(v > 0):
            slope = np.polyfit(np.log(t), np.log(v), 1)[0]
            if slope <= -0.99:
                raise DivergentIntegralError(
                    f"K^2 behaves like t^{slope:.3g} near 0: not square integrable")

    def describe(self) -> dict:
        return {"type": self.kind}


def _quad(f, a, b, rtol, points=None) -> float:
    if b <= a:
        return 0.0
    kw = {}
    if points is not None and len(points):
        inner = [p for p in np.asarray(points, dtype=float) if a < p < b]
        if inner:
            kw["points"] = inner
            kw["limit"] = max(200, 4 * len(inner))
    kw.setdefault("limit", 200)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err = integrate.quad(lambda s: float(f(np.float64(s))), a, b,
                                  epsabs=0.0, epsrel=rtol, **kw)
    if not math.isfinite(val):
        raise DivergentIntegralError(f"integral over [{a}, {b}] is not finite")
    if err > max(rtol * abs(val), 1e-300) * 10:
        raise QuadratureError(f"quadrature over [{a}, {b}] did not reach rtol={rtol}", val, err)
    return float(val)


@dataclass(frozen=True)
class FractionalKernel(Kernel):
    """``K(t) = t**(H - 1/2)`` with Hurst parameter ``H`` in (0, 1)."""

    H: float
    dim: int = 1

    def __post_init__(self):
        if not 0.0 < self.H < 1.0:
            raise ValueError(f"Hurst parameter must lie in (0, 1), got {self.H}")

    @property
    def kind(self) -> str:
        return "fractional"

    @property
    def singular_at_zero(self) -> bool:
        return self.H < 0.5

    def _value(self, t):
        return np.power(t, self.H - 0.5)

    def integral(self, a, b):
        q = self.H + 0.5
        return (b ** q - a ** q) / q

    def square_integral(self, h):
        return h ** (2 * self.H) / (2 * self.H)

    def shift_square_integral(self, h, T):
        # scale t = h s: h^{2H} int_0^{T/h} ((s+1)^a - s^a)^2 ds
        a = self.H - 0.5
        if a == 0.0:
            return 0.0
        upper = T / h
        if a < 0:
            q = 1.0 / -a
            # s = v^q removes the endpoint singularity; remaining weight v^(q-3) is integrable
            def smooth(v):
                return q * (1.0 - v * (1.0 + v ** q) ** a) ** 2
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", integrate.IntegrationWarning)
                head, err = integrate.quad(smooth, 0.0, min(1.0, upper) ** (1.0 / q),
                                           weight="alg", wvar=(q - 3.0, 0.0),
                                           epsabs=0.0, epsrel=1e-12, limit=200)
        else:
            head = _quad(lambda s: ((s + 1) ** a - s ** a) ** 2, 0.0, min(1.0, upper), 1e-12)
        def diff_sq(s):
            # (s+1)^a - s^a without cancellation for large s
            return (s ** a * math.expm1(a * math.log1p(1.0 / s))) ** 2

        tail = 0.0
        lo = 1.0
        while lo < upper:
            hi = min(upper, lo * 10.0)
            tail += _quad(diff_sq, lo, hi, 1e-11)
            lo = hi
        return h ** (2 * self.H) * (head + tail)

    def describe(self):
        return {"type": "fractional", "H": self.H}


@dataclass(frozen=True)
class ConstantKernel(Kernel):
    c: float = 1.0
    dim: int = 1

    @property
    def kind(self) -> str:
        return "constant"

    def _value(self, t):
        return np.full_like(t, self.c, dtype=float) if np.ndim(t) else np.float64(self.c)

    def integral(self, a, b):
        return self.c * (b - a)

    def square_integral(self, h):
        return self.c * self.c * h

    def shift_square_integral(self, h, T):
        return 0.0

    def describe(self):
        return {"type": "constant", "c": self.c}


@dataclass(frozen=True)
class LipschitzKernel(Kernel):
    """Arbitrary locally Lipschitz kernel given as a vectorised callable."""

    func: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    name: str = "lipschitz"
    dim: int = 1

    @property
    def kind(self) -> str:
        return "lipschitz"

    def _value(self, t):
        return np.asarray(self.func(t), dtype=float)

    def describe(self):
        return {"type": "lipschitz", "name": self.name, "L": self.lipschitz}


@dataclass(frozen=True, eq=False)
class TableKernel(Kernel):
    """Piecewise-linear interpolation of samples ``values`` at increasing ``times``.

    The table must start at ``t = 0``; evaluation beyond the last sample is a domain error.
    """

    times: np.ndarray
    values: np.ndarray
    source: str | None = None
    dim: int = 1
    lipschitz: float = field(init=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or len(t) < 2:
            raise ValueError("table kernel needs matching 1-d arrays with at least 2 samples")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("table times must start at 0 and increase strictly")
        if not np.all(np.isfinite(v)):
            raise ValueError("table values must be finite")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "lipschitz", float(np.max(np.abs(np.diff(v) / np.diff(t)))))

    @property
    def kind(self) -> str:
        return "lipschitz_table"

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def _value(self, t):
        if np.any(t > self.t_max * (1 + 1e-12)):
            raise KernelDomainError(f"table kernel defined up to t = {self.t_max}")
        return np.interp(t, self.times, self.values)

    def _primitive(self, x: float) -> float:
        # exact integral of the linear interpolant on [0, x]
        t, v = self.times, self.values
        i = int(np.searchsorted(t, x, side="right")) - 1
        i = min(max(i, 0), len(t) - 2)
        full = float(np.sum(0.5 * (v[1:i + 1] + v[:i]) * np.diff(t[:i + 1])))
        vx = float(np.interp(x, t, v))
        return full + 0.5 * (v[i] + vx) * (x - t[i])

    def integral(self, a, b):
        self._value(np.asarray(b, dtype=float))
        return self._primitive(b) - self._primitive(a)

    def _breakpoints(self, a, b):
        return self.times[(self.times > a) & (self.times < b)]

    def describe(self):
        return {"type": "lipschitz_table", "samples": self.source, "n": int(len(self.times))}


# --------------------------------------------------------------------------
# operations

def eval_kernel(k: Kernel, t: float) -> float:
    """Pointwise value ``K(t)``; zero is rejected for singular kernels."""
    return k(t)


def cell_average(k: Kernel, a: float, b: float) -> float:
    """Mean of ``K`` over ``[a, b]``, finite even for a singular kernel with ``a = 0``."""
    if not (b > a >= 0):
        raise KernelDomainError(f"cell average needs 0 <= a < b, got a={a}, b={b}")
    if isinstance(k, ConstantKernel):
        return float(k.c)
    return k.integral(a, b) / (b - a)


def cell_averages(k: Kernel, dt: float, n: int) -> np.ndarray:
    """Averages of ``K`` over the cells ``[j dt, (j+1) dt]`` for ``j = 0..n-1``."""
    if isinstance(k, ConstantKernel):
        return np.full(n, float(k.c))
    if isinstance(k, FractionalKernel):
        q = k.H + 0.5
        edges = (np.arange(n + 1) * dt) ** q
        return np.diff(edges) / (q * dt)
    edges = np.arange(n + 1) * dt
    return np.array([cell_average(k, edges[j], edges[j + 1]) for j in range(n)])


def l2_moduli(k: Kernel, h: float, T: float) -> tuple[float, float]:
    """Return ``(int_0^h K^2, int_0^T (K(t+h) - K(t))^2 dt)``."""
    if h <= 0 or T <= 0:
        raise ValueError("h and T must be positive")
    return float(k.square_integral(h)), float(k.shift_square_integral(h, T))


def estimate_gamma(k: Kernel, h_grid: Sequence[float], T: float) -> float:
    """Least-squares slope of ``log(I1 + I2)`` against ``log h``."""
    h = np.asarray(h_grid, dtype=float)
    if h.size < 4:
        raise ValueError("need at least 4 lags")
    if np.ptp(h) == 0:
        raise ValueError("ill-conditioned regression: all lags are equal")
    if np.any(h <= 0) or np.any(h >= T):
        raise ValueError("lags must lie in (0, T)")
    if np.log10(h.max() / h.min()) < 2 - 1e-12:
        raise ValueError("lags must span at least two decades")
    y = np.array([sum(l2_moduli(k, float(hi), T)) for hi in h])
    slope, _ = np.polyfit(np.log(h), np.log(y), 1)
    return float(slope)


@dataclass(frozen=True)
class KernelRegularity:
    """Integrability exponent ``r`` and modulus scaling exponent ``gamma``."""

    r: float
    gamma: float

    def __post_init__(self):
        if not self.r > 2:
            raise ValueError(f"r must exceed 2, got {self.r}")
        if not 0 < self.gamma <= 2:
            raise ValueError(f"gamma must lie in (0, 2], got {self.gamma}")


def regularity(k: Kernel) -> tuple[float, float]:
    """Return ``(r_sup, gamma)``: admissible ``r`` is the open interval ``(2, r_sup)``."""
    if isinstance(k, FractionalKernel):
        r_sup = 2.0 / (1.0 - 2.0 * k.H) if k.H < 0.5 else math.inf
        return r_sup, min(2.0 * k.H, 2.0)
    return math.inf, 1.0


@dataclass(frozen=True)
class ExponentBudget:
    p: float
    r: float
    m: float
    alpha_max: float
    violations: tuple[str, ...] = ()

    @property
    def feasible(self) -> bool:
        return not self.violations

    def as_dict(self) -> dict:
        return {"p": self.p, "r": self.r, "m": self.m, "alpha_max": self.alpha_max,
                "feasible": self.feasible, "violations": list(self.violations)}


def exponent_budget(reg: KernelRegularity, p: float, strict: bool = False) -> ExponentBudget:
    """Moment exponent ``m`` with ``1/m = 1/p + 1/r`` and ``alpha_max = gamma/2 - 1/m``.

    Infeasibility is recorded in ``violations``; with ``strict=True`` it raises
    :class:`InfeasibleBudgetError` instead.
    """
    if p <= 0:
        raise ValueError("p must be positive")
    s = 1.0 / p + 1.0 / reg.r
    m = 1.0 / s
    alpha = reg.gamma / 2.0 - s
    violations = []
    if s >= 0.5:
        violations.append(f"1/p + 1/r < 1/2 (got {s:.6g}, m = {m:.6g})")
    if alpha <= 0:
        violations.append(f"gamma > 2(1/p + 1/r) (got gamma = {reg.gamma:.6g} <= {2 * s:.6g})")
    budget = ExponentBudget(p=p, r=reg.r, m=m, alpha_max=alpha, violations=tuple(violations))
    if strict and violations:
        raise InfeasibleBudgetError(budget)
    return budget


def feasible_budget(k: Kernel, p: float) -> ExponentBudget:
    """Best-effort budget for ``k`` and ``p``: picks an admissible ``r`` when one exists.

    ``1/r`` is placed in the middle of the feasible window
    ``(1/r_sup, min(1/2, gamma/2) - 1/p)``; if the window is empty the budget at the
    edge ``r -> r_sup`` is returned with its violations.
    """
    r_sup, gamma = regularity(k)
    lo = 0.0 if math.isinf(r_sup) else 1.0 / r_sup
    hi = min(0.5, gamma / 2.0) - 1.0 / p
    hi = min(hi, 0.5)
    if hi > lo:
        inv_r = 0.5 * (lo + hi) if lo > 0 else min(0.5 * hi, 0.25)
    else:
        inv_r = lo if lo > 0 else 1e-9
    inv_r = min(inv_r, 0.5 - 1e-12)
    return exponent_budget(KernelRegularity(r=1.0 / inv_r, gamma=gamma), p)


def kernel_from_config(spec: dict, base_dir=None) -> Kernel:
    """Build a kernel from ``{type: fractional|constant|lipschitz_table, ...}``."""
    kind = spec.get("type")
    if kind == "fractional":
        return FractionalKernel(H=float(spec["H"]))
    if kind == "constant":
        return ConstantKernel(c=float(spec.get("c", 1.0)))
    if kind == "lipschitz_table":
        from pathlib import Path
        path = Path(spec["samples"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        return TableKernel(times=data[:, 0], values=data[:, 1], source=str(spec["samples"]))
    raise ValueError(f"unknown kernel type {kind!r}")
