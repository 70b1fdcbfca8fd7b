"""Numerical laboratory for controlled stochastic Volterra equations with singular kernels."""
from .control import (ControlGrid, PathwiseStrictControl, RelaxedControl, StrictControl,
                      chattering_approximation, default_bank, delta_embedding, stable_distance)
from .cost import CostSpec, coercivity_check, evaluate_cost
from .dynamics import CoefficientSet, SimConfig, simulate_csve
from .kernel import ConstantKernel, FractionalKernel, TableKernel, estimate_gamma
from .optimize import (OptimizerConfig, convexity_probe, optimize_relaxed, optimize_strict,
                       strictify)
from .scenarios import CONFIG_DIR, Scenario, load_scenario, shipped_configs, validate_scenario

__version__ = "0.1.0"
