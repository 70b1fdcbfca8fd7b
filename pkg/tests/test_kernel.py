import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from csvelab.kernel import (ConstantKernel, DivergentIntegralError, FractionalKernel,
                            InfeasibleBudgetError, KernelDomainError, KernelRegularity,
                            LipschitzKernel, TableKernel, cell_average, cell_averages,
                            estimate_gamma, eval_kernel, exponent_budget, feasible_budget,
                            kernel_from_config, l2_moduli, regularity)

# I2 = int_0^T ((s + h)^a - s^a)^2 ds with a = H - 1/2, 40-digit quadrature split towards 0
I2_ORACLE = [
    (0.1, 0.01, 1.0, 1.1211477884559652),
    (0.25, 0.01, 1.0, 0.039623911295143204),
    (0.4, 0.001, 1.0, 0.00015603054562266361),
    (0.3, 0.05, 0.5, 0.034361114195020352),
    (0.75, 0.1, 1.0, 0.0053369450369111602),
]


class TestEvaluation:
    def test_half_is_identically_one(self):
        assert eval_kernel(FractionalKernel(0.5), 7.3) == 1.0

    def test_constant_at_zero(self):
        assert eval_kernel(ConstantKernel(1.0), 0.0) == 1.0

    def test_power_value(self):
        assert eval_kernel(FractionalKernel(0.25), 0.04) == pytest.approx(2.2360679774997897, rel=1e-15)

    def test_singular_at_zero_rejected(self):
        with pytest.raises(KernelDomainError):
            eval_kernel(FractionalKernel(0.25), 0.0)

    @pytest.mark.parametrize("k", [FractionalKernel(0.3), ConstantKernel(2.0)])
    def test_negative_time_rejected(self, k):
        with pytest.raises(KernelDomainError):
            eval_kernel(k, -1e-3)

    @pytest.mark.parametrize("H, singular", [(0.1, True), (0.49, True), (0.5, False), (0.8, False)])
    def test_singular_flag(self, H, singular):
        assert FractionalKernel(H).singular_at_zero is singular

    def test_regular_kernels_not_singular(self):
        assert not ConstantKernel().singular_at_zero
        assert not LipschitzKernel(np.exp, 1.0, "exp").singular_at_zero

    @pytest.mark.parametrize("H", [0.0, 1.0, -0.2])
    def test_hurst_range(self, H):
        with pytest.raises(ValueError):
            FractionalKernel(H)


class TestCellAverage:
    def test_fractional_from_zero(self):
        assert cell_average(FractionalKernel(0.25), 0.0, 1.0) == pytest.approx(4.0 / 3.0, rel=1e-14)

    def test_constant(self):
        assert cell_average(ConstantKernel(2.0), 3.0, 5.0) == 2.0

    def test_flat_fractional(self):
        assert cell_average(FractionalKernel(0.5), 0.5, 1.5) == pytest.approx(1.0, rel=1e-15)

    def test_reversed_interval(self):
        with pytest.raises(ValueError):
            cell_average(ConstantKernel(), 1.0, 1.0)

    @given(H=st.floats(0.05, 0.95), n=st.integers(1, 60), t=st.floats(0.01, 3.0))
    def test_partition_sums_to_integral(self, H, n, t):
        k = FractionalKernel(H)
        dt = t / n
        total = dt * float(np.sum(cell_averages(k, dt, n)))
        assert total == pytest.approx(t ** (H + 0.5) / (H + 0.5), rel=1e-10)

    def test_vectorised_matches_scalar(self):
        k = FractionalKernel(0.3)
        vec = cell_averages(k, 0.01, 20)
        ref = [cell_average(k, i * 0.01, (i + 1) * 0.01) for i in range(20)]
        np.testing.assert_allclose(vec, ref, rtol=1e-13)

    def test_quadrature_path_for_lipschitz(self):
        k = LipschitzKernel(lambda t: np.exp(-np.asarray(t)), 1.0, "exp")
        assert cell_average(k, 0.0, 1.0) == pytest.approx(1 - math.exp(-1), rel=1e-10)


class TestModuli:
    def test_I1_quarter(self):
        I1, _ = l2_moduli(FractionalKernel(0.25), 0.01, 1.0)
        assert I1 == pytest.approx(0.2, rel=1e-12)

    def test_constant_moduli(self):
        I1, I2 = l2_moduli(ConstantKernel(1.0), 0.3, 1.0)
        assert I1 == pytest.approx(0.3) and I2 == 0.0

    def test_I1_small_h(self):
        I1, _ = l2_moduli(FractionalKernel(0.4), 1e-4, 1.0)
        assert I1 == pytest.approx(1e-4 ** 0.8 / 0.8, rel=1e-12)

    @pytest.mark.parametrize("H, h, T, ref", I2_ORACLE)
    def test_I2_against_high_precision(self, H, h, T, ref):
        _, I2 = l2_moduli(FractionalKernel(H), h, T)
        assert I2 == pytest.approx(ref, rel=1e-8)

    @given(H=st.floats(0.02, 0.98), h=st.floats(1e-6, 1.0))
    def test_I1_closed_form(self, H, h):
        I1, _ = l2_moduli(FractionalKernel(H), h, 1.0)
        assert I1 == pytest.approx(h ** (2 * H) / (2 * H), rel=1e-8)

    def test_not_square_integrable(self):
        k = LipschitzKernel(lambda t: np.asarray(t, dtype=float) ** -0.6, 1.0, "bad")
        with pytest.raises((DivergentIntegralError, KernelDomainError)):
            l2_moduli(k, 0.1, 1.0)


class TestGamma:
    H_GRID = np.logspace(-4, -1, 7)

    @pytest.mark.parametrize("H", [0.1, 0.25, 0.4])
    def test_fractional(self, H):
        assert estimate_gamma(FractionalKernel(H), self.H_GRID, 1.0) == pytest.approx(2 * H, abs=0.05)

    def test_constant(self):
        assert estimate_gamma(ConstantKernel(), self.H_GRID, 1.0) == pytest.approx(1.0, abs=0.05)

    def test_table_kernel_is_lipschitz_like(self):
        t = np.linspace(0, 2, 201)
        k = TableKernel(t, np.exp(-t), "exp")
        assert estimate_gamma(k, self.H_GRID, 1.0) == pytest.approx(1.0, abs=0.05)

    @pytest.mark.parametrize("grid", [
        [0.01] * 5,
        [1e-3, 2e-3, 3e-3, 4e-3],
        [1e-4, 1e-3, 1e-2],
        [1e-4, 1e-3, 1e-2, 2.0],
    ])
    def test_bad_grids(self, grid):
        with pytest.raises(ValueError):
            estimate_gamma(FractionalKernel(0.3), grid, 1.0)


class TestBudget:
    def test_m_equal_two_infeasible(self):
        b = exponent_budget(KernelRegularity(r=4.0, gamma=1.0), 4.0)
        assert b.m == pytest.approx(2.0) and not b.feasible

    def test_negative_alpha(self):
        b = exponent_budget(KernelRegularity(r=3.2, gamma=0.7), 16.0)
        assert b.m == pytest.approx(8 / 3)
        assert b.alpha_max == pytest.approx(0.35 - 0.375)
        assert not b.feasible

    def test_large_p_restores_feasibility(self):
        reg = KernelRegularity(r=2.6, gamma=0.8)
        b40, b100 = exponent_budget(reg, 40.0), exponent_budget(reg, 100.0)
        assert b40.alpha_max == pytest.approx(0.4 - (1 / 40 + 1 / 2.6))
        assert not b40.feasible
        assert b100.alpha_max == pytest.approx(0.4 - (1 / 100 + 1 / 2.6))
        assert b100.alpha_max > 0 and b100.feasible

    def test_strict_raises(self):
        with pytest.raises(InfeasibleBudgetError) as info:
            exponent_budget(KernelRegularity(r=4.0, gamma=1.0), 4.0, strict=True)
        assert info.value.budget.violations

    @given(r=st.floats(2.01, 50), g=st.floats(0.01, 2.0), p=st.floats(1.0, 200))
    def test_alpha_sign_iff(self, r, g, p):
        b = exponent_budget(KernelRegularity(r=r, gamma=g), p)
        assert (b.alpha_max > 0) == (g > 2 * (1 / p + 1 / r))

    def test_regularity_fractional(self):
        r_sup, gamma = regularity(FractionalKernel(0.25))
        assert r_sup == pytest.approx(4.0) and gamma == pytest.approx(0.5)

    def test_feasible_window(self):
        b = feasible_budget(FractionalKernel(0.4), 16)
        r_sup, _ = regularity(FractionalKernel(0.4))
        assert b.feasible and 2 < b.r < r_sup

    def test_boundary_hurst_infeasible(self):
        assert not feasible_budget(FractionalKernel(0.25), 16).feasible

    @pytest.mark.parametrize("r, g", [(2.0, 0.5), (3.0, 0.0), (3.0, 2.5)])
    def test_regularity_validation(self, r, g):
        with pytest.raises(ValueError):
            KernelRegularity(r=r, gamma=g)


class TestConfig:
    def test_table_from_csv(self, tmp_path):
        t = np.linspace(0, 1, 11)
        np.savetxt(tmp_path / "k.csv", np.column_stack([t, 1 + t]), delimiter=",", header="t,K")
        k = kernel_from_config({"type": "lipschitz_table", "samples": "k.csv"}, tmp_path)
        assert cell_average(k, 0.0, 1.0) == pytest.approx(1.5, rel=1e-12)
        with pytest.raises(KernelDomainError):
            eval_kernel(k, 1.5)

    def test_unknown_type(self):
        with pytest.raises(ValueError):
            kernel_from_config({"type": "laplace"})
