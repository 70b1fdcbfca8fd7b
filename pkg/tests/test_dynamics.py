import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from csvelab.control import (ControlGrid, PathwiseStrictControl, StrictControl, constant_control,
                             delta_embedding, uniform_control)
from csvelab.dynamics import (CoefficientError, CoefficientSet, SimConfig, SimulationError,
                              draw_noise, growth_check, holder_estimate, integrated_residual,
                              mean_stderr, moment_sup, psd_sqrt, relaxed_diffusion, relaxed_drift,
                              sample_relaxed, simulate_csve)
from csvelab.kernel import ConstantKernel, FractionalKernel, LipschitzKernel
from csvelab import rng

PM1 = ControlGrid(np.array([-1.0, 1.0]), (-1.0, 1.0))
G3 = ControlGrid(np.array([-1.0, 0.0, 1.0]), (-1.0, 1.0))


def coeffs(b=None, sigma=None, c_lin=1.0, theta=1.0):
    b = b or (lambda t, x, u: np.zeros_like(x))
    sigma = sigma or (lambda t, x, u: np.zeros((len(x), 1, 1)))
    return CoefficientSet(b=b, sigma=sigma, c_lin=c_lin, theta1=lambda t, u: theta)


def unit_sigma(t, x, u):
    return np.ones((len(x), 1, 1))


def zero_x0(t):
    return np.zeros_like(t)


def cfg(N=16, M=64, seed=1, T=1.0, x0=zero_x0, **kw):
    return SimConfig(T=T, N=N, M=M, seed=seed, x0=x0, **kw)


class TestRelaxedCoefficients:
    def test_drift_dirac(self):
        c = coeffs(b=lambda t, x, u: 2 * x + u)
        np.testing.assert_allclose(relaxed_drift(c, G3, 0.0, np.array([[1.0]]), [0, 0, 1]), [[3.0]])

    def test_drift_symmetry(self):
        c = coeffs(b=lambda t, x, u: np.broadcast_to(u, x.shape))
        np.testing.assert_allclose(relaxed_drift(c, PM1, 0.0, np.ones((3, 1)), [0.5, 0.5]), 0.0)

    def test_drift_affine_combination(self):
        g = ControlGrid(np.array([0.0, 2.0]), (0, 2))
        c = coeffs(b=lambda t, x, u: (1 + u) + (0.5 - u) * x)
        x = np.array([[2.0]])
        # 0.25 (1 + 0.5 x) + 0.75 (3 - 1.5 x) at x = 2
        np.testing.assert_allclose(relaxed_drift(c, g, 0.0, x, [0.25, 0.75]), [[0.25 * 2 + 0.75 * 0]])

    def test_diffusion_dirac_abs(self):
        c = coeffs(sigma=lambda t, x, u: np.full((len(x), 1, 1), -0.7))
        np.testing.assert_allclose(relaxed_diffusion(c, PM1, 0.0, np.zeros((1, 1)), [1, 0]), [[[0.7]]])

    def test_diffusion_second_moment(self):
        c = coeffs(sigma=lambda t, x, u: np.full((len(x), 1, 1), u[0]))
        np.testing.assert_allclose(relaxed_diffusion(c, PM1, 0.0, np.zeros((1, 1)), [0.5, 0.5]), [[[1.0]]])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_coefficient(self):
        c = coeffs(b=lambda t, x, u: x / u[0])
        with pytest.raises(CoefficientError):
            relaxed_drift(c, G3, 0.0, np.ones((1, 1)), [0, 1, 0])

    def test_zero_weight_atom_skipped(self):
        c = coeffs(b=lambda t, x, u: x / u[0])
        relaxed_drift(c, G3, 0.0, np.ones((1, 1)), [0.5, 0, 0.5])

    def test_growth_check(self):
        c = coeffs(b=lambda t, x, u: x + u, sigma=unit_sigma, c_lin=1.0, theta=2.0)
        assert growth_check(c, G3, [0.0], np.linspace(-3, 3, 7)) <= 0
        c = coeffs(b=lambda t, x, u: 2 * x, c_lin=1.0, theta=0.0)
        assert growth_check(c, G3, [0.0], [1.0]) > 0


class TestPsdSqrt:
    @given(st.integers(1, 4), st.integers(0, 10**6))
    def test_square_recovers(self, d, seed):
        g = np.random.default_rng(seed)
        B = g.normal(size=(5, d, d))
        A = B @ np.swapaxes(B, 1, 2)
        R = psd_sqrt(A)
        np.testing.assert_allclose(R @ R, A, atol=1e-9 * (1 + np.abs(A).max()))
        np.testing.assert_allclose(R, np.swapaxes(R, 1, 2), atol=1e-12)
        assert np.all(np.linalg.eigvalsh(R) >= -1e-10)

    def test_rank_deficient(self):
        A = np.array([[[1.0, 1.0], [1.0, 1.0]]])
        R = psd_sqrt(A)
        np.testing.assert_allclose(R @ R, A, atol=1e-12)

    def test_asymmetric_rejected(self):
        with pytest.raises(CoefficientError):
            psd_sqrt(np.array([[[1.0, 0.5], [0.0, 1.0]]]))


class TestSimulator:
    def test_noiseless_equals_x0(self):
        x0 = lambda t: 1.0 + np.sin(t)
        c = cfg(x0=x0)
        pb = simulate_csve(FractionalKernel(H=0.3), coeffs(), uniform_control(G3, c.time_grid), c)
        np.testing.assert_array_equal(pb.X[:, :, 0], np.broadcast_to(x0(c.time_grid), (c.M, c.N + 1)))

    @pytest.mark.parametrize("b,sig", [
        (lambda t, x, u: -x + u, lambda t, x, u: np.full((len(x), 1, 1), 0.3 + 0.1 * u[0])),
        (lambda t, x, u: np.sin(x) * u, lambda t, x, u: (0.5 + 0.2 * np.tanh(x)).reshape(-1, 1, 1)),
        (lambda t, x, u: t * u + 0 * x, lambda t, x, u: np.full((len(x), 1, 1), u[0] ** 2)),
    ])
    def test_constant_kernel_is_euler_maruyama(self, b, sig):
        c = cfg(N=20, M=32, seed=7)
        s = StrictControl(c.time_grid, np.arange(c.N) % 3, G3)
        pb = simulate_csve(ConstantKernel(c=1.0), coeffs(b=b, sigma=sig), s, c)
        xi = rng.normals(c.seed, range(c.M), c.N, 2)
        dW = np.sqrt(c.dt) * xi[:, :, 0]
        x = np.zeros((c.M, 1))
        for j in range(c.N):
            u = G3.atoms[s.atom_index[j]]
            t = c.time_grid[j]
            x = x + b(t, x, u) * c.dt + sig(t, x, u)[:, :, 0] * dW[:, j:j + 1]
            np.testing.assert_allclose(pb.X[:, j + 1], x, rtol=1e-13, atol=1e-13)

    def test_dirac_relaxed_equals_strict(self):
        c = cfg(N=12, M=50)
        s = StrictControl(c.time_grid, np.array([0, 1, 2] * 4), G3)
        co = coeffs(b=lambda t, x, u: u - 0.5 * x,
                    sigma=lambda t, x, u: (0.3 + 0.1 * x + 0.2 * u[0]).reshape(-1, 1, 1))
        k = FractionalKernel(H=0.3)
        a = simulate_csve(k, co, s, c)
        b = simulate_csve(k, co, delta_embedding(s), c)
        np.testing.assert_array_equal(a.X, b.X)

    def test_pathwise_constant_matches_strict(self):
        c = cfg(N=6, M=10)
        s = constant_control(G3, c.time_grid, 2)
        ps = PathwiseStrictControl(c.time_grid, np.full((c.M, c.N), 2), G3)
        co = coeffs(b=lambda t, x, u: u + 0 * x, sigma=unit_sigma)
        k = FractionalKernel(H=0.4)
        np.testing.assert_array_equal(simulate_csve(k, co, s, c).X, simulate_csve(k, co, ps, c).X)

    def test_determinism_and_chunking(self):
        c = cfg(N=10, M=37, chunk=1000)
        co = coeffs(b=lambda t, x, u: -x + u, sigma=unit_sigma)
        k = FractionalKernel(H=0.25)
        mu = uniform_control(G3, c.time_grid)
        ref = simulate_csve(k, co, mu, c).X
        np.testing.assert_array_equal(ref, simulate_csve(k, co, mu, c).X)
        np.testing.assert_array_equal(ref, simulate_csve(k, co, mu, c.replace(chunk=5, threads=3)).X)
        part = simulate_csve(k, co, mu, c, paths=range(10, 20)).X
        np.testing.assert_array_equal(ref[10:20], part)

    def test_common_noise(self):
        c = cfg(N=8, M=20)
        co = coeffs(sigma=unit_sigma)
        k = FractionalKernel(H=0.3)
        mu = uniform_control(G3, c.time_grid)
        n = draw_noise(c)
        np.testing.assert_array_equal(simulate_csve(k, co, mu, c, noise=n).X, simulate_csve(k, co, mu, c).X)
        with pytest.raises(ValueError):
            simulate_csve(k, co, mu, c, noise=n, paths=range(3))

    def test_brownian_variance(self):
        c = cfg(N=8, M=100_000, seed=11, chunk=20_000)
        pb = simulate_csve(ConstantKernel(c=1.0), coeffs(sigma=unit_sigma), uniform_control(G3, c.time_grid),
                           c, keep=("X",))
        v, se = mean_stderr(pb.X[:, -1, 0] ** 2)
        assert abs(v - 1.0) < 3 * se

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_blow_up_reported(self):
        c = cfg(N=50, M=4, T=5.0)
        co = coeffs(b=lambda t, x, u: np.full_like(x, 1.7e308))
        with pytest.raises(SimulationError) as e:
            simulate_csve(ConstantKernel(c=1.0), co, uniform_control(G3, c.time_grid), c)
        assert e.value.path == 0 and e.value.step >= 1

    def test_horizon_mismatch(self):
        c = cfg()
        with pytest.raises(ValueError):
            simulate_csve(ConstantKernel(), coeffs(), uniform_control(G3, np.linspace(0, 2, 5)), c)

    def test_sample_relaxed_frequencies(self):
        c = cfg(N=2, M=20_000)
        mu = uniform_control(G3, c.time_grid)
        ps = sample_relaxed(mu, c, seed=5)
        freq = np.bincount(ps.atom_index.ravel(), minlength=3) / ps.atom_index.size
        np.testing.assert_allclose(freq, 1 / 3, atol=0.01)
        np.testing.assert_array_equal(ps.atom_index, sample_relaxed(mu, c, seed=5).atom_index)


class TestEstimators:
    def test_residual_zero_when_noiseless(self):
        c = cfg(N=32, M=4, x0=lambda t: 1 + t)
        k = FractionalKernel(H=0.3)
        pb = simulate_csve(k, coeffs(), uniform_control(G3, c.time_grid), c)
        np.testing.assert_allclose(integrated_residual(pb, k), 0.0, atol=1e-14)

    def test_moment_sup_zero(self):
        c = cfg()
        pb = simulate_csve(FractionalKernel(H=0.3), coeffs(), uniform_control(G3, c.time_grid), c)
        assert moment_sup(pb, 4.0)[0] == 0.0
        with pytest.raises(ValueError):
            moment_sup(pb, 0.5)

    def test_moment_sup_isometry(self):
        H = 0.3
        c = cfg(N=64, M=20_000, seed=3, chunk=20_000)
        pb = simulate_csve(FractionalKernel(H=H), coeffs(sigma=unit_sigma),
                           uniform_control(G3, c.time_grid), c, keep=("X",))
        v, se = moment_sup(pb, 2.0)
        assert abs(v - 1.0 / (2 * H)) < 3 * se

    def test_mean_stderr(self):
        m, se = mean_stderr(np.array([1.0, 2.0, 3.0, 4.0]))
        assert m == 2.5 and se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)

    def test_holder_brownian(self):
        c = cfg(N=256, M=2000, seed=4)
        pb = simulate_csve(ConstantKernel(), coeffs(sigma=unit_sigma), uniform_control(G3, c.time_grid),
                           c, keep=("X",))
        assert holder_estimate(pb, 2.0, [1, 2, 4, 8, 16, 32]) == pytest.approx(0.5, abs=0.07)

    def test_holder_fractional(self):
        c = cfg(N=256, M=2000, seed=5)
        pb = simulate_csve(FractionalKernel(H=0.3), coeffs(sigma=unit_sigma),
                           uniform_control(G3, c.time_grid), c, keep=("X",))
        assert holder_estimate(pb, 2.0, [1, 2, 4, 8, 16, 32]) == pytest.approx(0.3, abs=0.07)

    def test_holder_lipschitz_deterministic(self):
        c = cfg(N=128, M=2, x0=lambda t: 3.0 * t)
        pb = simulate_csve(LipschitzKernel(func=lambda t: np.exp(-t), lipschitz=1.0), coeffs(),
                           uniform_control(G3, c.time_grid), c)
        assert holder_estimate(pb, 2.0, [1, 4, 16]) == pytest.approx(1.0, abs=1e-9)

    def test_holder_needs_decade(self):
        c = cfg(N=16, M=2, x0=lambda t: t)
        pb = simulate_csve(ConstantKernel(), coeffs(), uniform_control(G3, c.time_grid), c)
        with pytest.raises(ValueError):
            holder_estimate(pb, 2.0, [1, 2])
        with pytest.raises(ValueError):
            holder_estimate(simulate_csve(ConstantKernel(), coeffs(), uniform_control(G3, c.time_grid),
                                          cfg(N=16, M=2)), 2.0, [1, 10])
