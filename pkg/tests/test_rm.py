import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msnar.hmm import PsiState, brute_force_posterior, forward_filter, sample_path
from msnar.kernels import KernelConfig, KernelSmoother, kernel_eval
from msnar.model import TransitionMatrix
from msnar.nw import ThetaField, nw_components, nw_estimate
from msnar.rm import (
    NumericalError,
    StepSchedule,
    contrast,
    fixed_point_oracle,
    grad_u,
    gradient,
    gradient_field,
    noise_second_moment_bound,
    polyak_update,
    potential,
    rm_step,
    run_restoration_estimation,
)
from msnar.saem import SaemConfig
from msnar.simulation import Trajectory, simulate

from conftest import random_psi, random_traj, small_config


def field(theta, grid=None):
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    grid = np.arange(theta.shape[1], dtype=float) if grid is None else grid
    return ThetaField(grid, theta, np.ones_like(theta))


class TestSchedule:
    def test_values(self):
        s = StepSchedule(50, 100)
        assert s.gamma(50) == 1.0 and s.gamma(51) == 1.0 and s.gamma(52) == 0.5
        np.testing.assert_array_equal(s.gammas()[:52], [1.0] * 51 + [0.5])

    def test_sum_diverges_square_sum_converges(self):
        g = StepSchedule(50, 10**6).gammas()
        partial = np.cumsum(g)
        tail = np.arange(1, g.size - 50 + 1)
        # harmonic envelope: sum of 1/k over the tail >= log(K + 1)
        assert np.all(partial[50:] - 50 >= np.log(tail + 1) - 1e-9)
        sq = np.cumsum(g * g)
        assert sq[-1] <= 50 + math.pi**2 / 6
        assert sq[-1] - sq[g.size // 2] < 2.0 / (g.size // 2 - 50)

    def test_validation(self):
        with pytest.raises(ValueError):
            StepSchedule(-1, 10)
        with pytest.raises(ValueError):
            StepSchedule(0, 10).gamma(0)


class TestPotentialAndGradient:
    def test_single_populated_term_vanishes(self):
        traj = Trajectory([0.0, 1.3])
        cfg = KernelConfig("gaussian", 0.5)
        assert potential(0.0, traj, [0], [1.3], cfg) == 0.0

    def test_far_point_compact_kernel(self):
        traj = Trajectory([0.0, 1.0, -1.0, 0.5])
        cfg = KernelConfig("epanechnikov", 0.5)
        assert potential(10.0, traj, [0, 1, 0], [0.2, 0.1], cfg) == 0.0

    def test_hand_instance(self):
        # n = 3, h = 1, y = 0, Y = (0, 1, -1, 2), x = (1, 2, 1), theta = (0.5, -0.5)
        traj = Trajectory([0.0, 1.0, -1.0, 2.0])
        cfg = KernelConfig("gaussian", 1.0)
        K = [kernel_eval("gaussian", u) for u in (0.0, -1.0, 1.0)]
        hand = (K[0] * (1 - 0.5) ** 2 + K[1] * (-1 + 0.5) ** 2 + K[2] * (2 - 0.5) ** 2) / 3
        assert potential(0.0, traj, [0, 1, 0], [0.5, -0.5], cfg) == pytest.approx(hand, rel=1e-15)

    def test_path_length_checked(self):
        with pytest.raises(ValueError):
            potential(0.0, Trajectory([0.0, 1.0, 2.0]), [0], [0.0], KernelConfig())

    def test_finite_differences(self, rng):
        for _ in range(20):
            m = int(rng.integers(1, 4))
            traj = random_traj(rng, int(rng.integers(3, 30)))
            x = rng.integers(0, m, traj.n)
            cfg = small_config(traj.y, h=float(rng.uniform(0.3, 2)))
            y = float(rng.uniform(-2, 2))
            theta = rng.normal(size=m)
            g = gradient(y, traj, x, theta, cfg)
            for i in range(m):
                e = np.zeros(m)
                e[i] = 1e-5
                fd = (potential(y, traj, x, theta + e, cfg) - potential(y, traj, x, theta - e, cfg)) / 2e-5
                assert abs(g[i] - fd) <= 1e-6

    def test_zero_at_nw_ratio(self, rng):
        traj = random_traj(rng, 40, m=3)
        cfg = small_config(traj.y)
        for y in cfg.grid:
            theta = []
            for i in range(3):
                g, f = nw_components(y, traj, i, cfg)
                theta.append(g / f)
            assert np.all(np.abs(gradient(y, traj, traj.x, theta, cfg)) <= 1e-12)

    def test_empty_regime_component_zero(self, rng):
        traj = random_traj(rng, 10)
        cfg = small_config(traj.y)
        g = gradient(0.0, traj, np.zeros(10, int), [0.0, 123.0], cfg)
        assert g[1] == 0.0


class TestUpdates:
    def test_zero_gradient_keeps_theta(self):
        f = field([[1.0, 2.0]])
        np.testing.assert_array_equal(rm_step(f, np.zeros((1, 2)), 0.7).theta, f.theta)

    def test_one_step_annihilation(self):
        f = field([[1.5, -2.0]])
        np.testing.assert_array_equal(rm_step(f, f.theta, 1.0).theta, 0.0)

    def test_non_finite_located(self):
        with pytest.raises(NumericalError, match="regime 2, grid point 1"):
            rm_step(field([[0.0, 0.0], [0.0, 0.0]]), np.array([[0.0, 0.0], [0.0, np.inf]]), 1.0)

    def test_quadratic_recursion_converges(self):
        f_hat, g_hat = 0.3, 0.45
        sched = StepSchedule(50, 20_000)
        th = field([[5.0]])
        for gam in sched.gammas():
            th = rm_step(th, np.array([[-2.0 * (g_hat - th.theta[0, 0] * f_hat)]]), gam / 2)
        assert th.theta[0, 0] == pytest.approx(g_hat / f_hat, abs=1e-3)

    def test_polyak_small_cases(self):
        assert polyak_update(field([[3.0]]), field([[3.0]]), 5).theta[0, 0] == 3.0
        bar = polyak_update(field([[0.0]]), field([[0.0]]), 1)
        assert polyak_update(bar, field([[1.0]]), 2).theta[0, 0] == 0.5

    def test_polyak_direct_mean(self, rng):
        seq = rng.normal(size=(1000, 2, 3))
        bar = field(seq[0])
        for t in range(1, 1001):
            bar = polyak_update(bar, field(seq[t - 1]), t)
        np.testing.assert_allclose(bar.theta, seq.mean(axis=0), atol=1e-12)

    def test_polyak_index_checked(self):
        with pytest.raises(ValueError):
            polyak_update(field([[0.0]]), field([[0.0]]), 0)


class TestContrast:
    def test_single_regime_is_complete_data_gradient(self, rng):
        traj = random_traj(rng, 25)
        cfg = small_config(traj.y)
        psi = random_psi(rng, 1)
        np.testing.assert_allclose(
            grad_u(0.2, traj, [0.4], psi, cfg), gradient(0.2, traj, np.zeros(25, int), [0.4], cfg), rtol=1e-13
        )

    def test_zero_at_fixed_point(self, rng):
        for _ in range(10):
            traj = random_traj(rng, int(rng.integers(3, 40)))
            psi = random_psi(rng, int(rng.integers(2, 4)))
            cfg = small_config(traj.y)
            for y in (-1.0, 0.0, 0.7):
                th = fixed_point_oracle(y, traj, psi, cfg)
                assert np.all(np.abs(grad_u(y, traj, th, psi, cfg)) <= 1e-10)

    def test_fixed_point_with_degenerate_weights_is_complete_data(self, rng):
        traj = random_traj(rng, 15, m=2)
        cfg = small_config(traj.y)
        # a nearly noiseless model whose means pin each step to its true regime
        means = np.where(traj.x == 0, 10.0, -10.0)
        y = np.r_[0.0, means]
        tr = Trajectory(y, traj.x)
        psi = PsiState(field([[10.0, 10.0], [-10.0, -10.0]], np.array([-50.0, 50.0])),
                       TransitionMatrix(np.full((2, 2), 0.5)), (0.05, 0.05), (0.5, 0.5))
        cfg = small_config(tr.y)
        nw = nw_estimate(tr, cfg, m=2)
        for g, yg in enumerate(cfg.grid):
            fp = fixed_point_oracle(yg, tr, psi, cfg)
            np.testing.assert_allclose(fp, np.where(nw.f_hat[:, g] > 1e-12, nw.theta[:, g], 0.0), atol=1e-12)

    def test_fixed_point_single_regime_is_nw(self, rng):
        traj = random_traj(rng, 30, m=1)
        cfg = small_config(traj.y)
        nw = nw_estimate(traj, cfg, m=1)
        psi = random_psi(rng, 1)
        got = [fixed_point_oracle(y, traj, psi, cfg)[0] for y in cfg.grid]
        np.testing.assert_allclose(got, nw.theta[0], rtol=1e-12)

    def test_enumerated_expectation_equals_grad_u(self, rng):
        for _ in range(50):
            m = int(rng.integers(2, 4))
            traj = random_traj(rng, 3)
            psi = random_psi(rng, m)
            cfg = small_config(traj.y)
            bf = brute_force_posterior(psi, traj)
            y = float(rng.uniform(-2, 2))
            theta = rng.normal(size=m)
            expect = sum(p * gradient(y, traj, x, theta, cfg) for p, x in zip(bf.probabilities, bf.paths))
            np.testing.assert_allclose(expect, grad_u(y, traj, theta, psi, cfg), atol=1e-12)

    def test_monte_carlo_average_of_sampled_gradients(self, rng):
        traj = random_traj(rng, 6)
        psi = random_psi(rng, 2)
        cfg = small_config(traj.y)
        fp = forward_filter(psi, traj)
        gen = np.random.default_rng(9)
        theta = np.array([0.3, -0.4])
        draws = np.array([gradient(0.1, traj, sample_path(fp.filtered, psi.A_hat.a, gen), theta, cfg)
                          for _ in range(20_000)])
        target = grad_u(0.1, traj, theta, psi, cfg)
        se = draws.std(axis=0) / math.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - target) <= 5 * se + 1e-12)

    def test_contrast_derivative(self, rng):
        traj = random_traj(rng, 12)
        psi = random_psi(rng, 2)
        cfg = small_config(traj.y)
        theta = np.array([0.2, -0.1])
        g = grad_u(0.3, traj, theta, psi, cfg)
        for i in range(2):
            e = np.zeros(2)
            e[i] = 1e-5
            fd = (contrast(0.3, traj, theta + e, psi, cfg) - contrast(0.3, traj, theta - e, psi, cfg)) / 2e-5
            assert abs(g[i] - fd) <= 1e-6

    def test_noise_second_moment_bound(self, rng):
        for _ in range(30):
            m = int(rng.integers(2, 4))
            traj = random_traj(rng, 3)
            psi = random_psi(rng, m)
            cfg = small_config(traj.y)
            bf = brute_force_posterior(psi, traj)
            y = float(rng.uniform(-2, 2))
            theta = rng.normal(size=m)
            mean = grad_u(y, traj, theta, psi, cfg)
            second = sum(p * np.sum((gradient(y, traj, x, theta, cfg) - mean) ** 2)
                         for p, x in zip(bf.probabilities, bf.paths))
            assert second <= noise_second_moment_bound(y, traj, theta, cfg) + 1e-15

    @given(arrays(float, (2, 5), elements=st.floats(-3, 3)))
    def test_field_gradient_zero_iff_ratio(self, theta):
        rng = np.random.default_rng(0)
        traj = random_traj(rng, 20, m=2)
        cfg = small_config(traj.y, num=5)
        sm = KernelSmoother(traj.y, cfg)
        w = (traj.x[None, :] == np.arange(2)[:, None]).astype(float)
        _, f, g = gradient_field(sm, w, theta)
        at_ratio, _, _ = gradient_field(sm, w, g / f)
        assert np.all(np.abs(at_ratio) <= 1e-12)
        grad, _, _ = gradient_field(sm, w, theta)
        off = np.abs(theta - g / f) > 1e-9
        assert np.all(np.abs(grad[off]) > 0)


@pytest.fixture(scope="module")
def small_run(section4):
    traj = simulate(section4, 300, seed=2)
    cfg = KernelConfig.for_data(traj.y, num=41)
    res = run_restoration_estimation(
        traj.hidden(), 2, StepSchedule(10, 120), cfg, seed=4, saem_config=SaemConfig(iterations=30, seed=1)
    )
    return traj, cfg, res


class TestRun:
    def test_single_regime_equals_nw(self, section4):
        traj = simulate(section4, 200, seed=1)
        cfg = KernelConfig.for_data(traj.y, num=31)
        res = run_restoration_estimation(traj.hidden(), 1, StepSchedule(50, 500), cfg, seed=0)
        nw = nw_estimate(traj.with_regimes(np.zeros(200, int)), cfg, m=1)
        np.testing.assert_allclose(res.estimate.theta, nw.theta, atol=1e-8)

    def test_averaging_invariant(self, small_run):
        _, _, res = small_run
        tr = res.trace
        direct = np.cumsum(tr.theta[1:], axis=0) / np.arange(1, tr.T + 1)[:, None, None]
        np.testing.assert_allclose(tr.theta_bar[1:], direct, atol=1e-10)
        np.testing.assert_array_equal(tr.theta_bar[0], tr.theta[0])

    def test_trace_shapes_and_rows(self, small_run):
        traj, cfg, res = small_run
        tr = res.trace
        assert tr.theta.shape == (121, 2, 41) and tr.A_hat.shape == (121, 2, 2)
        np.testing.assert_allclose(tr.A_hat.sum(axis=2), 1.0, atol=1e-12)
        assert np.all(tr.occupancy.sum(axis=1) == traj.n)
        lines = tr.to_csv().splitlines()
        assert lines[0] == "t,gamma,grad_u_norm,noise_norm,occupancy_1,occupancy_2,a_11,a_22"
        assert len(lines) == 122

    def test_deterministic(self, small_run, section4):
        traj, cfg, res = small_run
        again = run_restoration_estimation(
            traj.hidden(), 2, StepSchedule(10, 120), cfg, seed=4, saem_config=SaemConfig(iterations=30, seed=1)
        )
        assert again.trace.to_csv() == res.trace.to_csv()
        assert again.estimate.to_csv() == res.estimate.to_csv()

    def test_frozen_mode_records_fixed_point(self, section4):
        traj = simulate(section4, 150, seed=6)
        cfg = KernelConfig.for_data(traj.y, num=7)
        res = run_restoration_estimation(traj.hidden(), 2, StepSchedule(5, 30), cfg, seed=0,
                                         saem_config=SaemConfig(iterations=20), frozen_psi=True)
        fp = res.extras["fixed_point"]
        for g, yg in enumerate(cfg.grid):
            np.testing.assert_allclose(fp.theta[:, g], fixed_point_oracle(yg, traj, res.psi0, cfg), rtol=1e-10, atol=1e-12)
        assert res.frozen
