import logging

import numpy as np
import pytest

from msnar.kernels import KernelConfig
from msnar.model import Linear, ModelSpec, TransitionMatrix
from msnar.nw import nw_estimate
from msnar.saem import (
    SIGMA_FLOOR,
    SaemConfig,
    SufficientStats,
    complete_loglik,
    init_theta_field,
    initial_assignment,
    maximize,
    saem_linear_msar,
)
from msnar.simulation import Trajectory, simulate


@pytest.fixture(scope="module")
def separated():
    model = ModelSpec(
        TransitionMatrix([[0.98, 0.02], [0.02, 0.98]]),
        (Linear(0.9, 2.0), Linear(-0.9, -2.0)),
        (0.1, 0.1),
    )
    return model, simulate(model, 2000, seed=5)


def test_config_schedule():
    cfg = SaemConfig(warmup=20)
    assert cfg.step(20) == 1.0 and cfg.step(21) == 1.0 and cfg.step(30) == 0.1
    with pytest.raises(ValueError):
        SaemConfig(m=0)


def test_single_regime_is_least_squares():
    y = np.empty(60)
    y[0] = 0.3
    for k in range(1, 60):
        y[k] = 0.4 * y[k - 1] + 1.0
    y[::7] += 0.5  # break exact stationarity so the design is full rank
    res = saem_linear_msar(Trajectory(y), SaemConfig(m=1, iterations=5))
    slope, intercept = np.polyfit(y[:-1], y[1:], 1)
    assert res.params.slope[0] == pytest.approx(slope, abs=1e-10)
    assert res.params.intercept[0] == pytest.approx(intercept, abs=1e-10)


def test_noiseless_linear_recovered_exactly():
    y = [3.0]
    for _ in range(30):
        y.append(0.5 * y[-1] + 0.25)
    res = saem_linear_msar(Trajectory(np.array(y)), SaemConfig(m=1, iterations=3))
    assert res.params.slope[0] == pytest.approx(0.5, abs=1e-9)
    assert res.params.intercept[0] == pytest.approx(0.25, abs=1e-9)
    assert res.params.sigma[0] == SIGMA_FLOOR


def test_separated_regimes_recovered(separated):
    model, traj = separated
    res = saem_linear_msar(traj.hidden(), SaemConfig(m=2, seed=1))
    p = res.params
    order = np.argsort(-p.slope)  # true regime 0 has the positive slope
    np.testing.assert_allclose(p.slope[order], [0.9, -0.9], atol=0.05)
    np.testing.assert_allclose(p.intercept[order], [2.0, -2.0], atol=0.05)
    np.testing.assert_allclose(p.sigma[order], [0.1, 0.1], atol=0.05)
    np.testing.assert_allclose(p.A_hat.a[np.ix_(order, order)], model.transition.a, atol=0.02)


def test_section4_fit_sanity(section4_traj):
    res = saem_linear_msar(section4_traj.hidden(), SaemConfig(m=2, seed=0))
    p = res.params
    assert np.all(np.isfinite(p.slope)) and np.all(np.isfinite(p.intercept))
    assert set(np.unique(res.path)) == {0, 1}
    # one decreasing and one increasing line, sticky regimes
    assert p.slope.min() < -0.4 and p.slope.max() > 0.1
    assert np.all(np.diag(p.A_hat.a) > 0.9)


def test_m_step_is_local_maximum(separated, rng):
    _, traj = separated
    x = rng.integers(0, 2, traj.n)
    stats = SufficientStats.from_path(traj.y, x, 2)
    params, _ = maximize(stats)
    base = complete_loglik(stats, params)
    for i in range(2):
        for attr in ("slope", "intercept"):
            for d in (1e-4, -1e-4):
                arr = getattr(params, attr).copy()
                arr[i] += d
                moved = type(params)(
                    **{**params.__dict__, attr: arr}
                )
                assert complete_loglik(stats, moved) <= base


def test_m_step_permutation_equivariant(separated, rng):
    _, traj = separated
    x = rng.integers(0, 2, traj.n)
    a, _ = maximize(SufficientStats.from_path(traj.y, x, 2))
    b, _ = maximize(SufficientStats.from_path(traj.y, 1 - x, 2))
    np.testing.assert_allclose(b.slope, a.slope[::-1], rtol=1e-12)
    np.testing.assert_allclose(b.A_hat.a, a.permuted([1, 0]).A_hat.a, rtol=1e-12)


def test_permuted_start_reaches_same_fit(separated):
    _, traj = separated
    x0 = initial_assignment(traj.y, 2, np.random.default_rng(0))
    a = saem_linear_msar(traj.hidden(), SaemConfig(m=2, seed=3), x_init=x0).params
    b = saem_linear_msar(traj.hidden(), SaemConfig(m=2, seed=3), x_init=1 - x0).params
    np.testing.assert_allclose(b.slope, a.slope[::-1], atol=0.02)


def test_blend_schedule():
    s = SufficientStats(*(np.zeros(2) for _ in range(6)), np.zeros((2, 2)))
    t = SufficientStats(*(np.ones(2) for _ in range(6)), np.ones((2, 2)))
    np.testing.assert_array_equal(s.blend(t, 0.25).sxy, 0.25)


def test_loglik_improves_after_warmup(section4):
    gains = []
    for seed in range(3):
        traj = simulate(section4, 500, seed=seed).hidden()
        res = saem_linear_msar(traj, SaemConfig(m=2, iterations=60, seed=seed))
        gains.append(np.median(res.loglik[-10:]) - np.median(res.loglik[20:30]))
    assert np.median(gains) >= 0


def test_degenerate_regime_reseeded(separated, caplog):
    _, traj = separated
    with caplog.at_level(logging.WARNING, logger="msnar.saem"):
        res = saem_linear_msar(traj.hidden(), SaemConfig(m=2, iterations=5), x_init=np.zeros(traj.n, int))
    assert res.reseeds >= 1
    assert "reseeding" in caplog.text


def test_too_short_rejected():
    with pytest.raises(ValueError, match="n >= 10"):
        saem_linear_msar(Trajectory(np.zeros(10)), SaemConfig(m=2))


def test_initial_assignment_ordered_and_deterministic(section4_traj):
    a = initial_assignment(section4_traj.y, 2, np.random.default_rng(4))
    b = initial_assignment(section4_traj.y, 2, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)
    yn = section4_traj.y[1:]
    assert yn[a == 0].mean() < yn[a == 1].mean()


def test_init_theta_field_is_complete_data_estimate(section4_traj):
    cfg = KernelConfig.for_data(section4_traj.y, num=31)
    a = init_theta_field(section4_traj.hidden(), section4_traj.x, cfg, 2)
    b = nw_estimate(section4_traj, cfg, m=2)
    np.testing.assert_array_equal(a.theta, b.theta)
    c = init_theta_field(section4_traj.hidden(), np.zeros(section4_traj.n, int), cfg, 2)
    assert np.all(c.theta[1] == 0)
