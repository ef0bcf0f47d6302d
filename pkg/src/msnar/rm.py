"""Restoration-estimation Robbins-Monro algorithm with Polyak averaging.

The regression estimate is carried on a whole grid at once: every grid point
gets its own stochastic-gradient update, all sharing the path restored at that
iteration. Potential, contrast and their gradients are all scaled by
``1/(n h)``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from msnar.hmm import (
    FilteringError,
    PsiState,
    emission_matrix,
    sample_path,
    smooth_from_loglik,
    transition_counts,
)
from msnar.kernels import KernelConfig, KernelSmoother, kernel_eval
from msnar.nw import ZERO_DENOM, ThetaField, indicator_weights, ratio
from msnar.saem import SaemConfig, SaemResult, init_theta_field, saem_linear_msar
from msnar.simulation import Trajectory

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class StepSchedule:
    """``gamma_t = 1`` for ``t <= warmup``, then ``1/(t - warmup)``."""

    warmup: int = 50
    iterations: int = 2000

    def __post_init__(self) -> None:
        if self.warmup < 0 or self.iterations < 1:
            raise ValueError("schedule needs warmup >= 0 and iterations >= 1")

    def gamma(self, t: int) -> float:
        if t < 1:
            raise ValueError("step index starts at 1")
        return 1.0 if t <= self.warmup else 1.0 / (t - self.warmup)

    def gammas(self, upto: int | None = None) -> NDArray[np.float64]:
        T = self.iterations if upto is None else upto
        t = np.arange(1, T + 1, dtype=float)
        return np.where(t <= self.warmup, 1.0, 1.0 / np.maximum(t - self.warmup, 1.0))


# ---------------------------------------------------------------------------
# Pointwise potential, gradient and contrast
# ---------------------------------------------------------------------------


def _kernel_row(y: float, traj: Trajectory, config: KernelConfig) -> tuple[NDArray, float]:
    n = traj.n
    h = config.bandwidth
    return kernel_eval(config.family, (y - traj.y[:-1]) / h), n * h


def potential(
    y: float, traj: Trajectory, x: ArrayLike, theta_at_y: ArrayLike, config: KernelConfig
) -> float:
    """Kernel-weighted squared residuals of ``Y_{k+1}`` about ``theta[X_{k+1}]``."""
    x = np.asarray(x)
    theta = np.asarray(theta_at_y, dtype=float)
    if x.shape != (traj.n,):
        raise ValueError("path length does not match the trajectory")
    k, nh = _kernel_row(y, traj, config)
    return math.fsum(k * (traj.y[1:] - theta[x]) ** 2) / nh


def weighted_gradient(
    y: float, traj: Trajectory, weights: NDArray, theta_at_y: ArrayLike, config: KernelConfig
) -> NDArray[np.float64]:
    k, nh = _kernel_row(y, traj, config)
    theta = np.asarray(theta_at_y, dtype=float)
    out = np.empty(theta.size)
    for i in range(theta.size):
        kw = k * weights[i]
        f = math.fsum(kw) / nh
        g = math.fsum(kw * traj.y[1:]) / nh
        out[i] = -2.0 * (g - theta[i] * f)
    return out


def gradient(
    y: float, traj: Trajectory, x: ArrayLike, theta_at_y: ArrayLike, config: KernelConfig
) -> NDArray[np.float64]:
    """``dU/dtheta_i = -2 (g_hat_i - theta_i f_hat_i)`` with indicator weights from ``x``."""
    theta = np.asarray(theta_at_y, dtype=float)
    x = np.asarray(x)
    if x.shape != (traj.n,):
        raise ValueError("path length does not match the trajectory")
    return weighted_gradient(y, traj, indicator_weights(x, theta.size), theta, config)


def contrast(
    y: float, traj: Trajectory, theta_at_y: ArrayLike, psi_prime: PsiState, config: KernelConfig
) -> float:
    """Expected potential with smoothed regime probabilities as weights."""
    sm = _smoothed(psi_prime, traj)
    k, nh = _kernel_row(y, traj, config)
    theta = np.asarray(theta_at_y, dtype=float)
    resid2 = (traj.y[1:, None] - theta[None, :]) ** 2
    return math.fsum((k[:, None] * sm * resid2).ravel()) / nh


def grad_u(
    y: float, traj: Trajectory, theta_at_y: ArrayLike, psi_prime: PsiState, config: KernelConfig
) -> NDArray[np.float64]:
    sm = _smoothed(psi_prime, traj)
    return weighted_gradient(y, traj, sm.T, theta_at_y, config)


def fixed_point_oracle(
    y: float, traj: Trajectory, psi_prime: PsiState, config: KernelConfig
) -> NDArray[np.float64]:
    """Smoothed-weight Nadaraya-Watson ratio: the zero of :func:`grad_u`."""
    sm = _smoothed(psi_prime, traj)
    k, nh = _kernel_row(y, traj, config)
    out = np.zeros(psi_prime.m)
    for i in range(psi_prime.m):
        kw = k * sm[:, i]
        f = math.fsum(kw) / nh
        if f > ZERO_DENOM:
            out[i] = (math.fsum(kw * traj.y[1:]) / nh) / f
    return out


def noise_second_moment_bound(
    y: float, traj: Trajectory, theta_at_y: ArrayLike, config: KernelConfig
) -> float:
    """Upper bound on ``E ||gradient noise||^2`` from centred Bernoulli covariances <= 1/4."""
    k, nh = _kernel_row(y, traj, config)
    theta = np.asarray(theta_at_y, dtype=float)
    return sum(
        (math.fsum(np.abs(traj.y[1:] - theta[i]) * k) / nh) ** 2 for i in range(theta.size)
    )


def _smoothed(psi: PsiState, traj: Trajectory) -> NDArray[np.float64]:
    return smooth_from_loglik(emission_matrix(psi, traj), psi.A_hat.a, np.asarray(psi.init_hat)).smoothed


# ---------------------------------------------------------------------------
# Field updates
# ---------------------------------------------------------------------------


def gradient_field(
    smoother: KernelSmoother, weights: NDArray, theta: NDArray
) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
    """Gradient over the grid; also returns the sums ``(f_hat, g_hat)`` used."""
    f, g = smoother.sums(weights)
    return -2.0 * (g - theta * f), f, g


def rm_step(theta: ThetaField, grad: NDArray, gamma: float) -> ThetaField:
    new = theta.theta - gamma * np.asarray(grad, dtype=float)
    bad = np.argwhere(~np.isfinite(new))
    if bad.size:
        i, g = map(int, bad[0])
        raise NumericalError(f"non-finite update at regime {i + 1}, grid point {g}")
    return ThetaField(theta.grid, new, theta.f_hat)


def polyak_update(theta_bar: ThetaField, theta_t: ThetaField, t: int) -> ThetaField:
    if t < 1:
        raise ValueError("averaging index starts at 1")
    new = theta_bar.theta + (theta_t.theta - theta_bar.theta) / t
    return ThetaField(theta_bar.grid, new, theta_t.f_hat)


# ---------------------------------------------------------------------------
# Full loop
# ---------------------------------------------------------------------------


@dataclass
class RmTrace:
    grid: NDArray[np.float64]
    gammas: NDArray[np.float64]
    theta: NDArray[np.float64]  # (T+1, m, G), index 0 is the initial field
    theta_bar: NDArray[np.float64]
    A_hat: NDArray[np.float64]  # (T+1, m, m)
    grad_u_norm: NDArray[np.float64]  # (T+1,) at theta_bar^t
    noise_norm: NDArray[np.float64]  # (T+1,), entry 0 unused
    occupancy: NDArray[np.int64]  # (T+1, m)
    f_bar: NDArray[np.float64]  # running mean of f_hat over iterations, (m, G)

    @property
    def T(self) -> int:
        return self.gammas.size

    def final_field(self) -> ThetaField:
        return ThetaField(self.grid, self.theta_bar[-1], self.f_bar)

    def field_at(self, t: int, averaged: bool = True) -> ThetaField:
        src = self.theta_bar if averaged else self.theta
        return ThetaField(self.grid, src[t], self.f_bar)

    def to_csv(self) -> str:
        m = self.occupancy.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["t", "gamma", "grad_u_norm", "noise_norm"]
            + [f"occupancy_{i + 1}" for i in range(m)]
            + [f"a_{i + 1}{i + 1}" for i in range(m)]
        )
        for t in range(self.T + 1):
            gam = "" if t == 0 else format(float(self.gammas[t - 1]), ".17g")
            noise = "" if t == 0 else format(float(self.noise_norm[t]), ".17g")
            w.writerow(
                [t, gam, format(float(self.grad_u_norm[t]), ".17g"), noise]
                + [int(v) for v in self.occupancy[t]]
                + [format(float(self.A_hat[t, i, i]), ".17g") for i in range(m)]
            )
        return buf.getvalue()

    def save_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


@dataclass
class RmResult:
    trace: RmTrace
    psi0: PsiState
    saem: SaemResult | None
    frozen: bool
    seed: int
    extras: dict = field(default_factory=dict)

    @property
    def estimate(self) -> ThetaField:
        return self.trace.final_field()

    @property
    def A_final(self) -> NDArray[np.float64]:
        return self.trace.A_hat[-1]


def initial_state(
    traj: Trajectory, m: int, config: KernelConfig, saem_config: SaemConfig
) -> tuple[PsiState, SaemResult]:
    """Step 0: SAEM restoration, Nadaraya-Watson field on it, transition counts."""
    saem = saem_linear_msar(traj, saem_config)
    theta0 = init_theta_field(traj, saem.path, config, m)
    A0 = transition_counts(saem.path, m).estimate
    psi0 = PsiState(theta0, A0, tuple(saem.params.sigma), tuple(saem.params.init_hat))
    return psi0, saem


def run_restoration_estimation(
    traj: Trajectory,
    m: int,
    schedule: StepSchedule,
    config: KernelConfig,
    seed: int = 0,
    *,
    saem_config: SaemConfig | None = None,
    initial: tuple[PsiState, SaemResult | None] | None = None,
    frozen_psi: PsiState | bool | None = None,
    reestimate_sigma: bool = False,
) -> RmResult:
    """Run Step 0 followed by ``schedule.iterations`` restoration/estimation/averaging steps.

    ``frozen_psi`` holds the restoration law fixed: pass a :class:`PsiState`,
    or ``True`` to freeze at the Step 0 state.
    """
    ss_saem, ss_rm = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(ss_rm)
    if initial is None:
        saem_config = saem_config or SaemConfig(m=m, seed=int(ss_saem.generate_state(1)[0]))
        psi0, saem = initial_state(traj.hidden(), m, config, saem_config)
    else:
        psi0, saem = initial
    if psi0.m != m:
        raise ValueError("initial state has the wrong number of regimes")

    frozen = frozen_psi is not None and frozen_psi is not False
    psi_frozen = psi0 if frozen_psi is True else (frozen_psi if frozen else None)

    smoother = KernelSmoother(traj.y, config)
    T = schedule.iterations
    G = config.grid_array.size
    gammas = schedule.gammas()
    theta_hist = np.empty((T + 1, m, G))
    bar_hist = np.empty((T + 1, m, G))
    A_hist = np.empty((T + 1, m, m))
    grad_norm = np.empty(T + 1)
    noise_norm = np.zeros(T + 1)
    occupancy = np.empty((T + 1, m), dtype=np.int64)

    theta = psi0.theta.theta.copy()
    f_bar = psi0.theta.f_hat.copy()
    sigma = tuple(psi0.sigma)
    A = psi0.A_hat
    x0 = saem.path if saem is not None else None
    theta_hist[0] = theta
    bar_hist[0] = theta
    theta_bar = theta.copy()
    A_hist[0] = A.a
    occupancy[0] = np.bincount(x0, minlength=m) if x0 is not None else 0

    def posterior(psi: PsiState):
        try:
            return smooth_from_loglik(emission_matrix(psi, traj), psi.A_hat.a, np.asarray(psi.init_hat))
        except FilteringError as exc:
            raise FilteringError(f"iteration {t}: {exc}", exc.step) from None

    def expected_sums(post):
        return smoother.sums(post.smoothed.T)

    t = 0
    if frozen:
        post = posterior(psi_frozen)
        fw, gw = expected_sums(post)
    psi_prev = psi0
    if not frozen:
        post = posterior(psi_prev)
        fw, gw = expected_sums(post)
    grad_norm[0] = float(np.linalg.norm(-2.0 * (gw - theta_bar * fw)))

    for t in range(1, T + 1):
        # Step R
        x = sample_path(post.filtered, (psi_frozen or psi_prev).A_hat.a, rng)
        # Step E
        grad, f_t, _ = gradient_field(smoother, indicator_weights(x, m), theta)
        grad = np.where(f_t > ZERO_DENOM, grad, 0.0)
        noise = grad - (-2.0 * (gw - theta * fw))
        noise_norm[t] = float(np.linalg.norm(noise))
        new = theta - gammas[t - 1] * grad
        if not np.all(np.isfinite(new)):
            i, g = map(int, np.argwhere(~np.isfinite(new))[0])
            raise NumericalError(f"iteration {t}: non-finite update at regime {i + 1}, grid point {g}")
        theta = new
        A = transition_counts(x, m).estimate
        f_bar += (f_t - f_bar) / (t + 1)
        # Step A
        theta_bar += (theta - theta_bar) / t

        if reestimate_sigma and not frozen:
            sigma = _residual_sigma(traj, ThetaField(config.grid_array, theta, f_bar), post.smoothed, sigma)

        theta_hist[t] = theta
        bar_hist[t] = theta_bar
        A_hist[t] = A.a
        occupancy[t] = np.bincount(x, minlength=m)

        # contrast under psi^{t-1}, evaluated at the averaged iterate
        grad_norm[t] = float(np.linalg.norm(-2.0 * (gw - theta_bar * fw)))
        if not frozen:
            psi_prev = PsiState(ThetaField(config.grid_array, theta, f_bar), A, sigma, psi0.init_hat)
            post = posterior(psi_prev)
            fw, gw = expected_sums(post)

    trace = RmTrace(
        grid=config.grid_array,
        gammas=gammas,
        theta=theta_hist,
        theta_bar=bar_hist,
        A_hat=A_hist,
        grad_u_norm=grad_norm,
        noise_norm=noise_norm,
        occupancy=occupancy,
        f_bar=f_bar,
    )
    result = RmResult(trace, psi0, saem, frozen, seed)
    if frozen:
        result.extras["fixed_point"] = ThetaField(config.grid_array, ratio(gw, fw), fw)
    return result


def _residual_sigma(traj, field_, smoothed, previous):
    y_prev, y_next = traj.y[:-1], traj.y[1:]
    out = []
    for i in range(field_.m):
        w = smoothed[:, i]
        tot = w.sum()
        if tot < 2:
            out.append(previous[i])
            continue
        r = y_next - field_.evaluate(i, y_prev)
        out.append(max(math.sqrt(float(w @ r**2) / tot), 1e-6))
    return tuple(out)
