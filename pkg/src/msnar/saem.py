"""SAEM fit of a linear Gaussian MS-AR model, used to initialise the nonparametric run."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.cluster.vq import kmeans2

from msnar.hmm import filter_from_loglik, sample_path, transition_counts
from msnar.kernels import KernelConfig
from msnar.model import TransitionMatrix, gaussian_logpdf
from msnar.nw import ThetaField, nw_estimate
from msnar.simulation import Trajectory

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class LinearMsArParams:
    slope: NDArray[np.float64]
    intercept: NDArray[np.float64]
    sigma: NDArray[np.float64]
    A_hat: TransitionMatrix
    init_hat: NDArray[np.float64]

    @property
    def m(self) -> int:
        return self.slope.size

    def means(self, y_prev: NDArray) -> NDArray[np.float64]:
        return self.slope[None, :] * y_prev[:, None] + self.intercept[None, :]

    def emission_matrix(self, y: NDArray) -> NDArray[np.float64]:
        return gaussian_logpdf(y[1:, None] - self.means(y[:-1]), self.sigma[None, :])

    def permuted(self, perm) -> "LinearMsArParams":
        p = list(perm)
        return LinearMsArParams(
            self.slope[p], self.intercept[p], self.sigma[p], self.A_hat.permuted(p), self.init_hat[p]
        )

    def to_dict(self) -> dict:
        return {
            "slope": self.slope.tolist(),
            "intercept": self.intercept.tolist(),
            "sigma": self.sigma.tolist(),
            "A_hat": self.A_hat.a.tolist(),
            "init_hat": self.init_hat.tolist(),
        }


@dataclass(frozen=True)
class SaemConfig:
    m: int = 2
    iterations: int = 100
    warmup: int = 20
    seed: int = 0
    window: int = 10

    def __post_init__(self) -> None:
        if self.m < 1 or self.iterations < 1 or self.warmup < 0:
            raise ValueError("invalid SAEM configuration")

    def step(self, t: int) -> float:
        return 1.0 if t <= self.warmup else 1.0 / (t - self.warmup)


@dataclass
class SufficientStats:
    """Per-regime moments of ``(Y_{k-1}, Y_k)`` pairs plus transition counts."""

    count: NDArray[np.float64]
    sx: NDArray[np.float64]
    sy: NDArray[np.float64]
    sxx: NDArray[np.float64]
    sxy: NDArray[np.float64]
    syy: NDArray[np.float64]
    trans: NDArray[np.float64]

    @classmethod
    def from_path(cls, y: NDArray, x: NDArray, m: int) -> "SufficientStats":
        xp, yn = y[:-1], y[1:]

        def by(v):
            return np.bincount(x, weights=v, minlength=m).astype(float)

        trans = transition_counts(x, m).counts.astype(float) if x.size >= 2 else np.zeros((m, m))
        return cls(
            by(np.ones_like(xp)), by(xp), by(yn), by(xp * xp), by(xp * yn), by(yn * yn), trans
        )

    def blend(self, other: "SufficientStats", gamma: float) -> "SufficientStats":
        def mix(a, b):
            return a + gamma * (b - a)

        return SufficientStats(
            *(mix(getattr(self, f), getattr(other, f)) for f in self.__dataclass_fields__)
        )


def maximize(stats: SufficientStats) -> tuple[LinearMsArParams, list[int]]:
    """Closed-form M-step. Returns parameters and the regimes that were degenerate."""
    m = stats.count.size
    slope = np.zeros(m)
    intercept = np.zeros(m)
    sigma = np.ones(m)
    degenerate = []
    for i in range(m):
        n_i = stats.count[i]
        det = n_i * stats.sxx[i] - stats.sx[i] ** 2
        if n_i < 2 or det <= 1e-10 * max(n_i * stats.sxx[i], 1e-300):
            degenerate.append(i)
            continue
        slope[i] = (n_i * stats.sxy[i] - stats.sx[i] * stats.sy[i]) / det
        intercept[i] = (stats.sy[i] - slope[i] * stats.sx[i]) / n_i
        rss = residual_sum_of_squares(stats, i, slope[i], intercept[i])
        sigma[i] = max(math.sqrt(max(rss, 0.0) / n_i), SIGMA_FLOOR)
    rows = stats.trans.sum(axis=1, keepdims=True)
    A = np.where(rows > 0, stats.trans / np.where(rows > 0, rows, 1.0), 1.0 / m)
    A = A / A.sum(axis=1, keepdims=True)
    total = stats.count.sum()
    init = stats.count / total if total > 0 else np.full(m, 1.0 / m)
    return LinearMsArParams(slope, intercept, sigma, TransitionMatrix(A), init), degenerate


def residual_sum_of_squares(stats: SufficientStats, i: int, rho: float, b: float) -> float:
    return float(
        stats.syy[i]
        - 2 * rho * stats.sxy[i]
        - 2 * b * stats.sy[i]
        + rho * rho * stats.sxx[i]
        + 2 * rho * b * stats.sx[i]
        + b * b * stats.count[i]
    )


def complete_loglik(stats: SufficientStats, params: LinearMsArParams) -> float:
    """Expected complete-data log-likelihood of the regression part under ``stats``."""
    total = 0.0
    for i in range(params.m):
        s = params.sigma[i]
        rss = residual_sum_of_squares(stats, i, params.slope[i], params.intercept[i])
        total += -0.5 * rss / s**2 - stats.count[i] * (math.log(s) + 0.5 * math.log(2 * math.pi))
    return total


def initial_assignment(
    y: NDArray, m: int, rng: np.random.Generator, window: int = 10
) -> NDArray[np.int64]:
    """k-means split of the lag pairs ``(Y_{k-1}, Y_k)`` into ``m`` groups.

    With ``window > 1`` each pair is described by the moving averages of
    ``Y_{k-1}``, ``Y_k`` and ``Y_{k-1} Y_k`` over ``window`` neighbouring pairs,
    standardised, so that the split follows persistent regimes rather than
    single-step jumps.
    """
    n = y.size - 1
    if m == 1:
        return np.zeros(n, dtype=np.int64)
    xp, yn = y[:-1], y[1:]
    feats = np.column_stack([xp, yn, xp * yn]) if window > 1 else np.column_stack([xp, yn])
    if window > 1:
        ker = np.ones(window) / window
        feats = np.column_stack([np.convolve(f, ker, mode="same") for f in feats.T])
    scale = feats.std(axis=0)
    feats = (feats - feats.mean(axis=0)) / np.where(scale > 0, scale, 1.0)
    _, labels = kmeans2(feats, m, minit="++", seed=rng)
    # order clusters by mean of Y_k so labels are reproducible across restarts
    means = np.array([yn[labels == i].mean() if np.any(labels == i) else np.inf for i in range(m)])
    rank = np.argsort(np.argsort(means, kind="stable"), kind="stable")
    return rank[labels].astype(np.int64)


@dataclass
class SaemResult:
    params: LinearMsArParams
    path: NDArray[np.int64]
    loglik: list[float] = field(default_factory=list)
    reseeds: int = 0
    stats: SufficientStats | None = None


def saem_linear_msar(
    traj: Trajectory, config: SaemConfig, x_init: NDArray | None = None
) -> SaemResult:
    """Stochastic-approximation EM for the linear Gaussian MS-AR model.

    Each iteration simulates a regime path from the current posterior,
    smooths the sufficient statistics with step ``config.step(t)`` and
    re-solves the weighted least-squares M-step. Without ``x_init`` two
    starts are run (windowed and plain lag-pair k-means) and the one with
    the larger final log-likelihood is kept.
    """
    y = traj.y
    m = config.m
    n = y.size - 1
    if n < 10 * m:
        raise ValueError(f"SAEM needs n >= 10*m observations, got n={n}")
    if x_init is not None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
        return _saem_from(y, np.asarray(x_init, dtype=np.int64), config, rng)
    best = None
    for ss, window in zip(np.random.SeedSequence(config.seed).spawn(2), (config.window, 1)):
        rng = np.random.default_rng(ss)
        res = _saem_from(y, initial_assignment(y, m, rng, window), config, rng)
        if best is None or res.loglik[-1] > best.loglik[-1]:
            best = res
    assert best is not None
    return best


def _saem_from(y, x, config, rng) -> SaemResult:
    m = config.m
    stats = SufficientStats.from_path(y, x, m)
    params, bad = maximize(stats)
    result = SaemResult(params, x)
    if bad:
        stats, params = _reseed(y, x, m, bad, rng, result)
    for t in range(1, config.iterations + 1):
        fp = filter_from_loglik(params.emission_matrix(y), params.A_hat.a, params.init_hat)
        result.loglik.append(fp.loglik)
        x = sample_path(fp.filtered, params.A_hat.a, rng)
        stats = stats.blend(SufficientStats.from_path(y, x, m), config.step(t))
        params, bad = maximize(stats)
        if bad:
            stats, params = _reseed(y, x, m, bad, rng, result)
    result.params = params
    result.path = x
    result.stats = stats
    return result


def _reseed(y, x, m, bad, rng, result):
    x = x.copy()
    for i in bad:
        log.warning("SAEM regime %d degenerate; reseeding by random reassignment", i)
        pick = rng.random(x.size) < 1.0 / m
        x[pick] = i
    result.reseeds += 1
    stats = SufficientStats.from_path(y, x, m)
    params, still = maximize(stats)
    if still:
        raise RuntimeError(f"SAEM regimes {still} remain degenerate after reseeding")
    return stats, params


def init_theta_field(traj: Trajectory, x0: NDArray, config: KernelConfig, m: int) -> ThetaField:
    """Nadaraya-Watson field computed with the restored path ``x0`` as if observed."""
    return nw_estimate(traj.with_regimes(x0), config, m=m)
