"""Hidden-regime inference: filtering, smoothing, backward sampling, exact enumeration.

Index convention: row ``k`` of every ``(n, m)`` array refers to ``X_{k+1}``
(equivalently, to the transition from ``y[k]`` to ``y[k+1]``).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
from numpy.typing import ArrayLike, NDArray

from msnar.model import ModelSpec, TransitionMatrix, gaussian_logpdf
from msnar.nw import ThetaField
from msnar.simulation import Trajectory, open_uniforms

MAX_ENUMERATION = 10**6


class FilteringError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class PsiState:
    """Current parameter estimate: regression field, transitions, noise scales, initial law."""

    theta: ThetaField
    A_hat: TransitionMatrix
    sigma: tuple[float, ...]
    init_hat: tuple[float, ...]

    def __post_init__(self) -> None:
        m = self.theta.m
        if self.A_hat.m != m or len(self.sigma) != m or len(self.init_hat) != m:
            raise ValueError("PsiState components disagree on the number of regimes")
        if any(not (s > 0) for s in self.sigma):
            raise ValueError("sigma must be positive")
        object.__setattr__(self, "sigma", tuple(map(float, self.sigma)))
        object.__setattr__(self, "init_hat", tuple(map(float, self.init_hat)))

    @property
    def m(self) -> int:
        return self.theta.m

    @classmethod
    def from_model(cls, model: ModelSpec, grid: ArrayLike) -> "PsiState":
        """Tabulate a known model's regression functions on ``grid``."""
        grid = np.asarray(grid, dtype=float)
        theta = np.vstack([model.regression(i, grid) for i in range(model.m)])
        return cls(
            ThetaField(grid, theta, np.ones_like(theta)),
            model.transition,
            model.noise_std,
            model.initial_distribution,
        )


@dataclass(frozen=True)
class FilterPosterior:
    filtered: NDArray[np.float64]
    loglik: float
    smoothed: NDArray[np.float64] | None = None

    def to_csv(self) -> str:
        n, m = self.filtered.shape
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = [f"filtered_{i + 1}" for i in range(m)]
        if self.smoothed is not None:
            cols += [f"smoothed_{i + 1}" for i in range(m)]
        w.writerow(["k"] + cols)
        for k in range(n):
            vals = list(self.filtered[k])
            if self.smoothed is not None:
                vals += list(self.smoothed[k])
            w.writerow([k + 1] + [format(float(v), ".17g") for v in vals])
        return buf.getvalue()

    def save_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


# ---------------------------------------------------------------------------
# Emissions
# ---------------------------------------------------------------------------


def emission_logdensity(psi: PsiState, i: int, y_prev: float, y: float) -> float:
    mean = float(psi.theta.evaluate(i, y_prev))
    return float(gaussian_logpdf(y - mean, psi.sigma[i]))


def emission_means(psi: PsiState, traj: Trajectory) -> NDArray[np.float64]:
    """``(n, m)`` array of interpolated regression values at ``y[0..n-1]``."""
    y_prev = traj.y[:-1]
    return np.column_stack([psi.theta.evaluate(i, y_prev) for i in range(psi.m)])


def emission_matrix(psi: PsiState, traj: Trajectory) -> NDArray[np.float64]:
    resid = traj.y[1:, None] - emission_means(psi, traj)
    return gaussian_logpdf(resid, np.asarray(psi.sigma)[None, :])


# ---------------------------------------------------------------------------
# Core recursions (numba)
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _forward(log_e, a, init):
    n, m = log_e.shape
    filt = np.empty((n, m))
    loglik = 0.0
    pred = init.copy()
    for k in range(n):
        if k > 0:
            for j in range(m):
                s = 0.0
                for i in range(m):
                    s += filt[k - 1, i] * a[i, j]
                pred[j] = s
        mx = -np.inf
        for j in range(m):
            if log_e[k, j] > mx:
                mx = log_e[k, j]
        c = 0.0
        for j in range(m):
            v = pred[j] * np.exp(log_e[k, j] - mx) if mx > -np.inf else 0.0
            filt[k, j] = v
            c += v
        if not (c > 0.0) or not np.isfinite(c):
            return filt, -np.inf, k
        for j in range(m):
            filt[k, j] /= c
        loglik += np.log(c) + mx
    return filt, loglik, -1


@numba.njit(cache=True)
def _backward_smooth(filt, a):
    n, m = filt.shape
    sm = np.empty((n, m))
    sm[n - 1] = filt[n - 1]
    pred = np.empty(m)
    r = np.empty(m)
    for k in range(n - 2, -1, -1):
        for j in range(m):
            s = 0.0
            for i in range(m):
                s += filt[k, i] * a[i, j]
            pred[j] = s
            r[j] = sm[k + 1, j] / s if s > 0.0 else 0.0
        tot = 0.0
        for i in range(m):
            s = 0.0
            for j in range(m):
                s += a[i, j] * r[j]
            sm[k, i] = filt[k, i] * s
            tot += sm[k, i]
        for i in range(m):
            sm[k, i] /= tot
    return sm


@numba.njit(cache=True)
def _backward_sample(filt, a, u):
    n, m = filt.shape
    x = np.empty(n, dtype=np.int64)
    p = np.empty(m)
    for k in range(n - 1, -1, -1):
        tot = 0.0
        for i in range(m):
            w = filt[k, i] if k == n - 1 else filt[k, i] * a[i, x[k + 1]]
            p[i] = w
            tot += w
        if not (tot > 0.0):
            return x, k
        target = u[k] * tot
        acc = 0.0
        choice = m - 1
        for i in range(m):
            acc += p[i]
            if target < acc:
                choice = i
                break
        # never land on a zero-probability state through rounding
        while p[choice] == 0.0 and choice > 0:
            choice -= 1
        x[k] = choice
    return x, -1


def filter_from_loglik(
    log_e: NDArray[np.float64], A: NDArray[np.float64], init: NDArray[np.float64]
) -> FilterPosterior:
    filt, loglik, bad = _forward(
        np.ascontiguousarray(log_e, dtype=float),
        np.ascontiguousarray(A, dtype=float),
        np.ascontiguousarray(init, dtype=float),
    )
    if bad >= 0:
        raise FilteringError(f"all emission densities vanish at step {bad + 1}", bad + 1)
    return FilterPosterior(filt, float(loglik))


def smooth_from_loglik(
    log_e: NDArray[np.float64], A: NDArray[np.float64], init: NDArray[np.float64]
) -> FilterPosterior:
    fp = filter_from_loglik(log_e, A, init)
    sm = _backward_smooth(fp.filtered, np.ascontiguousarray(A, dtype=float))
    return FilterPosterior(fp.filtered, fp.loglik, sm)


def sample_path(
    filtered: NDArray[np.float64], A: NDArray[np.float64], rng: np.random.Generator
) -> NDArray[np.int64]:
    u = open_uniforms(rng, filtered.shape[0])
    x, bad = _backward_sample(filtered, np.ascontiguousarray(A, dtype=float), u)
    if bad >= 0:
        raise FilteringError(f"zero normaliser while sampling step {bad + 1}", bad + 1)
    return x


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def forward_filter(psi: PsiState, traj: Trajectory) -> FilterPosterior:
    """Normalised forward recursion; ``loglik = log p(y_1..y_n | y_0, psi)``."""
    return filter_from_loglik(emission_matrix(psi, traj), psi.A_hat.a, np.asarray(psi.init_hat))


def smoothed_probabilities(psi: PsiState, traj: Trajectory) -> FilterPosterior:
    """Forward filter plus the backward pass giving ``P(X_{k+1}=i | y_0..y_n)``."""
    return smooth_from_loglik(emission_matrix(psi, traj), psi.A_hat.a, np.asarray(psi.init_hat))


def backward_sample(
    fp: FilterPosterior, A_hat: TransitionMatrix, seed: int | np.random.Generator
) -> NDArray[np.int64]:
    """Draw a full regime path from its posterior (forward filtering, backward sampling)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return sample_path(fp.filtered, A_hat.a, rng)


@dataclass(frozen=True)
class PathPosterior:
    """Exact posterior over every regime path of a short trajectory."""

    paths: NDArray[np.int64]
    log_joint: NDArray[np.float64]
    log_normalizer: float
    prefix_log_joint: NDArray[np.float64]

    @property
    def probabilities(self) -> NDArray[np.float64]:
        return np.exp(self.log_joint - self.log_normalizer)

    @property
    def m(self) -> int:
        return int(self.paths.max()) + 1 if self.paths.size else 1

    def marginals(self, m: int) -> NDArray[np.float64]:
        p = self.probabilities
        n = self.paths.shape[1]
        out = np.zeros((n, m))
        for k in range(n):
            out[k] = np.bincount(self.paths[:, k], weights=p, minlength=m)
        return out

    def filtered_marginals(self, m: int) -> NDArray[np.float64]:
        n = self.paths.shape[1]
        out = np.zeros((n, m))
        for k in range(n):
            lw = self.prefix_log_joint[:, k]
            w = np.exp(lw - lw.max())
            out[k] = np.bincount(self.paths[:, k], weights=w, minlength=m)
            out[k] /= out[k].sum()
        return out

    def path_index(self, x: Sequence[int], m: int) -> int:
        idx = 0
        for v in x:
            idx = idx * m + int(v)
        return idx


def enumerate_posterior(
    log_e: NDArray[np.float64], A: NDArray[np.float64], init: NDArray[np.float64]
) -> PathPosterior:
    """Joint density product ``init[x_1] prod a[x_{k-1}, x_k] prod Phi(...)`` for every path.

    Paths are listed in lexicographic order (first coordinate most significant).
    """
    n, m = log_e.shape
    if m**n > MAX_ENUMERATION:
        raise ValueError(f"{m}**{n} paths exceed the enumeration limit {MAX_ENUMERATION}")
    paths = np.indices((m,) * n).reshape(n, -1).T.astype(np.int64)
    with np.errstate(divide="ignore"):
        log_a = np.log(A)
        log_init = np.log(init)
    steps = np.empty((paths.shape[0], n))
    steps[:, 0] = log_init[paths[:, 0]] + log_e[0, paths[:, 0]]
    for k in range(1, n):
        steps[:, k] = log_a[paths[:, k - 1], paths[:, k]] + log_e[k, paths[:, k]]
    prefix = np.cumsum(steps, axis=1)
    log_joint = prefix[:, -1]
    top = np.max(log_joint)
    log_norm = float(top + math.log(math.fsum(np.exp(log_joint - top))))
    return PathPosterior(paths, log_joint, log_norm, prefix)


def brute_force_posterior(psi: PsiState, traj: Trajectory) -> PathPosterior:
    return enumerate_posterior(emission_matrix(psi, traj), psi.A_hat.a, np.asarray(psi.init_hat))


@dataclass(frozen=True)
class TransitionCounts:
    counts: NDArray[np.int64]
    estimate: TransitionMatrix
    raw: NDArray[np.float64]


def transition_counts(x: ArrayLike, m: int | None = None) -> TransitionCounts:
    """Counts ``n_ij`` of ``i -> j`` moves along ``x`` and their row-normalised estimate.

    ``raw`` is ``n_ij / len(x)``; rows never left fall back to uniform in ``estimate``.
    """
    x = np.asarray(x, dtype=np.int64)
    if x.size < 2:
        raise ValueError("need at least two states to count transitions")
    m = int(x.max()) + 1 if m is None else m
    counts = np.zeros((m, m), dtype=np.int64)
    np.add.at(counts, (x[:-1], x[1:]), 1)
    rows = counts.sum(axis=1, keepdims=True)
    est = np.where(rows > 0, counts / np.where(rows > 0, rows, 1), 1.0 / m)
    return TransitionCounts(counts, TransitionMatrix(est), counts / x.size)
