"""Nadaraya-Watson estimation of per-regime regression functions from complete data."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from itertools import permutations
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from msnar.kernels import KernelConfig, KernelSmoother, weighted_sums
from msnar.model import ModelSpec, interp_extrapolate
from msnar.simulation import Trajectory

ZERO_DENOM = 1e-12


class MissingRegimesError(ValueError):
    def __init__(self) -> None:
        super().__init__("complete-data estimator requires observed regimes")


@dataclass(frozen=True)
class ThetaField:
    """Per-regime estimates on a grid: ``theta[i, g]`` with denominators ``f_hat[i, g]``."""

    grid: NDArray[np.float64]
    theta: NDArray[np.float64]
    f_hat: NDArray[np.float64]

    def __post_init__(self) -> None:
        grid = np.asarray(self.grid, dtype=float)
        theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        f_hat = np.atleast_2d(np.asarray(self.f_hat, dtype=float))
        if theta.shape != f_hat.shape or theta.shape[1] != grid.size:
            raise ValueError(
                f"inconsistent shapes grid={grid.shape} theta={theta.shape} f_hat={f_hat.shape}"
            )
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta entries must be finite")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "f_hat", f_hat)

    @property
    def m(self) -> int:
        return self.theta.shape[0]

    def permuted(self, perm: Sequence[int]) -> "ThetaField":
        p = list(perm)
        return ThetaField(self.grid, self.theta[p], self.f_hat[p])

    def evaluate(self, i: int, y: ArrayLike) -> NDArray[np.float64]:
        """Piecewise-linear interpolation of row ``i``, bridging zero-denominator points."""
        ok = self.f_hat[i] > ZERO_DENOM
        if ok.sum() >= 2:
            xp, fp = self.grid[ok], self.theta[i, ok]
        elif self.grid.size >= 2:
            xp, fp = self.grid, self.theta[i]
        else:
            return np.full(np.shape(y), self.theta[i, 0])
        return interp_extrapolate(np.asarray(y, dtype=float), xp, fp)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["y_grid"]
            + [f"theta_{i + 1}" for i in range(self.m)]
            + [f"f_hat_{i + 1}" for i in range(self.m)]
        )
        for g, yg in enumerate(self.grid):
            w.writerow(
                [format(float(yg), ".17g")]
                + [format(float(v), ".17g") for v in self.theta[:, g]]
                + [format(float(v), ".17g") for v in self.f_hat[:, g]]
            )
        return buf.getvalue()

    def save_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "ThetaField":
        rows = list(csv.reader(text.splitlines()))
        header, data = rows[0], np.array(rows[1:], dtype=float)
        m = (len(header) - 1) // 2
        return cls(data[:, 0], data[:, 1 : 1 + m].T, data[:, 1 + m :].T)


def indicator_weights(x: ArrayLike, m: int) -> NDArray[np.float64]:
    """``w[i, k] = 1{X_{k+1} = i}`` for ``k = 0..n-1``."""
    x = np.asarray(x)
    return (x[None, :] == np.arange(m)[:, None]).astype(float)


def nw_components(y: float, traj: Trajectory, i: int, config: KernelConfig) -> tuple[float, float]:
    """``(g_hat_i(y), f_hat_i(y))`` from the complete data."""
    if traj.x is None:
        raise MissingRegimesError()
    w = (traj.x == i).astype(float)
    f, g = weighted_sums(y, traj.y, w, config)
    return g, f


def ratio(g: NDArray, f: NDArray) -> NDArray[np.float64]:
    """``g/f`` with 0 wherever ``f`` is (numerically) zero."""
    safe = f > ZERO_DENOM
    return np.where(safe, g / np.where(safe, f, 1.0), 0.0)


def weighted_estimate(
    traj: Trajectory, weights: ArrayLike, config: KernelConfig, smoother: KernelSmoother | None = None
) -> ThetaField:
    smoother = smoother or KernelSmoother(traj.y, config)
    f, g = smoother.sums(weights)
    return ThetaField(config.grid_array, ratio(g, f), f)


def nw_estimate(
    traj: Trajectory,
    config: KernelConfig,
    m: int | None = None,
    smoother: KernelSmoother | None = None,
) -> ThetaField:
    """Per-regime Nadaraya-Watson estimate at every grid point."""
    if traj.x is None:
        raise MissingRegimesError()
    m = int(traj.x.max()) + 1 if m is None else m
    return weighted_estimate(traj, indicator_weights(traj.x, m), config, smoother)


@dataclass(frozen=True)
class SupError:
    errors: NDArray[np.float64]
    skipped_fraction: NDArray[np.float64]


def sup_error(
    field: ThetaField, truth: ModelSpec, region: tuple[float, float], perm: Sequence[int] | None = None
) -> SupError:
    """Max ``|theta_i - r_i|`` over grid points in ``region`` with nonzero denominator.

    ``perm[i]`` names the true regime compared against estimated row ``i``.
    """
    lo, hi = region
    if lo > hi or lo < field.grid[0] or hi > field.grid[-1]:
        raise ValueError(
            f"region [{lo}, {hi}] not inside grid span [{field.grid[0]}, {field.grid[-1]}]"
        )
    perm = list(range(field.m)) if perm is None else list(perm)
    inside = (field.grid >= lo) & (field.grid <= hi)
    errs = np.zeros(field.m)
    skipped = np.zeros(field.m)
    for i in range(field.m):
        ok = inside & (field.f_hat[i] > ZERO_DENOM)
        skipped[i] = 1.0 - ok.sum() / max(inside.sum(), 1)
        if ok.any():
            diff = field.theta[i, ok] - truth.regression(perm[i], field.grid[ok])
            errs[i] = float(np.max(np.abs(diff)))
    return SupError(errs, skipped)


def align_labels(
    field: ThetaField, truth: ModelSpec, region: tuple[float, float]
) -> tuple[list[int], SupError]:
    """Permutation of estimated rows minimising the total sup error against ``truth``."""
    best: tuple[float, list[int], SupError] | None = None
    for perm in permutations(range(field.m)):
        err = sup_error(field, truth, region, perm)
        total = float(err.errors.sum())
        if best is None or total < best[0]:
            best = (total, list(perm), err)
    assert best is not None
    return best[1], best[2]
