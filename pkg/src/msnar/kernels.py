"""Kernels, bandwidth rule and the shared kernel-weighted sum primitive."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

Family = Literal["gaussian", "epanechnikov"]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def kernel_eval(family: Family, u: ArrayLike) -> NDArray[np.float64] | float:
    u = np.asarray(u, dtype=float)
    if family == "gaussian":
        out = _INV_SQRT_2PI * np.exp(-0.5 * u * u)
    elif family == "epanechnikov":
        out = np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    else:
        raise ValueError(f"unknown kernel family {family!r}")
    return float(out) if out.ndim == 0 else out


def default_bandwidth(n: int) -> float:
    """``(log n / n) ** (1/5)``: shrinks to 0 while ``n*h`` grows."""
    if n < 2:
        raise ValueError("bandwidth rule needs n >= 2")
    return (math.log(n) / n) ** 0.2


@dataclass(frozen=True)
class KernelConfig:
    family: Family = "gaussian"
    bandwidth: float = 0.5
    grid: tuple[float, ...] = (0.0,)

    def __post_init__(self) -> None:
        if self.family not in ("gaussian", "epanechnikov"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise ValueError("bandwidth must be positive")
        g = np.asarray(self.grid, dtype=float)
        if g.ndim != 1 or g.size == 0 or np.any(np.diff(g) <= 0):
            raise ValueError("grid must be a nonempty strictly increasing sequence")
        object.__setattr__(self, "grid", tuple(map(float, g)))

    @property
    def grid_array(self) -> NDArray[np.float64]:
        return np.asarray(self.grid)

    @classmethod
    def for_data(
        cls,
        y: ArrayLike,
        family: Family = "gaussian",
        bandwidth: float | None = None,
        num: int = 201,
    ) -> "KernelConfig":
        """Default config: rule-of-thumb ``h`` and an equispaced grid over the data ± h."""
        y = np.asarray(y, dtype=float)
        h = default_bandwidth(y.size - 1) if bandwidth is None else bandwidth
        grid = np.linspace(y.min() - h, y.max() + h, num)
        return cls(family, h, tuple(grid))


def weighted_sums(y: float, ys: ArrayLike, w: ArrayLike, config: KernelConfig) -> tuple[float, float]:
    """Kernel sums at a single point ``y``.

    ``S0 = sum_k w_k K((y - Y_k)/h) / (n h)`` and
    ``S1 = sum_k w_k Y_{k+1} K((y - Y_k)/h) / (n h)`` for ``k = 0..n-1``.
    Uses correctly rounded summation.
    """
    ys = np.asarray(ys, dtype=float)
    w = np.asarray(w, dtype=float)
    n = ys.size - 1
    if w.shape != (n,):
        raise ValueError(f"expected {n} weights, got {w.shape}")
    h = config.bandwidth
    kw = w * kernel_eval(config.family, (y - ys[:-1]) / h)
    nh = n * h
    return math.fsum(kw) / nh, math.fsum(kw * ys[1:]) / nh


class KernelSmoother:
    """Kernel matrix of one trajectory against a grid, reused across weight vectors.

    ``sums(W)`` evaluates :func:`weighted_sums` at every grid point for each
    column of ``W`` (pairwise summation along the time axis).
    """

    def __init__(self, ys: ArrayLike, config: KernelConfig):
        ys = np.asarray(ys, dtype=float)
        self.config = config
        self.n = ys.size - 1
        self.y_next = ys[1:]
        grid = config.grid_array
        h = config.bandwidth
        self.kmat = np.ascontiguousarray(
            kernel_eval(config.family, (grid[:, None] - ys[None, :-1]) / h)
        ) / (self.n * h)

    def sums(self, weights: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Return ``(S0, S1)`` of shape ``(m, G)`` for weights of shape ``(m, n)``."""
        w = np.atleast_2d(np.asarray(weights, dtype=float))
        if w.shape[1] != self.n:
            raise ValueError(f"expected weights with {self.n} columns, got {w.shape}")
        s0 = np.empty((w.shape[0], self.kmat.shape[0]))
        s1 = np.empty_like(s0)
        for i, wi in enumerate(w):
            s0[i] = np.sum(self.kmat * wi, axis=1)
            s1[i] = np.sum(self.kmat * (wi * self.y_next), axis=1)
        return s0, s1
