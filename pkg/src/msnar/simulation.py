"""Reproducible simulation of MS-NAR trajectories."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import ndtri

from msnar.model import ModelSpec, TransitionMatrix, check_stability

DEFAULT_BURN_IN = 500

# 2**-53 grid shifted by half a step keeps uniforms strictly inside (0, 1)
_U53 = 2.0**-53


class SimulationError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class Trajectory:
    """Observed path ``y[0..n]`` with optional regimes ``x[j] = X_{j+1}``."""

    y: NDArray[np.float64]
    x: NDArray[np.int64] | None = None
    seed: int | None = None
    burn_in: int = 0
    model_digest: str | None = None

    def __post_init__(self) -> None:
        y = np.array(self.y, dtype=float)
        if y.ndim != 1 or y.size < 2:
            raise ValueError("trajectory needs y_0 and at least one observation")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)
        if self.x is not None:
            x = np.array(self.x, dtype=np.int64)
            if x.shape != (y.size - 1,):
                raise ValueError(f"expected {y.size - 1} regime labels, got {x.shape}")
            if np.any(x < 0):
                raise ValueError("regime labels must be nonnegative")
            x.setflags(write=False)
            object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y.size - 1

    def hidden(self) -> "Trajectory":
        return Trajectory(self.y, None, self.seed, self.burn_in, self.model_digest)

    def with_regimes(self, x: ArrayLike) -> "Trajectory":
        return Trajectory(self.y, np.asarray(x), self.seed, self.burn_in, self.model_digest)

    # -- CSV ---------------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(
            f"# model_hash={self.model_digest or ''} seed={'' if self.seed is None else self.seed}"
            f" burn_in={self.burn_in}\n"
        )
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "y", "x"])
        for k, yk in enumerate(self.y):
            xk = "" if (self.x is None or k == 0) else int(self.x[k - 1]) + 1
            w.writerow([k, format(float(yk), ".17g"), xk])
        return buf.getvalue()

    def save_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "Trajectory":
        meta: dict[str, str] = {}
        lines = text.splitlines()
        body = []
        for line in lines:
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    meta[key] = val
            elif line.strip():
                body.append(line)
        rows = list(csv.DictReader(body))
        y = [float(r["y"]) for r in rows]
        xs = [r.get("x", "") for r in rows[1:]]
        x = None if all(v in ("", None) for v in xs) else [int(v) - 1 for v in xs]
        seed = int(meta["seed"]) if meta.get("seed") else None
        return cls(
            np.asarray(y),
            None if x is None else np.asarray(x),
            seed=seed,
            burn_in=int(meta.get("burn_in") or 0),
            model_digest=meta.get("model_hash") or None,
        )

    @classmethod
    def load_csv(cls, path: str | Path) -> "Trajectory":
        return cls.from_csv(Path(path).read_text())


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent regime and innovation streams derived from one seed."""
    chain_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.PCG64(chain_ss)), np.random.Generator(
        np.random.PCG64(noise_ss)
    )


def open_uniforms(rng: np.random.Generator, size: int) -> NDArray[np.float64]:
    """Uniforms on the open interval (0, 1) with 53-bit resolution."""
    return (rng.integers(0, 2**53, size=size, dtype=np.int64).astype(float) + 0.5) * _U53


def standard_normals(rng: np.random.Generator, size: int) -> NDArray[np.float64]:
    """Inverse-CDF Gaussian draws (platform-stable, unlike ziggurat)."""
    return ndtri(open_uniforms(rng, size))


def categorical_from_uniform(p: NDArray[np.float64], u: float) -> int:
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, u * c[-1], side="right"), p.size - 1))


def _chain_from_uniforms(a: NDArray, init: NDArray, u: NDArray) -> NDArray[np.int64]:
    cum = np.cumsum(a, axis=1)
    cum[:, -1] = 1.0
    c0 = np.cumsum(init)
    c0[-1] = 1.0
    x = np.empty(u.size, dtype=np.int64)
    state = int(np.searchsorted(c0, u[0], side="right"))
    x[0] = state
    for k in range(1, u.size):
        state = int(np.searchsorted(cum[state], u[k], side="right"))
        x[k] = state
    return x


def simulate_chain(
    A: TransitionMatrix | ArrayLike,
    init: ArrayLike,
    n: int,
    seed: int | np.random.Generator,
) -> NDArray[np.int64]:
    """Draw ``x_1..x_n`` with ``x_1 ~ init`` and rows of ``A`` as kernels."""
    if not isinstance(A, TransitionMatrix):
        A = TransitionMatrix(np.asarray(A, dtype=float))
    init = np.asarray(init, dtype=float)
    if n < 1:
        raise ValueError("n must be >= 1")
    if init.shape != (A.m,) or np.any(init < 0) or abs(init.sum() - 1) > 1e-12:
        raise ValueError("init must be a probability vector of length m")
    rng = seed if isinstance(seed, np.random.Generator) else _rngs(seed)[0]
    return _chain_from_uniforms(A.a, init, open_uniforms(rng, n))


def simulate(
    model: ModelSpec,
    n: int,
    y0: float | Literal["stationary"] = "stationary",
    seed: int = 0,
    burn_in: int | None = None,
    *,
    chain_seed: int | None = None,
    noise_seed: int | None = None,
) -> Trajectory:
    """Simulate ``n`` steps of ``model``.

    With ``y0="stationary"`` the recursion starts at 0 and runs ``burn_in``
    extra steps (default 500) that are discarded. ``chain_seed`` and
    ``noise_seed`` override the two streams derived from ``seed``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    stationary = isinstance(y0, str)
    if stationary and y0 != "stationary":
        raise ValueError(f"y0 must be a number or 'stationary', got {y0!r}")
    if burn_in is None:
        burn_in = DEFAULT_BURN_IN if stationary else 0
    if burn_in < 0:
        raise ValueError("burn_in must be nonnegative")
    if stationary and burn_in > 0:
        report = check_stability(model)
        if not report.stable:
            raise SimulationError("burn-in toward stationarity requested for an unstable model")

    chain_rng, noise_rng = _rngs(seed)
    if chain_seed is not None:
        chain_rng = _rngs(chain_seed)[0]
    if noise_seed is not None:
        noise_rng = _rngs(noise_seed)[1]

    total = n + burn_in
    x = _chain_from_uniforms(
        model.transition.a, np.asarray(model.initial_distribution), open_uniforms(chain_rng, total)
    )
    eps = standard_normals(noise_rng, total)
    sig = np.asarray(model.noise_std)
    y = np.empty(total + 1)
    y[0] = 0.0 if stationary else float(y0)
    regimes = model.regimes
    for k in range(total):
        i = x[k]
        val = float(regimes[i](y[k])) + sig[i] * eps[k]
        if not math.isfinite(val):
            raise SimulationError(f"non-finite value at step {k + 1 - burn_in}", k + 1 - burn_in)
        y[k + 1] = val
    return Trajectory(
        y[burn_in:], x[burn_in:], seed=seed, burn_in=burn_in, model_digest=model.digest()
    )


def autocorrelation(y: ArrayLike, max_lag: int) -> NDArray[np.float64]:
    """Sample autocorrelation at lags ``0..max_lag`` (biased estimator)."""
    y = np.asarray(y, dtype=float)
    d = y - y.mean()
    denom = float(d @ d)
    return np.array([float(d[: d.size - k] @ d[k:]) / denom for k in range(max_lag + 1)])


def replicate_seeds(master: int, count: int) -> Sequence[int]:
    """Derived 32-bit seeds for independent replications."""
    return [int(s) for s in np.random.SeedSequence(master).generate_state(count)]
