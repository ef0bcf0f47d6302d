"""MS-NAR model definitions and stability diagnostics.

An MS-NAR process is ``Y_k = r_{X_k}(Y_{k-1}) + sigma_{X_k} * eps_k`` where
``X`` is a finite homogeneous Markov chain. Regime labels are 0-based
throughout the Python API.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Any, Callable, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

ROW_SUM_TOL = 1e-12


class ModelError(ValueError):
    """Invalid model specification."""


class ChainStructureError(ModelError):
    """Transition matrix is reducible or periodic."""


# ---------------------------------------------------------------------------
# Transition matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic matrix ``a[i, j] = P(X_k = j | X_{k-1} = i)``."""

    a: NDArray[np.float64]

    def __post_init__(self) -> None:
        a = np.array(self.a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise ModelError(f"transition matrix must be square, got shape {a.shape}")
        if np.any(~np.isfinite(a)) or np.any(a < 0) or np.any(a > 1):
            raise ModelError("transition entries must lie in [0, 1]")
        sums = a.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)
        if bad.size:
            raise ModelError(
                f"row {int(bad[0])} of transition matrix sums to {sums[bad[0]]!r}, not 1"
            )
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    @property
    def m(self) -> int:
        return self.a.shape[0]

    def permuted(self, perm: Sequence[int]) -> "TransitionMatrix":
        """Relabel states so that new state ``k`` is old state ``perm[k]``."""
        p = np.asarray(perm)
        return TransitionMatrix(self.a[np.ix_(p, p)])

    def reachable(self) -> NDArray[np.bool_]:
        """Boolean reachability matrix (paths of length >= 1)."""
        adj = self.a > 0
        reach = adj.copy()
        for _ in range(self.m):
            nxt = reach | ((reach.astype(int) @ adj.astype(int)) > 0)
            if np.array_equal(nxt, reach):
                break
            reach = nxt
        return reach

    def is_irreducible(self) -> bool:
        return bool(self.reachable().all())

    def period(self) -> int:
        """Period of an irreducible chain from BFS levels on the transition graph."""
        adj = self.a > 0
        level = {0: 0}
        frontier = [0]
        while frontier:
            nxt = []
            for u in frontier:
                for v in np.flatnonzero(adj[u]):
                    v = int(v)
                    if v not in level:
                        level[v] = level[u] + 1
                        nxt.append(v)
            frontier = nxt
        diffs = [
            level[u] + 1 - level[int(v)]
            for u in level
            for v in np.flatnonzero(adj[u])
            if int(v) in level
        ]
        return reduce(math.gcd, (abs(d) for d in diffs), 0) or 1

    def check_ergodic(self) -> None:
        """Raise :class:`ChainStructureError` unless irreducible and aperiodic."""
        reach = self.reachable()
        if not reach.all():
            i, j = map(int, np.argwhere(~reach)[0])
            raise ChainStructureError(
                f"reducible chain: state {j} is not reachable from state {i}"
            )
        d = self.period()
        if d != 1:
            raise ChainStructureError(f"periodic chain with period {d}")


def stationary_distribution(A: TransitionMatrix | ArrayLike) -> NDArray[np.float64]:
    """Invariant law ``mu`` with ``mu A = mu``.

    Solves the linear system ``(A^T - I) mu = 0`` with one equation replaced
    by the normalisation ``sum(mu) = 1``.
    """
    if not isinstance(A, TransitionMatrix):
        A = TransitionMatrix(np.asarray(A, dtype=float))
    A.check_ergodic()
    m = A.m
    lhs = A.a.T - np.eye(m)
    lhs[-1, :] = 1.0
    rhs = np.zeros(m)
    rhs[-1] = 1.0
    mu = np.linalg.solve(lhs, rhs)
    # one refinement step against the residual
    mu = mu + np.linalg.solve(lhs, rhs - lhs @ mu)
    return mu


# ---------------------------------------------------------------------------
# Regression functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Linear:
    slope: float
    intercept: float
    envelope: tuple[float, float] | None = None

    def __call__(self, y: ArrayLike) -> Any:
        return self.slope * np.asarray(y, dtype=float) + self.intercept

    def default_envelope(self) -> tuple[float, float]:
        return abs(self.slope), abs(self.intercept)


@dataclass(frozen=True)
class Bump:
    """``a*y + b*exp(-c*y**2)``."""

    a: float
    b: float
    c: float
    envelope: tuple[float, float] | None = None

    def __call__(self, y: ArrayLike) -> Any:
        y = np.asarray(y, dtype=float)
        return self.a * y + self.b * np.exp(-self.c * y * y)

    def default_envelope(self) -> tuple[float, float]:
        if self.c < 0:
            raise ModelError("bump with c < 0 has no sublinear envelope")
        return abs(self.a), abs(self.b)


@dataclass(frozen=True)
class Logistic:
    """``a/(1 + exp(c*y)) + d``."""

    a: float
    c: float
    d: float
    envelope: tuple[float, float] | None = None

    def __call__(self, y: ArrayLike) -> Any:
        y = np.asarray(y, dtype=float)
        # a * sigmoid(-c*y), overflow-safe
        return self.a * 0.5 * (1.0 - np.tanh(0.5 * self.c * y)) + self.d

    def default_envelope(self) -> tuple[float, float]:
        # range lies between d and a + d
        return 0.0, max(abs(self.d), abs(self.a + self.d))


@dataclass(frozen=True)
class Tabulated:
    """Piecewise-linear interpolant with linear extrapolation past the ends."""

    knots: tuple[float, ...]
    values: tuple[float, ...]
    envelope: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        k = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if k.ndim != 1 or k.shape != v.shape or k.size < 2:
            raise ModelError("tabulated function needs >= 2 knots and matching values")
        if np.any(np.diff(k) <= 0):
            raise ModelError("tabulated knots must be strictly increasing")
        object.__setattr__(self, "knots", tuple(map(float, k)))
        object.__setattr__(self, "values", tuple(map(float, v)))

    def __call__(self, y: ArrayLike) -> Any:
        return interp_extrapolate(
            np.asarray(y, dtype=float), np.asarray(self.knots), np.asarray(self.values)
        )

    def default_envelope(self) -> tuple[float, float]:
        k = np.asarray(self.knots)
        v = np.asarray(self.values)
        s_lo = (v[1] - v[0]) / (k[1] - k[0])
        s_hi = (v[-1] - v[-2]) / (k[-1] - k[-2])
        rho = max(abs(s_lo), abs(s_hi))
        return rho, float(np.max(np.abs(v)) + rho * np.max(np.abs(k)))


RegressionFunction = Union[Linear, Bump, Logistic, Tabulated]


def interp_extrapolate(x: Any, xp: NDArray, fp: NDArray) -> Any:
    """``np.interp`` with linear extrapolation from the boundary pairs."""
    out = np.interp(x, xp, fp)
    lo = x < xp[0]
    hi = x > xp[-1]
    if np.any(lo):
        s = (fp[1] - fp[0]) / (xp[1] - xp[0])
        out = np.where(lo, fp[0] + s * (x - xp[0]), out)
    if np.any(hi):
        s = (fp[-1] - fp[-2]) / (xp[-1] - xp[-2])
        out = np.where(hi, fp[-1] + s * (x - xp[-1]), out)
    return out


def eval_regression(f: RegressionFunction, y: ArrayLike) -> Any:
    out = f(y)
    return float(out) if np.ndim(out) == 0 else out


def envelope_of(f: RegressionFunction) -> tuple[float, float]:
    env = f.envelope if f.envelope is not None else f.default_envelope()
    rho, b = map(float, env)
    if rho < 0 or b < 0 or not (math.isfinite(rho) and math.isfinite(b)):
        raise ModelError(f"invalid sublinear envelope (rho={rho}, b={b})")
    return rho, b


def verify_envelope(
    f: RegressionFunction, lo: float = -50.0, hi: float = 50.0, num: int = 200_001
) -> bool:
    """Probe ``|r(y)| <= rho*|y| + b`` on a dense grid."""
    rho, b = envelope_of(f)
    y = np.linspace(lo, hi, num)
    return bool(np.all(np.abs(f(y)) <= rho * np.abs(y) + b + 1e-12 * (1 + np.abs(y))))


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------


def gaussian_logpdf(resid: Any, sigma: Any) -> Any:
    """Log-density of ``N(0, sigma^2)``; the default noise law."""
    return -0.5 * (resid / sigma) ** 2 - np.log(sigma) - 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class ModelSpec:
    transition: TransitionMatrix
    regimes: tuple[RegressionFunction, ...]
    noise_std: tuple[float, ...]
    initial_distribution: tuple[float, ...] | None = None
    noise_logpdf: Callable[[Any, Any], Any] = field(default=gaussian_logpdf, repr=False)

    def __post_init__(self) -> None:
        if not isinstance(self.transition, TransitionMatrix):
            object.__setattr__(self, "transition", TransitionMatrix(self.transition))
        m = self.transition.m
        object.__setattr__(self, "regimes", tuple(self.regimes))
        object.__setattr__(self, "noise_std", tuple(map(float, self.noise_std)))
        if len(self.regimes) != m or len(self.noise_std) != m:
            raise ModelError(
                f"expected {m} regimes and noise scales, got "
                f"{len(self.regimes)} and {len(self.noise_std)}"
            )
        if any(s < 0 or not math.isfinite(s) for s in self.noise_std):
            raise ModelError("noise_std entries must be finite and nonnegative")
        if self.initial_distribution is None:
            try:
                init = stationary_distribution(self.transition)
            except ChainStructureError:
                init = np.full(m, 1.0 / m)
        else:
            init = np.asarray(self.initial_distribution, dtype=float)
        if init.shape != (m,) or np.any(init < 0) or abs(init.sum() - 1) > ROW_SUM_TOL:
            raise ModelError("initial_distribution must be a probability vector of length m")
        object.__setattr__(self, "initial_distribution", tuple(map(float, init)))

    @property
    def m(self) -> int:
        return self.transition.m

    def regression(self, i: int, y: ArrayLike) -> Any:
        return self.regimes[i](y)

    def permuted(self, perm: Sequence[int]) -> "ModelSpec":
        p = list(perm)
        return ModelSpec(
            transition=self.transition.permuted(p),
            regimes=tuple(self.regimes[k] for k in p),
            noise_std=tuple(self.noise_std[k] for k in p),
            initial_distribution=tuple(self.initial_distribution[k] for k in p),
        )

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "transition": self.transition.a.tolist(),
            "regimes": [regression_to_dict(r) for r in self.regimes],
            "noise_std": list(self.noise_std),
            "initial_distribution": list(self.initial_distribution),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            return cls(
                transition=TransitionMatrix(np.asarray(d["transition"], dtype=float)),
                regimes=tuple(regression_from_dict(r) for r in d["regimes"]),
                noise_std=tuple(d["noise_std"]),
                initial_distribution=d.get("initial_distribution"),
            )
        except KeyError as exc:
            raise ModelError(f"model document missing field {exc.args[0]!r}") from None

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_KINDS = {"linear": Linear, "bump": Bump, "logistic": Logistic, "tabulated": Tabulated}


def regression_to_dict(f: RegressionFunction) -> dict:
    kind = {v: k for k, v in _KINDS.items()}[type(f)]
    out: dict[str, Any] = {"kind": kind}
    if isinstance(f, Linear):
        out.update(slope=f.slope, intercept=f.intercept)
    elif isinstance(f, Bump):
        out.update(a=f.a, b=f.b, c=f.c)
    elif isinstance(f, Logistic):
        out.update(a=f.a, c=f.c, d=f.d)
    else:
        out.update(knots=list(f.knots), values=list(f.values))
    if f.envelope is not None:
        out["envelope"] = list(f.envelope)
    return out


def regression_from_dict(d: dict) -> RegressionFunction:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _KINDS:
        raise ModelError(f"unknown regression kind {kind!r}")
    if "envelope" in d and d["envelope"] is not None:
        d["envelope"] = tuple(d["envelope"])
    if kind == "tabulated":
        d["knots"] = tuple(d["knots"])
        d["values"] = tuple(d["values"])
    try:
        return _KINDS[kind](**d)
    except TypeError as exc:
        raise ModelError(f"bad parameters for {kind} regression: {exc}") from None


def paper_section4_model() -> ModelSpec:
    """Bump and logistic regimes, sticky two-state chain, noise variance 0.4."""
    return ModelSpec(
        transition=TransitionMatrix(np.array([[0.98, 0.02], [0.02, 0.98]])),
        regimes=(Bump(0.7, 2.0, 10.0), Logistic(2.0, 10.0, -1.0)),
        noise_std=(math.sqrt(0.4), math.sqrt(0.4)),
        initial_distribution=(0.5, 0.5),
    )


# ---------------------------------------------------------------------------
# Stability
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StabilityReport:
    stationary_distribution: NDArray[np.float64]
    log_condition_value: float
    spectral_radius_qs: float
    moment_order_s: float
    rhos: tuple[float, ...]
    e4_holds: bool
    moments_finite: bool

    @property
    def stable(self) -> bool:
        return self.e4_holds and self.moments_finite

    def to_dict(self) -> dict:
        lcv = self.log_condition_value
        return {
            "stationary_distribution": self.stationary_distribution.tolist(),
            "log_condition_value": lcv if math.isfinite(lcv) else "-inf",
            "spectral_radius_qs": self.spectral_radius_qs,
            "moment_order_s": self.moment_order_s,
            "rhos": list(self.rhos),
            "e4_holds": self.e4_holds,
            "moments_finite": self.moments_finite,
            "stable": self.stable,
        }


def q_matrix(A: TransitionMatrix, rhos: Sequence[float], s: float) -> NDArray[np.float64]:
    """``Q_s[i, j] = rho_j**s * a[i, j]``."""
    return A.a * np.power(np.asarray(rhos, dtype=float), s)[None, :]


def check_stability(model: ModelSpec, s: float = 1.0) -> StabilityReport:
    """Sublinear-envelope stability and moment check for ``model``.

    The log-condition ``sum_i mu_i log rho_i`` uses ``log 0 = -inf``, so any
    stationary mass on a bounded regime satisfies it.
    """
    if s < 1:
        raise ModelError(f"moment order s must be >= 1, got {s}")
    rhos = tuple(envelope_of(r)[0] for r in model.regimes)
    mu = stationary_distribution(model.transition)
    terms = []
    for w, rho in zip(mu, rhos):
        if w == 0:
            continue
        terms.append(-math.inf if rho == 0 else w * math.log(rho))
    lcv = math.fsum(terms) if all(math.isfinite(t) for t in terms) else -math.inf
    radius = float(np.max(np.abs(np.linalg.eigvals(q_matrix(model.transition, rhos, s)))))
    return StabilityReport(
        stationary_distribution=mu,
        log_condition_value=lcv,
        spectral_radius_qs=radius,
        moment_order_s=float(s),
        rhos=rhos,
        e4_holds=lcv < 0,
        moments_finite=radius < 1,
    )
