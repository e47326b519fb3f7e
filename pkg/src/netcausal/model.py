"""Outcome and treatment Markov random fields.

Outcomes follow

    f(y | t, x)  ∝  exp(y'Ay / 2 + y'(tau t + x theta))  prod_i mu(dy_i)

and treatments the Ising-type field

    P(T = t | x)  ∝  exp(t'Mt / 2 + sum_i t_i x_i'gamma).

This module holds the data containers, single-site conditionals,
systematic-scan Gibbs samplers and an exhaustive-enumeration oracle for
small instances.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .measure import BaseMeasure, TiltParams, rademacher
from .network import InteractionMatrix

ENUMERATION_LIMIT = 10**7


def _as_2d(x, n=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or (n is not None and x.shape[0] != n):
        raise ValueError(f"covariates must have shape (n, d); got {x.shape}")
    return x


def external_field(tau: float, theta, t, x) -> np.ndarray:
    """Per-site linear field ``tau * t + x @ theta``.

    Every algorithm routes through this helper so that identical inputs give
    bit-identical fields.
    """
    x = _as_2d(x)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    return tau * t + x @ theta


# ---------------------------------------------------------------------------
# containers


@dataclass
class ModelParams:
    tau: float
    theta: np.ndarray
    gamma: np.ndarray = None
    B: float = 1.0
    M: float = 5.0

    def __post_init__(self):
        self.tau = float(self.tau)
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        if self.gamma is None:
            self.gamma = np.zeros_like(self.theta)
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if self.B <= 0 or self.M <= 0:
            raise ValueError("box bounds B and M must be positive")
        if abs(self.tau) > self.B:
            raise ValueError(f"|tau| = {abs(self.tau)} exceeds box bound B = {self.B}")
        if np.any(np.abs(self.theta) > self.M) or np.any(np.abs(self.gamma) > self.M):
            raise ValueError(f"theta/gamma exceed box bound M = {self.M}")

    @property
    def d(self) -> int:
        return self.theta.size

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "theta": self.theta.tolist(),
            "gamma": self.gamma.tolist(),
            "B": self.B,
            "M": self.M,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        return cls(
            tau=data["tau"],
            theta=data["theta"],
            gamma=data.get("gamma"),
            B=data.get("B", 1.0),
            M=data.get("M", 5.0),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class OutcomeModel:
    A: InteractionMatrix
    tau: float
    theta: np.ndarray
    mu: BaseMeasure = field(default_factory=rademacher)

    def __post_init__(self):
        object.__setattr__(self, "theta", np.atleast_1d(np.asarray(self.theta, dtype=float)))
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def n(self) -> int:
        return self.A.n

    def field(self, t, x) -> np.ndarray:
        return external_field(self.tau, self.theta, t, _as_2d(x, self.n))


@dataclass(frozen=True, eq=False)
class PropensityModel:
    Mmat: InteractionMatrix
    gamma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gamma", np.atleast_1d(np.asarray(self.gamma, dtype=float)))

    @property
    def n(self) -> int:
        return self.Mmat.n

    def field(self, x) -> np.ndarray:
        return _as_2d(x, self.n) @ self.gamma


@dataclass(frozen=True, eq=False)
class Dataset:
    Y: np.ndarray
    T: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float).ravel()
        T = np.asarray(self.T, dtype=float).ravel()
        X = _as_2d(self.X, Y.size)
        if T.size != Y.size:
            raise ValueError("Y and T must have the same length")
        if np.any(np.abs(Y) > 1):
            raise ValueError("outcomes must lie in [-1, 1]")
        if not np.all(np.abs(T) == 1):
            raise ValueError("treatments must be +-1")
        if np.any(np.abs(X) > 1):
            raise ValueError("covariates must lie in [-1, 1]")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.Y.size

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y", "t"] + [f"x{k + 1}" for k in range(self.d)])
            for i in range(self.n):
                w.writerow([repr(float(self.Y[i])), int(self.T[i])] + [repr(float(v)) for v in self.X[i]])

    @classmethod
    def load_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["y", "t"] or header[2:] != [f"x{k + 1}" for k in range(len(header) - 2)]:
                raise ValueError(f"unexpected header {header}; expected y,t,x1..xd")
            rows = np.array([[float(v) for v in row] for row in reader if row], dtype=float)
        rows = rows.reshape(-1, len(header))
        return cls(rows[:, 0], rows[:, 1], rows[:, 2:])


@dataclass(frozen=True)
class CovariateDist:
    """Product covariate law on [-1, 1]^d: ``uniform`` on [low, high] or a ``point`` mass."""

    kind: str = "uniform"
    low: float = -1.0
    high: float = 1.0
    value: float = 0.0

    def __post_init__(self):
        if self.kind == "uniform":
            if not -1.0 <= self.low < self.high <= 1.0:
                raise ValueError("uniform covariates must have -1 <= low < high <= 1")
        elif self.kind == "point":
            if abs(self.value) > 1.0:
                raise ValueError("point mass must lie in [-1, 1]")
        else:
            raise ValueError(f"unknown covariate distribution {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "CovariateDist":
        """``"uniform"``, ``"uniform:LOW,HIGH"`` or ``"point:V"``."""
        kind, _, arg = text.partition(":")
        if kind == "uniform":
            if not arg:
                return cls()
            lo, hi = (float(v) for v in arg.split(","))
            return cls("uniform", low=lo, high=hi)
        if kind == "point":
            return cls("point", value=float(arg))
        raise ValueError(f"cannot parse covariate distribution {text!r}")

    def describe(self) -> str:
        if self.kind == "point":
            return f"point:{self.value!r}"
        return "uniform" if (self.low, self.high) == (-1.0, 1.0) else f"uniform:{self.low!r},{self.high!r}"

    def sample(self, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "point":
            return np.full((n, d), self.value)
        return rng.uniform(self.low, self.high, size=(n, d))


def sample_covariates(n: int, d: int, dist: CovariateDist, rng: np.random.Generator) -> np.ndarray:
    return dist.sample(n, d, rng)


# ---------------------------------------------------------------------------
# densities and conditionals


def log_unnormalized(m: OutcomeModel, y, t, x) -> float:
    """``y'Ay / 2 + y'(tau t + x theta)``; the base-measure factor is not included."""
    y = np.asarray(y, dtype=float)
    return float(0.5 * y @ m.A.dot(y) + y @ m.field(t, x))


def conditional_tilt_outcome(m: OutcomeModel, y, t, x, i: int) -> TiltParams:
    """Tilt of mu giving the law of ``y_i`` given the other outcomes."""
    if not 0 <= i < m.n:
        raise IndexError(f"site {i} out of range for n = {m.n}")
    y = np.asarray(y, dtype=float)
    x = _as_2d(x, m.n)
    row = m.A.values[i]
    coupling = float(row @ y) if not sp.issparse(row) else float((row @ y)[0])
    lam1 = coupling + m.tau * float(t[i]) + float(x[i] @ m.theta)
    return TiltParams(lam1, 0.0)


def _row_dot(A: InteractionMatrix):
    v = A.values
    if sp.issparse(v):
        indptr, indices, data = v.indptr, v.indices, v.data

        def dot(i, y):
            a, b = indptr[i], indptr[i + 1]
            return float(data[a:b] @ y[indices[a:b]]) if b > a else 0.0

        return dot

    def dot(i, y):
        return float(v[i] @ y)

    return dot


def _gibbs(A, ext, mu, sweeps, burn_in, rng, y0, return_trace, thin):
    if not sweeps > burn_in >= 0:
        raise ValueError("need sweeps > burn_in >= 0")
    n = A.n
    rowdot = _row_dot(A)
    loc = mu.locations
    logw = mu._logw
    y = np.array(y0, dtype=float) if y0 is not None else rng.choice(loc, size=n)
    binary = loc.size == 2
    if binary:
        x0, x1 = float(loc[0]), float(loc[1])
        bias = float(logw[1] - logw[0])
        span = x1 - x0
    trace = []
    exp = math.exp
    for s in range(sweeps):
        u = rng.random(n)
        for i in range(n):
            lam = rowdot(i, y) + ext[i]
            if binary:
                z = bias + lam * span
                p1 = 1.0 / (1.0 + exp(-z)) if z > -700 else 0.0
                y[i] = x1 if u[i] < p1 else x0
            else:
                lw = logw + lam * loc
                p = np.exp(lw - lw.max())
                cdf = np.cumsum(p)
                k = int(np.searchsorted(cdf, u[i] * cdf[-1], side="right"))
                y[i] = loc[min(k, loc.size - 1)]
        if return_trace and s >= burn_in and (s - burn_in) % thin == 0:
            trace.append(y.copy())
    if return_trace:
        return y, np.array(trace)
    return y


def gibbs_sample_outcome(
    m: OutcomeModel,
    t,
    x,
    sweeps: int,
    burn_in: int,
    rng: np.random.Generator,
    y0=None,
    return_trace: bool = False,
    thin: int = 1,
):
    """Systematic-scan Gibbs sampler for the outcome field.

    ``sweeps`` counts all sweeps including the ``burn_in`` ones.  Returns the
    final state, or ``(final, trace)`` with one row per kept sweep when
    ``return_trace`` is set.
    """
    ext = m.field(t, x)
    return _gibbs(m.A, ext, m.mu, sweeps, burn_in, rng, y0, return_trace, thin)


_PM1 = rademacher()


def gibbs_sample_treatment(
    p: PropensityModel,
    x,
    sweeps: int,
    burn_in: int,
    rng: np.random.Generator,
    t0=None,
    return_trace: bool = False,
    thin: int = 1,
):
    """Gibbs sampler for treatments; site i is +1 with probability (1 + tanh(h_i)) / 2."""
    ext = p.field(x)
    return _gibbs(p.Mmat, ext, _PM1, sweeps, burn_in, rng, t0, return_trace, thin)


# ---------------------------------------------------------------------------
# exhaustive enumeration


def _enumerate(Adense, ext, loc, logw, chunk=1 << 16):
    """Exact site means and log-normaliser over all atom configurations."""
    n = ext.size
    s = loc.size
    total = s**n
    if total > ENUMERATION_LIMIT:
        raise ValueError(
            f"state space {s}^{n} = {total} exceeds the enumeration limit {ENUMERATION_LIMIT}"
        )
    radix = s ** np.arange(n - 1, -1, -1, dtype=np.int64)
    run_max = -np.inf
    run_sum = 0.0
    run_first = np.zeros(n)
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total), dtype=np.int64)
        idx = (codes[:, None] // radix) % s
        y = loc[idx]
        logf = 0.5 * np.einsum("ki,ij,kj->k", y, Adense, y) + y @ ext + logw[idx].sum(axis=1)
        new_max = max(run_max, float(logf.max()))
        rescale = math.exp(run_max - new_max) if np.isfinite(run_max) else 0.0
        wts = np.exp(logf - new_max)
        run_sum = run_sum * rescale + wts.sum()
        run_first = run_first * rescale + wts @ y
        run_max = new_max
    return run_first / run_sum, run_max + math.log(run_sum)


def brute_force_means(m: OutcomeModel, t, x) -> tuple[np.ndarray, float]:
    """Exact ``E(Y_i | t, x)`` for every site, plus log Z(t, x), by full enumeration.

    Only discrete base measures are accepted.
    """
    if m.mu.kind != "discrete":
        raise ValueError("enumeration requires a discrete base measure")
    return _enumerate(m.A.toarray(), m.field(t, x), m.mu.locations, m.mu._logw)


def brute_force_treatment_means(p: PropensityModel, x) -> tuple[np.ndarray, float]:
    """Exact ``E(T_i | x)`` and log Z'(x) for the treatment field (n <= 20 in practice)."""
    # uniform +-1 weights shift log Z' by n log 2; undo it to match the unweighted sum
    means, logz = _enumerate(p.Mmat.toarray(), p.field(x), np.array([-1.0, 1.0]), np.log([0.5, 0.5]))
    return means, logz + p.n * math.log(2.0)
