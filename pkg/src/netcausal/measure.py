"""Base measures on [-1, 1] and their quadratic exponential tilts.

A tilt of ``mu`` by ``(lam1, lam2)`` reweights each atom ``x`` by
``exp(lam1 * x + lam2 * x**2 / 2)``.  ``alpha`` is the log-normaliser of
that reweighting, ``alpha_prime`` the tilted mean and ``alpha_second`` the
tilted variance.  All three accept a vector of ``lam1`` values sharing one
``lam2``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

QUADRATURE_NODES = 64


class TiltParams(NamedTuple):
    lambda1: float
    lambda2: float = 0.0


@dataclass(frozen=True, eq=False)
class BaseMeasure:
    """Probability measure on [-1, 1] stored as weighted atoms.

    ``kind`` is ``"discrete"`` for genuine point masses and ``"quadrature"``
    when the atoms are Gauss-Legendre nodes standing in for a density.
    """

    kind: str
    locations: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if self.kind not in ("discrete", "quadrature"):
            raise ValueError(f"unknown measure kind {self.kind!r}")
        if loc.shape != w.shape or loc.size == 0:
            raise ValueError("locations and weights must be non-empty and the same length")
        if np.any(np.abs(loc) > 1.0):
            raise ValueError("atom locations must lie in [-1, 1]")
        if np.any(w <= 0):
            raise ValueError("atom weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        if np.unique(loc).size < 2:
            raise ValueError("measure is degenerate: need at least two distinct atoms")
        loc.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "_logw", np.log(w))
        # +-1 with equal mass: closed forms via tanh are exact and faster
        rademacher = loc.size == 2 and set(loc.tolist()) == {-1.0, 1.0} and w[0] == w[1]
        object.__setattr__(self, "_rademacher", rademacher)
        order = np.argsort(loc)
        symmetric = np.allclose(loc[order], -loc[order][::-1], rtol=0, atol=1e-12) and np.allclose(
            w[order], w[order][::-1], rtol=0, atol=1e-12
        )
        object.__setattr__(self, "_symmetric", bool(symmetric))

    @property
    def is_rademacher(self) -> bool:
        return self._rademacher

    @property
    def is_symmetric(self) -> bool:
        """True when the measure is invariant under x -> -x."""
        return self._symmetric

    @property
    def n_atoms(self) -> int:
        return self.locations.size

    def mean(self) -> float:
        return float(self.weights @ self.locations)

    def variance(self) -> float:
        m = self.mean()
        return float(self.weights @ (self.locations - m) ** 2)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "atoms": [[float(x), float(w)] for x, w in zip(self.locations, self.weights)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BaseMeasure":
        atoms = np.asarray(data["atoms"], dtype=float)
        return cls(data["kind"], atoms[:, 0], atoms[:, 1])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "BaseMeasure":
        return cls.from_dict(json.loads(text))


def rademacher() -> BaseMeasure:
    return BaseMeasure("discrete", np.array([-1.0, 1.0]), np.array([0.5, 0.5]))


def uniform(nodes: int = QUADRATURE_NODES) -> BaseMeasure:
    """Unif[-1, 1] as a Gauss-Legendre rule; weights are halved to get a probability."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    w = w / w.sum()
    return BaseMeasure("quadrature", x, w)


def discrete(locations, weights) -> BaseMeasure:
    return BaseMeasure("discrete", np.asarray(locations, float), np.asarray(weights, float))


PRESETS = {"rademacher": rademacher, "uniform": uniform}


def get_measure(spec) -> BaseMeasure:
    """Resolve a preset name, a JSON dict, or pass a BaseMeasure through."""
    if isinstance(spec, BaseMeasure):
        return spec
    if isinstance(spec, dict):
        return BaseMeasure.from_dict(spec)
    try:
        return PRESETS[spec]()
    except KeyError:
        raise ValueError(f"unknown measure preset {spec!r}; choose from {sorted(PRESETS)}") from None


def _log_tilt_weights(mu: BaseMeasure, lam1, lam2):
    """Unnormalised log weights, shape (..., n_atoms)."""
    x = mu.locations
    lam1 = np.asarray(lam1, dtype=float)
    return mu._logw + lam1[..., None] * x + 0.5 * lam2 * x * x


def _tilt_probs(mu: BaseMeasure, lam1, lam2):
    logw = _log_tilt_weights(mu, lam1, lam2)
    top = logw.max(axis=-1, keepdims=True)
    p = np.exp(logw - top)
    s = p.sum(axis=-1, keepdims=True)
    return p / s, top[..., 0] + np.log(s[..., 0])


def _logcosh(x):
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)


def alpha(mu: BaseMeasure, lam1, lam2: float = 0.0):
    """Log moment generating function ``log E_mu exp(lam1 X + lam2 X^2 / 2)``."""
    if mu.is_rademacher:
        out = 0.5 * lam2 + _logcosh(np.asarray(lam1, dtype=float))
    else:
        _, out = _tilt_probs(mu, lam1, lam2)
    return out if np.ndim(out) else float(out)


def alpha_prime(mu: BaseMeasure, lam1, lam2: float = 0.0):
    """Mean of the tilted measure; derivative of ``alpha`` in ``lam1``."""
    if mu.is_rademacher:
        out = np.tanh(np.asarray(lam1, dtype=float))
    else:
        p, _ = _tilt_probs(mu, lam1, lam2)
        out = p @ mu.locations
        if mu.is_symmetric:
            # the mean is odd in lam1; averaging with the mirror makes alpha'(0) exactly 0
            q, _ = _tilt_probs(mu, -np.asarray(lam1, dtype=float), lam2)
            out = 0.5 * (out - q @ mu.locations)
    return out if np.ndim(out) else float(out)


def alpha_second(mu: BaseMeasure, lam1, lam2: float = 0.0):
    """Variance of the tilted measure; second derivative of ``alpha`` in ``lam1``."""
    if mu.is_rademacher:
        c = np.cosh(np.clip(np.asarray(lam1, dtype=float), -350.0, 350.0))
        out = 1.0 / (c * c)
    else:
        p, _ = _tilt_probs(mu, lam1, lam2)
        m = p @ mu.locations
        out = np.sum(p * (mu.locations - np.asarray(m)[..., None]) ** 2, axis=-1)
    return out if np.ndim(out) else float(out)


def tilt_probabilities(mu: BaseMeasure, lam1, lam2: float = 0.0) -> np.ndarray:
    """Atom probabilities of the tilted measure."""
    p, _ = _tilt_probs(mu, lam1, lam2)
    return p


def tilt_sample(mu: BaseMeasure, lam: TiltParams, rng: np.random.Generator, size=None):
    """Draw from the tilted measure by inverse-CDF on the atoms."""
    p = tilt_probabilities(mu, lam[0], lam[1])
    cdf = np.cumsum(p)
    u = rng.random(size)
    idx = np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), mu.n_atoms - 1)
    out = mu.locations[idx]
    return out if np.ndim(out) else float(out)
