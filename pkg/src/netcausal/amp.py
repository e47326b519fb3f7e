"""Approximate message passing for Gaussian interaction matrices.

The outcome field is a soft-spin SK model with random external fields
``h_i = tau T_i + x_i'theta`` and couplings ``A = beta G`` where G has
unit-variance / n entries.  Message passing needs the overlap ``q`` and the
variance ``sigma2`` that solve

    sigma2 = E alpha''(h + beta sqrt(q) Z, beta^2 sigma2)
    q      = E alpha'(h + beta sqrt(q) Z, beta^2 sigma2)^2

with Z ~ N(0, 1) and h drawn from the field law.  The expectations are
taken over one frozen Monte-Carlo sample, so the map is deterministic and
Picard iteration converges to a reproducible point at high temperature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .effects import direct_effect, indirect_effect
from .measure import BaseMeasure, alpha_prime, alpha_second
from .meanfield import EffectDraw
from .model import CovariateDist, external_field

VARIANTS = ("treated_random", "all_control")


class AmpDivergence(FloatingPointError):
    pass


@dataclass
class FixedPointSample:
    """Frozen draws (T, H, Z) used to evaluate the fixed-point expectations."""

    T: np.ndarray
    H: np.ndarray
    Z: np.ndarray

    @property
    def size(self) -> int:
        return self.Z.size


def draw_fixed_point_sample(
    theta,
    cov_dist: CovariateDist,
    variant: str,
    mc_samples: int,
    rng: np.random.Generator,
    p_treat: float = 0.5,
) -> FixedPointSample:
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if mc_samples < 100:
        raise ValueError("need at least 100 Monte-Carlo samples")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    T = np.where(rng.random(mc_samples) < p_treat, 1.0, -1.0)
    if variant == "all_control":
        T = -np.ones(mc_samples)
    X = cov_dist.sample(mc_samples, theta.size, rng)
    H = X @ theta
    Z = rng.standard_normal(mc_samples)
    return FixedPointSample(T, H, Z)


@dataclass
class FixedPoint:
    q: float
    sigma2: float
    mc_samples: int
    iterations: int
    converged: bool
    variant: str = "treated_random"
    se_q: float = float("nan")
    se_sigma2: float = float("nan")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def fixed_point_map(mu: BaseMeasure, tau: float, beta: float, sample: FixedPointSample, sigma2: float, q: float):
    """One application of the (sigma2, q) map; also returns the per-draw terms."""
    z = tau * sample.T + sample.H + beta * math.sqrt(max(q, 0.0)) * sample.Z
    lam2 = beta * beta * sigma2
    var_terms = alpha_second(mu, z, lam2)
    sq_terms = alpha_prime(mu, z, lam2) ** 2
    return float(var_terms.mean()), float(sq_terms.mean()), var_terms, sq_terms


def solve_fixed_point_on(
    mu: BaseMeasure,
    tau: float,
    beta: float,
    sample: FixedPointSample,
    variant: str = "treated_random",
    tol: float = 1e-12,
    max_iter: int = 1000,
    init: tuple[float, float] = (1.0, 0.0),
) -> FixedPoint:
    """Picard iteration of the fixed-point map on a given frozen sample.

    ``init`` is ``(sigma2, q)``.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    sigma2, q = float(init[0]), float(init[1])
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        s_new, q_new, var_terms, sq_terms = fixed_point_map(mu, tau, beta, sample, sigma2, q)
        change = max(abs(s_new - sigma2), abs(q_new - q))
        sigma2, q = s_new, q_new
        if change < tol:
            converged = True
            break
    _, _, var_terms, sq_terms = fixed_point_map(mu, tau, beta, sample, sigma2, q)
    n = sample.size
    return FixedPoint(
        q=q,
        sigma2=sigma2,
        mc_samples=n,
        iterations=it,
        converged=converged,
        variant=variant,
        se_q=float(sq_terms.std(ddof=1) / math.sqrt(n)),
        se_sigma2=float(var_terms.std(ddof=1) / math.sqrt(n)),
    )


def solve_fixed_point(
    mu: BaseMeasure,
    tau: float,
    theta,
    cov_dist: CovariateDist,
    beta: float,
    variant: str = "treated_random",
    mc_samples: int = 1000,
    tol: float = 1e-12,
    rng: Optional[np.random.Generator] = None,
    init: tuple[float, float] = (1.0, 0.0),
    p_treat: float = 0.5,
    max_iter: int = 1000,
) -> FixedPoint:
    """Draw a frozen sample of size ``mc_samples`` and solve on it."""
    rng = np.random.default_rng() if rng is None else rng
    sample = draw_fixed_point_sample(theta, cov_dist, variant, mc_samples, rng, p_treat)
    return solve_fixed_point_on(mu, tau, beta, sample, variant, tol, max_iter, init)


@dataclass
class AmpState:
    u: np.ndarray
    u_prev: np.ndarray
    onsager: float
    m: np.ndarray
    iter: int
    tap_residual: float = float("nan")
    onsager_history: list = field(default_factory=list)


def amp_iterate(
    G: np.ndarray,
    mu: BaseMeasure,
    tau: float,
    theta,
    t_bar,
    x_bar,
    beta: float,
    fp: FixedPoint,
    M: int = 500,
) -> AmpState:
    """Run exactly ``M`` message-passing steps and return the mean estimate.

    ``t_bar`` may be the scalar -1 for the all-control run.  ``G`` is the
    unit-scale coupling matrix; the couplings used are ``beta * G``.
    """
    if M < 3:
        raise ValueError("M must be >= 3")
    G = np.asarray(G, dtype=float)
    n = G.shape[0]
    h = external_field(tau, theta, t_bar, x_bar)
    lam2 = beta * beta * fp.sigma2
    u_prev = np.zeros(n)
    u = G @ np.full(n, math.sqrt(fp.q))
    d = 0.0
    history = []
    for k in range(2, M):
        a = alpha_prime(mu, beta * u + h, lam2)
        d = beta * float(np.mean(alpha_second(mu, beta * u + h, lam2)))
        new = G @ a - d * alpha_prime(mu, beta * u_prev + h, lam2)
        if not np.all(np.isfinite(new)):
            raise AmpDivergence(f"non-finite AMP iterate at iteration {k + 1}")
        history.append(d)
        u_prev, u = u, new
    m = alpha_prime(mu, beta * u + h, lam2)
    state = AmpState(u, u_prev, d, m, M, onsager_history=history)
    state.tap_residual = tap_residual(m, G, mu, h, beta, fp.sigma2)
    return state


def tap_residual(m, G, mu: BaseMeasure, h, beta: float, sigma2: float) -> float:
    """RMS of ``m - alpha'(beta G m + h - beta^2 sigma2 m, beta^2 sigma2)``."""
    m = np.asarray(m, dtype=float)
    lam2 = beta * beta * sigma2
    rhs = alpha_prime(mu, beta * (G @ m) + h - lam2 * m, lam2)
    return float(np.sqrt(np.mean((m - rhs) ** 2)))


def estimate_effects_amp(
    G: np.ndarray,
    mu: BaseMeasure,
    tau: float,
    theta,
    t_bar,
    x_bar,
    beta: float,
    fp: FixedPoint,
    fp_tilde: FixedPoint,
    M: int = 500,
    p_alloc: float = 0.5,
) -> EffectDraw:
    """DE/IE from the treated and all-control message-passing runs.

    ``fp`` and ``fp_tilde`` are the treated-random and all-control fixed
    points; they depend only on distributions, so callers solve them once
    and reuse them across replicates.
    """
    t_bar = np.asarray(t_bar, dtype=float)
    state = amp_iterate(G, mu, tau, theta, t_bar, x_bar, beta, fp, M)
    state_tilde = amp_iterate(G, mu, tau, theta, -1.0, x_bar, beta, fp_tilde, M)
    de = direct_effect(t_bar, state.m, p_alloc)
    ie = indirect_effect(state.m, state_tilde.m, de, p_alloc)
    return EffectDraw(de, ie, state, state_tilde)
