"""Mean-field fixed-point iteration for the outcome means.

Iterates ``u <- alpha'(A u + h, 0)`` from ``u = 0``, once with the sampled
treatments and once with everyone untreated, and turns the two mean
vectors into DE/IE estimates.  Intended for interaction matrices with
Tr(A^2) = o(n) and small operator norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .effects import direct_effect, indirect_effect
from .measure import alpha_prime
from .model import OutcomeModel, external_field

DEFAULT_ITERS = 500
DEFAULT_TOL = 1e-8


class NonFiniteIterate(FloatingPointError):
    pass


@dataclass
class MeanFieldState:
    u: np.ndarray
    iter: int
    residual: float
    converged: bool
    residuals: list
    u_tilde: Optional[np.ndarray] = None


def _iterate(A, mu, field, max_iter, tol, damping):
    u = np.zeros(A.n)
    history = []
    res = math.inf
    for it in range(1, max_iter + 1):
        new = alpha_prime(mu, A.dot(u) + field, 0.0)
        if damping:
            new = (1.0 - damping) * new + damping * u
        if not np.all(np.isfinite(new)):
            raise NonFiniteIterate(f"non-finite mean-field iterate at iteration {it}")
        res = float(np.linalg.norm(new - u) / math.sqrt(A.n))
        history.append(res)
        u = new
        if tol is not None and res < tol:
            return MeanFieldState(u, it, res, True, history)
    return MeanFieldState(u, max_iter, res, tol is None or res < tol, history)


def mf_iterate(
    m: OutcomeModel,
    t,
    x,
    max_iter: int = DEFAULT_ITERS,
    tol: Optional[float] = DEFAULT_TOL,
    damping: float = 0.0,
) -> MeanFieldState:
    """Run the fixed-point iteration for treatments ``t`` and the all-control twin.

    With ``tol=None`` exactly ``max_iter`` iterations are run.  ``damping``
    in [0, 1) mixes the previous iterate back in; 0 is the plain scheme.
    The returned state has ``converged=False`` instead of raising when the
    tolerance is not reached.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if tol is not None and tol <= 0:
        raise ValueError("tol must be positive")
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must lie in [0, 1)")
    x = np.asarray(x, dtype=float)
    treated = _iterate(m.A, m.mu, external_field(m.tau, m.theta, t, x), max_iter, tol, damping)
    control = _iterate(m.A, m.mu, external_field(m.tau, m.theta, -1.0, x), max_iter, tol, damping)
    treated.u_tilde = control.u
    treated.converged = treated.converged and control.converged
    treated.iter = max(treated.iter, control.iter)
    return treated


@dataclass
class EffectDraw:
    """One replicate's DE/IE plus the states that produced it."""

    de: float
    ie: float
    state: object
    state_tilde: object = None
    early_stopped: bool = False


def estimate_effects_mf(
    m: OutcomeModel,
    t_bar,
    x_bar,
    M: int = DEFAULT_ITERS,
    tol: Optional[float] = DEFAULT_TOL,
    p_alloc: float = 0.5,
    damping: float = 0.0,
) -> EffectDraw:
    state = mf_iterate(m, t_bar, x_bar, M, tol, damping)
    t_bar = np.asarray(t_bar, dtype=float)
    de = direct_effect(t_bar, state.u, p_alloc)
    ie = indirect_effect(state.u, state.u_tilde, de, p_alloc)
    return EffectDraw(de, ie, state, early_stopped=state.iter < M)
