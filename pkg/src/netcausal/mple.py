"""Maximum pseudo-likelihood estimation.

Each site's conditional law given the rest is a linear tilt of the base
measure, so the log pseudo-likelihood is

    l(beta) = (1/n) sum_i [ r_i o_i + r_i z_i'beta - alpha(o_i + z_i'beta, 0) ]

with response ``r``, neighbour offset ``o = A r`` and design rows ``z_i``.
For outcomes ``z_i = (x_i, t_i)`` and the coefficient vector is
``(theta, tau)``; for treatments ``z_i = x_i`` with Rademacher base measure.
The objective is concave, and the fitter is a box-projected Newton ascent.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .measure import BaseMeasure, alpha, alpha_prime, alpha_second, rademacher
from .model import Dataset, ModelParams
from .network import InteractionMatrix

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200


def _objective(Z, r, offset, coef, mu):
    eta = offset + Z @ coef
    return float(np.mean(r * offset + r * (Z @ coef) - alpha(mu, eta, 0.0)))


def _gradient(Z, r, offset, coef, mu):
    eta = offset + Z @ coef
    return Z.T @ (r - alpha_prime(mu, eta, 0.0)) / r.size


def _neg_hessian(Z, r, offset, coef, mu):
    eta = offset + Z @ coef
    w = alpha_second(mu, eta, 0.0)
    return (Z * w[:, None]).T @ Z / r.size


def _outcome_design(data: Dataset):
    return np.column_stack([data.X, data.T])


def _coef(tau, theta):
    return np.append(np.atleast_1d(np.asarray(theta, dtype=float)), float(tau))


def pl_objective(data: Dataset, A: InteractionMatrix, mu: BaseMeasure, tau: float, theta) -> float:
    """Log pseudo-likelihood of outcome parameters (tau, theta)."""
    return _objective(_outcome_design(data), data.Y, A.dot(data.Y), _coef(tau, theta), mu)


def pl_gradient(data: Dataset, A: InteractionMatrix, mu: BaseMeasure, tau: float, theta) -> np.ndarray:
    """Gradient of :func:`pl_objective`, ordered ``(theta_1..theta_d, tau)``."""
    return _gradient(_outcome_design(data), data.Y, A.dot(data.Y), _coef(tau, theta), mu)


def pl_hessian(data: Dataset, A: InteractionMatrix, mu: BaseMeasure, tau: float, theta) -> np.ndarray:
    """Negative Hessian of :func:`pl_objective` (positive semidefinite), same ordering."""
    return _neg_hessian(_outcome_design(data), data.Y, A.dot(data.Y), _coef(tau, theta), mu)


def propensity_objective(data: Dataset, Mmat: InteractionMatrix, gamma) -> float:
    return _objective(data.X, data.T, Mmat.dot(data.T), np.asarray(gamma, float), rademacher())


def propensity_gradient(data: Dataset, Mmat: InteractionMatrix, gamma) -> np.ndarray:
    return _gradient(data.X, data.T, Mmat.dot(data.T), np.asarray(gamma, float), rademacher())


def propensity_hessian(data: Dataset, Mmat: InteractionMatrix, gamma) -> np.ndarray:
    return _neg_hessian(data.X, data.T, Mmat.dot(data.T), np.asarray(gamma, float), rademacher())


@dataclass
class FitResult:
    params: ModelParams
    coef: np.ndarray
    grad_norm: float
    min_hessian_eig: float
    iterations: int
    converged: bool
    objective_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "grad_norm": self.grad_norm,
            "min_hessian_eig": self.min_hessian_eig,
            "iterations": self.iterations,
            "converged": self.converged,
        }


def _projected_newton(Z, r, offset, mu, x0, lower, upper, tol, max_iter):
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    obj = _objective(Z, r, offset, x, mu)
    history = [obj]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = _gradient(Z, r, offset, x, mu)
        # projected gradient vanishes at a box-constrained maximiser
        pg = np.clip(x + g, lower, upper) - x
        if np.linalg.norm(pg) <= tol:
            converged = True
            break
        H = _neg_hessian(Z, r, offset, x, mu)
        # coordinates pinned at a bound with the gradient pushing outward stay put;
        # Newton acts on the free block only
        active = ((x <= lower) & (g < 0)) | ((x >= upper) & (g > 0))
        free = ~active
        direction = np.zeros_like(x)
        try:
            Hf = H[np.ix_(free, free)]
            if free.any() and np.linalg.cond(Hf) > 1e12:
                raise np.linalg.LinAlgError
            if free.any():
                direction[free] = np.linalg.solve(Hf, g[free])
        except np.linalg.LinAlgError:
            direction = np.where(free, g, 0.0)
        accepted = False
        for candidate_dir in (direction, g):
            step = 1.0
            while step >= 1e-12:
                cand = np.clip(x + step * candidate_dir, lower, upper)
                cand_obj = _objective(Z, r, offset, cand, mu)
                if cand_obj >= obj:
                    accepted = True
                    break
                step *= 0.5
            if accepted:
                break
        if not accepted:
            break
        moved = np.max(np.abs(cand - x))
        x, obj = cand, cand_obj
        history.append(obj)
        if moved < 1e-12:
            converged = np.linalg.norm(np.clip(x + _gradient(Z, r, offset, x, mu), lower, upper) - x) <= tol
            break
    g = _gradient(Z, r, offset, x, mu)
    H = _neg_hessian(Z, r, offset, x, mu)
    min_eig = float(np.linalg.eigvalsh(H)[0]) if H.size else float("nan")
    return x, float(np.linalg.norm(g)), min_eig, it, converged, history


def fit_outcome(
    data: Dataset,
    A: InteractionMatrix,
    mu: BaseMeasure,
    init: Optional[ModelParams] = None,
    box: tuple[float, float] = (1.0, 5.0),
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> FitResult:
    """Pseudo-likelihood estimate of (tau, theta) inside [-B, B] x [-M, M]^d."""
    B, M = box
    d = data.d
    x0 = np.zeros(d + 1) if init is None else _coef(init.tau, init.theta)
    lower = np.append(np.full(d, -M), -B)
    upper = -lower
    Z = _outcome_design(data)
    x, gnorm, min_eig, its, ok, hist = _projected_newton(
        Z, data.Y, A.dot(data.Y), mu, x0, lower, upper, tol, max_iter
    )
    if not ok:
        warnings.warn(f"outcome pseudo-likelihood fit did not converge (|grad| = {gnorm:.3g})")
    gamma = None if init is None else init.gamma
    params = ModelParams(tau=x[-1], theta=x[:-1], gamma=gamma, B=B, M=M)
    return FitResult(params, x, gnorm, min_eig, its, ok, hist)


def fit_propensity(
    data: Dataset,
    Mmat: InteractionMatrix,
    init_gamma=None,
    box: tuple[float, float] = (1.0, 5.0),
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> FitResult:
    """Pseudo-likelihood estimate of gamma for the treatment field.

    The returned ``params`` carries the fitted gamma with tau and theta zero.
    """
    B, M = box
    d = data.d
    x0 = np.zeros(d) if init_gamma is None else np.asarray(init_gamma, dtype=float)
    bound = np.full(d, M)
    x, gnorm, min_eig, its, ok, hist = _projected_newton(
        data.X, data.T, Mmat.dot(data.T), rademacher(), x0, -bound, bound, tol, max_iter
    )
    if not ok:
        warnings.warn(f"propensity pseudo-likelihood fit did not converge (|grad| = {gnorm:.3g})")
    params = ModelParams(tau=0.0, theta=np.zeros(d), gamma=x, B=B, M=M)
    return FitResult(params, x, gnorm, min_eig, its, ok, hist)
