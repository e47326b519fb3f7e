"""Plug-in direct/indirect effect formulas shared by both mean estimators.

For an allocation where every other unit is treated independently with
probability ``p``, the direct effect is the Horvitz-Thompson average

    DE = mean_i (a + b T_i) m_i,    a = (1/p - 1/(1-p)) / 2,  b = (1/p + 1/(1-p)) / 2

so that a + b = 1/p and b - a = 1/(1-p); p = 1/2 gives a = 0, b = 2.
The indirect effect is ``mean(m) - mean(m_control) - p * DE``.
"""

from __future__ import annotations

import numpy as np


def allocation_weights(p: float) -> tuple[float, float]:
    if not 0.0 < p < 1.0:
        raise ValueError("allocation probability must lie in (0, 1)")
    inv_t, inv_c = 1.0 / p, 1.0 / (1.0 - p)
    return 0.5 * (inv_t - inv_c), 0.5 * (inv_t + inv_c)


def direct_effect(t_bar: np.ndarray, m: np.ndarray, p: float = 0.5) -> float:
    a, b = allocation_weights(p)
    return float(np.sum((a + b * t_bar) * m) / m.size)


def indirect_effect(m: np.ndarray, m_control: np.ndarray, de: float, p: float = 0.5) -> float:
    return float((np.sum(m) - np.sum(m_control)) / m.size - p * de)


def draw_allocation(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Hypothetical treatment vector with P(T_i = +1) = p, independently."""
    return np.where(rng.random(n) < p, 1.0, -1.0)
