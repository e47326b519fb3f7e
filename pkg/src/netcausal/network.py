"""Interaction matrices for the outcome and treatment fields.

Every constructor returns a symmetric matrix with zero diagonal.  Graph
families are scaled so that the operator norm stays O(beta) as n grows.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import networkx as nx
import numpy as np
import scipy.sparse as sp

FAMILIES = ("complete", "regular", "erdos_renyi", "graphon", "gaussian", "custom")

# Expected edge density below which graphs are stored sparse.
SPARSE_DENSITY = 0.05

HIGH_TEMP_THRESHOLD = 0.25


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    values: np.ndarray | sp.csr_matrix
    family: str = "custom"
    beta: float = 0.0
    seed: Optional[int] = None
    # unit-variance Gaussian ensemble before the beta scaling (gaussian family only)
    normalized: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        v = self.values
        if sp.issparse(v):
            v = sp.csr_matrix(v, dtype=float)
            v.sum_duplicates()
            v.eliminate_zeros()
            if v.shape[0] != v.shape[1]:
                raise ValueError("interaction matrix must be square")
            if (v - v.T).nnz:
                raise ValueError("interaction matrix must be symmetric")
            if np.any(v.diagonal() != 0):
                raise ValueError("interaction matrix must have zero diagonal")
        else:
            v = np.array(v, dtype=float)
            if v.ndim != 2 or v.shape[0] != v.shape[1]:
                raise ValueError("interaction matrix must be square")
            if not np.array_equal(v, v.T):
                raise ValueError("interaction matrix must be symmetric")
            if np.any(np.diag(v) != 0):
                raise ValueError("interaction matrix must have zero diagonal")
            v.setflags(write=False)
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def storage(self) -> str:
        return "sparse" if sp.issparse(self.values) else "dense"

    def dot(self, u: np.ndarray) -> np.ndarray:
        return self.values @ u

    def toarray(self) -> np.ndarray:
        return self.values.toarray() if sp.issparse(self.values) else np.array(self.values)

    def trace_sq(self) -> float:
        v = self.values
        if sp.issparse(v):
            return float(v.multiply(v).sum())
        return float(np.sum(v * v))

    def metadata(self) -> dict:
        return {"n": self.n, "family": self.family, "beta": self.beta, "seed": self.seed}


def _finish(dense_upper_mask, scale, family, beta, seed, sparse_storage):
    """Symmetrise an upper-triangular edge mask into a scaled matrix."""
    if sparse_storage:
        up = sp.triu(sp.csr_matrix(dense_upper_mask), k=1)
        vals = (up + up.T).astype(float) * scale
        return InteractionMatrix(sp.csr_matrix(vals), family, beta, seed)
    up = np.triu(dense_upper_mask, k=1).astype(float)
    return InteractionMatrix((up + up.T) * scale, family, beta, seed)


def _as_rng(rng) -> tuple[np.random.Generator, Optional[int]]:
    """Accept a Generator or an integer seed; the seed is kept for the sidecar."""
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(rng), (None if rng is None else int(rng))


def complete_graph(n: int, beta: float) -> InteractionMatrix:
    if n < 2:
        raise ValueError("complete graph needs n >= 2")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    a = np.full((n, n), beta / n)
    np.fill_diagonal(a, 0.0)
    return InteractionMatrix(a, "complete", beta)


def regular_graph(n: int, d: int, beta: float, rng) -> InteractionMatrix:
    """Random d-regular graph with edge weight beta/d."""
    rng, seed = _as_rng(rng)
    if not 0 < d < n:
        raise ValueError("need 0 < d < n")
    if (n * d) % 2:
        raise ValueError(f"no {d}-regular graph on {n} vertices (n*d odd)")
    if d == n - 1:
        a = complete_graph(n, beta).values * (n / d)
        return InteractionMatrix(a, "regular", beta, seed)
    g = nx.random_regular_graph(d, n, seed=int(rng.integers(2**32)))
    adj = nx.to_scipy_sparse_array(g, nodelist=range(n), format="csr", dtype=float)
    sparse_storage = d / n < SPARSE_DENSITY
    vals = sp.csr_matrix(adj) * (beta / d)
    return InteractionMatrix(vals if sparse_storage else vals.toarray(), "regular", beta, seed)


def erdos_renyi(n: int, p: float, beta: float, rng) -> InteractionMatrix:
    if not 0 < p <= 1:
        raise ValueError("edge probability must lie in (0, 1]")
    if n < 2:
        raise ValueError("need n >= 2")
    rng, seed = _as_rng(rng)
    mask = rng.random((n, n)) < p
    return _finish(mask, beta / (n * p), "erdos_renyi", beta, seed, p < SPARSE_DENSITY)


def graphon(
    n: int,
    W: Callable[[np.ndarray, np.ndarray], np.ndarray],
    rho: float,
    beta: float,
    rng,
) -> InteractionMatrix:
    """Sample from a graphon ``W``; edge (i, j) present with probability rho * W(U_i, U_j).

    ``W`` is called once on broadcastable arrays of latent positions.
    """
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    rng, seed = _as_rng(rng)
    u = rng.random(n)
    probs = np.broadcast_to(np.asarray(W(u[:, None], u[None, :]), dtype=float), (n, n))
    if np.any(probs < 0) or np.any(probs > 1):
        raise ValueError("graphon values must lie in [0, 1]")
    mask = rng.random((n, n)) < rho * probs
    density = rho * float(probs.mean())
    return _finish(mask, beta / (n * rho), "graphon", beta, seed, density < SPARSE_DENSITY)


def gaussian_sk(n: int, beta: float, rng) -> InteractionMatrix:
    """Gaussian ensemble: off-diagonal entries i.i.d. N(0, beta^2 / n).

    The unit-scale matrix ``G = A / beta`` is kept on ``normalized`` so that
    message passing can be run at beta = 0 too.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    rng, seed = _as_rng(rng)
    z = np.triu(rng.standard_normal((n, n)), k=1) / np.sqrt(n)
    g = z + z.T
    g.setflags(write=False)
    return InteractionMatrix(beta * g, "gaussian", beta, seed, normalized=g)


def custom(values, beta: float = 0.0) -> InteractionMatrix:
    return InteractionMatrix(values, "custom", beta)


def normalized_gaussian(A: InteractionMatrix) -> np.ndarray:
    """Unit-variance matrix behind ``A``: stored one if present, else A / beta."""
    if A.normalized is not None:
        return A.normalized
    if A.beta <= 0:
        raise ValueError("cannot normalise a matrix with beta = 0 and no stored ensemble")
    return A.toarray() / A.beta


@dataclass
class Diagnostics:
    op_norm: float
    trace_sq_over_n: float
    mean_field_flag: bool
    high_temp_flag: bool
    threshold: float
    power_converged: bool
    power_iterations: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def power_iteration(A, tol: float = 1e-8, max_iter: int = 10_000, rng=None):
    """Largest-magnitude eigenvalue of a symmetric matrix.

    Returns ``(estimate, converged, iterations)``.
    """
    n = A.shape[0]
    rng = np.random.default_rng(0) if rng is None else rng
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for it in range(1, max_iter + 1):
        w = A @ v
        new = float(np.linalg.norm(w))
        if new == 0.0:
            return 0.0, True, it
        v = w / new
        if abs(new - est) <= tol * max(new, 1.0):
            return new, True, it
        est = new
    warnings.warn("power iteration did not converge; returning last estimate")
    return est, False, max_iter


def diagnostics(
    A: InteractionMatrix,
    high_temp_threshold: float = HIGH_TEMP_THRESHOLD,
    mean_field_threshold: float = 0.05,
    tol: float = 1e-8,
    max_iter: int = 10_000,
) -> Diagnostics:
    """Operator norm and the two regime flags.

    ``mean_field_flag`` asks whether Tr(A^2)/n is below ``mean_field_threshold``
    (a finite-n stand-in for Tr(A^2) = o(n)); ``high_temp_flag`` whether the
    operator norm is below ``high_temp_threshold``.
    """
    op, ok, its = power_iteration(A.values, tol=tol, max_iter=max_iter)
    tsq = A.trace_sq() / A.n
    return Diagnostics(
        op_norm=op,
        trace_sq_over_n=tsq,
        mean_field_flag=tsq < mean_field_threshold,
        high_temp_flag=op < high_temp_threshold,
        threshold=high_temp_threshold,
        power_converged=ok,
        power_iterations=its,
    )


# ---------------------------------------------------------------------------
# I/O: upper-triangle coordinate text plus a JSON sidecar


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_coo(A: InteractionMatrix, path) -> None:
    path = Path(path)
    up = sp.triu(sp.coo_matrix(A.values), k=1)
    order = np.lexsort((up.col, up.row))
    with path.open("w") as fh:
        for i, j, v in zip(up.row[order], up.col[order], up.data[order]):
            fh.write(f"{i} {j} {float(v)!r}\n")
    sidecar_path(path).write_text(json.dumps(A.metadata(), indent=2) + "\n")


def load_coo(path) -> InteractionMatrix:
    path = Path(path)
    meta_file = sidecar_path(path)
    if not meta_file.exists():
        raise FileNotFoundError(f"missing metadata sidecar {meta_file}")
    meta = json.loads(meta_file.read_text())
    n = int(meta["n"])
    raw = np.loadtxt(path, ndmin=2) if path.stat().st_size else np.zeros((0, 3))
    rows = raw[:, 0].astype(int)
    cols = raw[:, 1].astype(int)
    if np.any(rows >= cols):
        raise ValueError("coordinate file must list the strict upper triangle only")
    up = sp.coo_matrix((raw[:, 2], (rows, cols)), shape=(n, n))
    full = sp.csr_matrix(up + up.T)
    density = full.nnz / max(n * (n - 1), 1)
    family = meta.get("family", "custom")
    beta = float(meta.get("beta", 0.0))
    values = full if density < SPARSE_DENSITY else full.toarray()
    normalized = None
    if family == "gaussian" and beta > 0:
        normalized = full.toarray() / beta
    return InteractionMatrix(values, family, beta, meta.get("seed"), normalized=normalized)
