"""Orthonormal bases of the approximation space and their Christoffel function.

Two kinds of basis are provided.

``tensor_legendre_basis``
    Tensor products of univariate Legendre polynomials, normalised to the
    uniform probability measure on a box.

``discretize_basis``
    An orthonormal basis computed from ``n`` snapshot functions on a grid of
    ``Q`` points.  Grid convention: with ``G`` the ``Q x n`` matrix of
    snapshot values, the reduced Householder QR ``G / sqrt(Q) = Q_ R`` gives the
    basis ``v(x) = g(x)^T R^{-1}``, so the grid matrix ``B = G R^{-1}`` obeys
    ``B^T B / Q = I``.  A function with orthonormal coefficients ``alpha`` has
    snapshot coefficients ``beta = R^{-1} alpha``.  The diagonal of ``R`` is made
    positive so that already-orthonormal snapshots give ``R = I``.
"""

from __future__ import annotations

import itertools
import json
import os
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .domain import HyperRectangle, ProductMeasure, quadrature_integral, write_points_csv, read_points_csv
from .errors import RankDeficiencyError

__all__ = [
    "BasisSet",
    "DiscreteBasis",
    "ChristoffelProfile",
    "legendre_normalized",
    "tensor_legendre_basis",
    "christoffel",
    "discretize_basis",
    "gram_matrix",
    "save_discrete_basis",
    "load_discrete_basis",
]

RANK_TOL = 1e-10


def legendre_normalized(t, degree: int) -> np.ndarray:
    """Values of ``sqrt(2k+1) P_k(t)`` for ``k = 0..degree``, shape ``(len(t), degree+1)``.

    Uses the three-term recurrence; orthonormal for the uniform probability
    measure on ``[-1, 1]``.
    """
    t = np.asarray(t, dtype=float).reshape(-1)
    out = np.empty((t.size, degree + 1))
    p_prev = np.ones_like(t)
    out[:, 0] = p_prev
    if degree >= 1:
        p_cur = t.copy()
        out[:, 1] = p_cur
        for k in range(1, degree):
            p_next = ((2 * k + 1) * t * p_cur - k * p_prev) / (k + 1)
            p_prev, p_cur = p_cur, p_next
            out[:, k + 1] = p_cur
    out *= np.sqrt(2 * np.arange(degree + 1) + 1.0)
    return out


class BasisSet:
    """``n`` orthonormal functions on a domain.

    Parameters
    ----------
    n : int
        Dimension of the space.
    evaluator : callable
        Maps an ``(N, d)`` array of points to the ``(N, n)`` matrix of basis values.
    domain : HyperRectangle
    context : {"continuous", "discrete"}
        Measure under which the functions are orthonormal.
    metadata : dict
        Construction provenance.
    """

    def __init__(self, n, evaluator, domain, context="continuous", metadata=None):
        self.n = int(n)
        self._evaluator = evaluator
        self.domain = domain
        self.context = context
        self.metadata = dict(metadata or {})

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def measure(self) -> ProductMeasure:
        return ProductMeasure.uniform(self.domain)

    def __call__(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got {points.shape[1]}")
        return self._evaluator(points)

    evaluate = __call__

    def __repr__(self):
        kind = self.metadata.get("kind", "custom")
        return f"{type(self).__name__}(kind={kind!r}, n={self.n}, d={self.dim})"


class DiscreteBasis(BasisSet):
    """Basis orthonormal under a discrete measure on ``Q`` grid points.

    Keeps the snapshot evaluator so the basis can be evaluated off the grid,
    and the triangular factor ``r_factor`` relating orthonormal and snapshot
    coordinates (``alpha = R beta``).
    """

    def __init__(self, snapshot_fn, grid, snapshot_matrix, r_factor, domain,
                 grid_weights=None, metadata=None):
        self.snapshot_fn = snapshot_fn
        self.grid = np.asarray(grid, dtype=float)
        self.snapshot_matrix = snapshot_matrix
        self.r_factor = r_factor
        q = self.grid.shape[0]
        self.grid_weights = (np.full(q, 1.0 / q) if grid_weights is None
                             else np.asarray(grid_weights, dtype=float))
        self.grid_matrix = solve_triangular(r_factor.T, snapshot_matrix.T, lower=True).T
        super().__init__(r_factor.shape[0], self._evaluate_anywhere, domain,
                         context="discrete", metadata=metadata)

    @property
    def Q(self) -> int:
        return self.grid.shape[0]

    @property
    def change_of_basis(self) -> np.ndarray:
        """Matrix ``T = R^{-1}`` mapping orthonormal to snapshot coefficients."""
        return solve_triangular(self.r_factor, np.eye(self.n))

    def to_snapshot_coefficients(self, alpha) -> np.ndarray:
        return solve_triangular(self.r_factor, np.asarray(alpha, dtype=float))

    def to_orthonormal_coefficients(self, beta) -> np.ndarray:
        return self.r_factor @ np.asarray(beta, dtype=float)

    def snapshots(self, points) -> np.ndarray:
        return np.asarray(self.snapshot_fn(np.atleast_2d(points)), dtype=float)

    def _evaluate_anywhere(self, points):
        g = self.snapshots(points)
        return solve_triangular(self.r_factor.T, g.T, lower=True).T


class ChristoffelProfile:
    """Christoffel function ``phi(x) = sum_i v_i(x)^2`` and weight ``w = n / phi``."""

    def __init__(self, basis: BasisSet):
        self.basis = basis
        self.n = basis.n

    def phi(self, points) -> np.ndarray:
        vals = self.basis(points)
        return np.einsum("ij,ij->i", vals, vals)

    def weight(self, points) -> np.ndarray:
        return self.n / self.phi(points)

    def phi_grid(self) -> np.ndarray:
        """Christoffel function on the grid points of a discrete basis."""
        b = self.basis.grid_matrix
        return np.einsum("ij,ij->i", b, b)

    __call__ = phi


def christoffel(basis: BasisSet) -> ChristoffelProfile:
    return ChristoffelProfile(basis)


def tensor_legendre_basis(domain: HyperRectangle, max_degree: int) -> BasisSet:
    """Full tensor-product Legendre basis of per-dimension degree ``max_degree``.

    Orthonormal for the uniform probability measure on ``domain``; the
    multi-indices run in lexicographic order with the last coordinate fastest.
    """
    if max_degree < 0:
        raise ValueError("max_degree must be non-negative")
    d = domain.dim
    D = int(max_degree)
    multi_indices = np.array(list(itertools.product(range(D + 1), repeat=d)), dtype=int)
    lo, width = domain.lower_array, domain.width

    def evaluate(points):
        t = 2.0 * (points - lo) / width - 1.0
        out = np.ones((points.shape[0], multi_indices.shape[0]))
        for j in range(d):
            uni = legendre_normalized(t[:, j], D)
            out *= uni[:, multi_indices[:, j]]
        return out

    meta = {"kind": "tensor-legendre", "max_degree": D, "multi_indices": multi_indices}
    return BasisSet(len(multi_indices), evaluate, domain, metadata=meta)


def _vectorize_snapshots(snapshots) -> Callable:
    if callable(snapshots):
        return snapshots
    funcs = list(snapshots)

    def evaluate(points):
        return np.column_stack([np.asarray(f(points), dtype=float).reshape(-1) for f in funcs])

    return evaluate


def discretize_basis(snapshots, grid, measure_weights=None, domain=None,
                     metadata=None) -> DiscreteBasis:
    """Orthonormalise snapshot functions under the discrete measure of a grid.

    Parameters
    ----------
    snapshots : callable or sequence of callables
        Either one vectorised function returning the ``(Q, n)`` snapshot
        matrix, or ``n`` scalar functions each returning ``Q`` values.
    grid : (Q, d) array
    measure_weights : (Q,) array, optional
        Probability weights of the grid points; uniform ``1/Q`` by default.
    domain : HyperRectangle, optional
        Defaults to the bounding box of the grid.

    Raises
    ------
    RankDeficiencyError
        If the numerical rank (singular values of ``R`` above
        ``1e-10 * max``) is below ``n``.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    fn = _vectorize_snapshots(snapshots)
    gmat = np.asarray(fn(grid), dtype=float)
    if gmat.ndim != 2 or gmat.shape[0] != grid.shape[0]:
        raise ValueError("snapshot evaluation must return a (Q, n) matrix")
    q, n = gmat.shape
    if q < n:
        raise ValueError(f"need at least as many grid points as snapshots (Q={q}, n={n})")
    if not np.all(np.isfinite(gmat)):
        raise ValueError("snapshot values must be finite on the grid")
    if measure_weights is None:
        scaled = gmat / np.sqrt(q)
    else:
        measure_weights = np.asarray(measure_weights, dtype=float)
        measure_weights = measure_weights / measure_weights.sum()
        scaled = gmat * np.sqrt(measure_weights)[:, None]
    r = np.linalg.qr(scaled, mode="r")
    sv = np.linalg.svd(r, compute_uv=False)
    rank = int(np.sum(sv > RANK_TOL * sv[0])) if sv[0] > 0 else 0
    if rank < n:
        raise RankDeficiencyError(rank, n)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    r = signs[:, None] * r
    if domain is None:
        lo, hi = grid.min(axis=0), grid.max(axis=0)
        domain = HyperRectangle(lo, np.where(hi > lo, hi, lo + 1.0))
    meta = {"kind": "discrete", "Q": q, "n": n}
    meta.update(metadata or {})
    return DiscreteBasis(fn, grid, gmat, r, domain, grid_weights=measure_weights, metadata=meta)


def gram_matrix(basis: BasisSet, level: int = 64) -> np.ndarray:
    """Gram matrix of the basis under its own orthonormality context."""
    if isinstance(basis, DiscreteBasis):
        b = basis.grid_matrix
        return b.T @ (b * basis.grid_weights[:, None])
    nodes, weights = basis.measure.quadrature_rule(level)
    vals = basis(nodes)
    return vals.T @ (vals * weights[:, None])


def christoffel_mass(basis: BasisSet, level: int = 64) -> float:
    """Integral of ``phi / n`` under the reference measure (equals 1)."""
    prof = christoffel(basis)
    if isinstance(basis, DiscreteBasis):
        return float(basis.grid_weights @ prof.phi_grid() / basis.n)
    return quadrature_integral(lambda x: prof.phi(x) / basis.n, basis.measure, level)


def save_discrete_basis(basis: DiscreteBasis, directory, seed=None, extra=None):
    """Write ``grid.csv``, ``matrix.csv`` (the ``Q x n`` orthonormal grid matrix)
    and a ``basis.json`` sidecar."""
    os.makedirs(directory, exist_ok=True)
    write_points_csv(os.path.join(directory, "grid.csv"), basis.grid)
    np.savetxt(os.path.join(directory, "matrix.csv"), basis.grid_matrix, delimiter=",",
               fmt="%.17g", header=",".join(f"v{i + 1}" for i in range(basis.n)), comments="")
    meta = {"n": basis.n, "Q": basis.Q, "seed": seed, "kind": basis.metadata.get("kind", "discrete"),
            "domain": {"lower": list(basis.domain.lower), "upper": list(basis.domain.upper)}}
    meta.update(extra or {})
    with open(os.path.join(directory, "basis.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_discrete_basis(directory):
    """Read back the grid, orthonormal grid matrix and metadata."""
    grid = read_points_csv(os.path.join(directory, "grid.csv"))
    matrix = np.loadtxt(os.path.join(directory, "matrix.csv"), delimiter=",", skiprows=1, ndmin=2)
    with open(os.path.join(directory, "basis.json")) as fh:
        meta = json.load(fh)
    return grid, matrix, meta
