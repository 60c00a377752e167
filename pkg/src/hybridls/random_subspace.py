"""Data-driven subspaces spanned by realisations of a random field.

A random field ``g(x, Z)`` with ``E_Z g(x, Z) = f(x)`` yields the subspace
``V_n = span{g(., Z_1), ..., g(., Z_n)}``.  The space is discretised on a grid
of ``Q`` points (empirical measure), orthonormalised by QR and then sampled
by leverage scores, see :func:`hybridls.basis.discretize_basis` and
:func:`hybridls.sampler.sample_induced_discrete`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .basis import DiscreteBasis, discretize_basis
from .constraint import ConvexCone
from .decoder import Approximant
from .errors import RankDeficiencyError

__all__ = [
    "RandomFieldGenerator",
    "SnapshotSet",
    "SpectrumDiagnostic",
    "gaussian_series_field",
    "build_subspace",
    "mc_average_baseline",
    "projection_error",
    "subspace_error_curve",
    "empirical_kernel_spectrum",
]


class RandomFieldGenerator:
    """Random field ``g(x, Z)``.

    Parameters
    ----------
    draw_params : callable
        ``draw_params(count, rng)`` returns ``count`` realisations of ``Z``
        stacked along axis 0.
    evaluate : callable
        ``evaluate(points, params)`` returns the ``(N, count)`` matrix
        ``g(points[a], params[b])``.
    mean : callable, optional
        The target ``f(x) = E_Z g(x, Z)`` when known.
    variance : callable, optional
        ``sigma^2(x) = Var_Z g(x, Z)`` when known.
    """

    mean_is_target = True

    def __init__(self, draw_params: Callable, evaluate: Callable, mean: Optional[Callable] = None,
                 variance: Optional[Callable] = None, name: str = "field"):
        self.draw_params = draw_params
        self.evaluate = evaluate
        self.mean = mean
        self.variance = variance
        self.name = name

    def realisations(self, count, rng):
        params = self.draw_params(count, rng)
        return params, (lambda x, _p=params: self.evaluate(np.atleast_2d(x), _p))

    def sample_values(self, points, rng) -> np.ndarray:
        """One independent realisation at each point (a noisy oracle draw)."""
        points = np.atleast_2d(points)
        params = self.draw_params(len(points), rng)
        return self.evaluate_diagonal(points, params)

    def evaluate_diagonal(self, points, params) -> np.ndarray:
        """``g(points[i], params[i])`` for each ``i``; override for speed."""
        return np.array([self.evaluate(points[i:i + 1], params[i:i + 1])[0, 0]
                         for i in range(len(points))])


def gaussian_series_field(mean: Callable, modes: Callable, eigenvalues, name="series"):
    """``g(x, xi) = f(x) + sum_j sqrt(lambda_j) xi_j psi_j(x)`` with iid standard normal ``xi``.

    ``modes(points)`` returns the ``(N, J)`` matrix of ``psi_j``.  If the
    modes are orthonormal, ``lambda`` is the covariance spectrum and
    ``||sigma||^2 = sum(lambda)``.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    root = np.sqrt(lam)
    J = lam.size

    def draw(count, rng):
        return rng.standard_normal((count, J))

    def evaluate(points, params):
        return mean(points)[:, None] + (modes(points) * root) @ params.T

    def variance(points):
        return (modes(points) ** 2) @ lam

    gen = RandomFieldGenerator(draw, evaluate, mean=mean, variance=variance, name=name)
    gen.evaluate_diagonal = lambda points, params: (
        mean(points) + np.einsum("ij,ij->i", modes(points) * root, params))
    gen.eigenvalues = lam
    return gen


@dataclass
class SnapshotSet:
    """Field parameters and the ``Q x n`` snapshot matrix on the grid."""

    params: np.ndarray
    matrix: np.ndarray
    attempts: int = 1


def build_subspace(gen: RandomFieldGenerator, n: int, grid, rng: np.random.Generator,
                   retries: int = 3, grid_weights=None, domain=None):
    """Draw ``n`` realisations, discretise on the grid and orthonormalise.

    Returns ``(basis, cone, snapshots)``.  On rank deficiency the snapshots are
    redrawn up to ``retries`` more times before the error is raised.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[0] < n:
        raise ValueError(f"need Q >= n (Q={grid.shape[0]}, n={n})")
    last = None
    for attempt in range(retries + 1):
        params, fn = gen.realisations(n, rng)
        try:
            basis = discretize_basis(fn, grid, measure_weights=grid_weights, domain=domain,
                                     metadata={"field": gen.name, "attempt": attempt})
        except RankDeficiencyError as exc:
            last = exc
            continue
        snaps = SnapshotSet(params, basis.snapshot_matrix, attempt + 1)
        return basis, ConvexCone.from_basis(basis), snaps
    raise RankDeficiencyError(last.rank, last.expected,
                              f"{last} after {retries + 1} attempts with fresh realisations")


def mc_average_baseline(basis: DiscreteBasis, k: int) -> Approximant:
    """Average of the first ``k`` snapshots, as an element of the space."""
    n = basis.n
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n (k={k}, n={n})")
    beta = np.zeros(n)
    beta[:k] = 1.0 / k
    alpha = basis.to_orthonormal_coefficients(beta)
    return Approximant(alpha, basis, "AVG", generator_coefficients=beta)


def projection_error(snapshot_matrix, target, grid_weights=None, rtol=1e-10) -> float:
    """``min_v ||f - v||`` over the span of the snapshot columns, grid ``L2`` norm.

    Uses a truncated SVD so that rank-deficient snapshot sets are allowed.
    """
    G = np.asarray(snapshot_matrix, dtype=float)
    f = np.asarray(target, dtype=float).reshape(-1)
    q = G.shape[0]
    sw = np.full(q, 1.0 / np.sqrt(q)) if grid_weights is None else np.sqrt(np.asarray(grid_weights) / np.sum(grid_weights))
    A, b = G * sw[:, None], f * sw
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return float(np.linalg.norm(b))
    Uk = U[:, s > rtol * s[0]]
    resid = b - Uk @ (Uk.T @ b)
    return float(np.linalg.norm(resid))


def subspace_error_curve(gen: RandomFieldGenerator, f_reference, n_values, grid, replicates: int,
                         rng: np.random.Generator, grid_weights=None):
    """Best-approximation error of ``f`` in ``V_n`` for each ``n``, over replicates.

    Returns a list of rows ``{"n", "mean", "std", "median", "errors"}``.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    f_grid = f_reference(grid) if callable(f_reference) else np.asarray(f_reference, dtype=float)
    nmax = max(n_values)
    errs = np.empty((replicates, len(n_values)))
    for r in range(replicates):
        params, fn = gen.realisations(nmax, rng)
        G = np.asarray(fn(grid), dtype=float)
        for j, n in enumerate(n_values):
            errs[r, j] = projection_error(G[:, :n], f_grid, grid_weights)
    return [{"n": int(n), "mean": float(errs[:, j].mean()), "std": float(errs[:, j].std()),
             "median": float(np.median(errs[:, j])), "errors": errs[:, j].copy()}
            for j, n in enumerate(n_values)]


@dataclass(frozen=True)
class SpectrumDiagnostic:
    eigenvalues: np.ndarray
    tail_sums: np.ndarray
    raw_trace: float

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "eigenvalue", "tail_sum"])
            for i, (lam, tau) in enumerate(zip(self.eigenvalues, self.tail_sums), start=1):
                writer.writerow([i, f"{lam:.17g}", f"{tau:.17g}"])


def empirical_kernel_spectrum(snapshots, grid_weights=None) -> SpectrumDiagnostic:
    """Spectrum of the empirical covariance kernel of the snapshots.

    Eigenvalues of ``C^T diag(omega) C / (n - 1)`` where ``C`` holds the
    snapshots centred by their sample mean and ``omega`` are the grid
    weights.  Eigenvalues are sorted decreasingly and clipped at zero;
    ``tail_sums[s-1] = sum_{i >= s} lambda_i``.
    """
    G = np.asarray(snapshots.matrix if isinstance(snapshots, SnapshotSet) else snapshots, dtype=float)
    q, n = G.shape
    if n < 2:
        raise ValueError("need at least two snapshots")
    omega = np.full(q, 1.0 / q) if grid_weights is None else np.asarray(grid_weights) / np.sum(grid_weights)
    C = G - G.mean(axis=1, keepdims=True)
    K = C.T @ (C * omega[:, None]) / (n - 1)
    lam = np.linalg.eigvalsh(0.5 * (K + K.T))[::-1]
    raw = float(lam.sum())
    lam = np.maximum(lam, 0.0)
    tails = np.cumsum(lam[::-1])[::-1]
    return SpectrumDiagnostic(lam, tails, raw)
