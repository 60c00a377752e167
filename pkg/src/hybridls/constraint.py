"""Projection onto the cone of nonnegative combinations of snapshot functions.

With the discrete basis convention ``alpha = R beta`` (see
:mod:`hybridls.basis`), the grid ``L2`` distance between two members of the
space equals the Euclidean distance of their orthonormal coefficients, and
the projection of ``alpha0`` onto the cone is ``R beta*`` where

    beta* = argmin_{beta >= 0} || R beta - alpha0 ||_2 .

This is the quadratic program ``min beta^T Gram beta - 2 beta^T Gram beta0``
with ``Gram = R^T R``, solved here by the Lawson-Hanson active-set method.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from .basis import DiscreteBasis
from .decoder import Approximant
from .errors import NumericalError

__all__ = ["ConvexCone", "nnls", "project", "kkt_certificate", "contraction_check"]


@dataclass(frozen=True)
class ConvexCone:
    """``{sum_i beta_i g_i : beta >= 0}`` for the snapshot functions ``g_i`` of a discrete basis."""

    basis: DiscreteBasis

    @property
    def n(self) -> int:
        return self.basis.n

    @property
    def r_factor(self) -> np.ndarray:
        return self.basis.r_factor

    @property
    def gram(self) -> np.ndarray:
        """Generator Gram matrix under the grid measure, ``R^T R``."""
        return self.r_factor.T @ self.r_factor

    @property
    def change_of_basis(self) -> np.ndarray:
        """Orthonormal coefficients to generator coefficients, ``R^{-1}``."""
        return self.basis.change_of_basis

    def generator_coefficients(self, alpha) -> np.ndarray:
        return solve_triangular(self.r_factor, np.asarray(alpha, dtype=float))

    def contains(self, alpha, tol=0.0) -> bool:
        return bool(np.all(self.generator_coefficients(alpha) >= -tol))

    @classmethod
    def from_basis(cls, basis: DiscreteBasis) -> "ConvexCone":
        if not isinstance(basis, DiscreteBasis):
            raise TypeError("the snapshot cone needs a discrete basis built from snapshots")
        return cls(basis)


def nnls(A, b, max_iter=None):
    """Lawson-Hanson active-set solution of ``min ||A x - b||`` subject to ``x >= 0``.

    Returns ``(x, iterations)``.  Raises :class:`NumericalError` when the
    number of active-set changes exceeds ``max_iter`` (default ``10 n``).
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = A.shape[1]
    if max_iter is None:
        max_iter = 10 * n
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    tol = 10 * np.finfo(float).eps * np.linalg.norm(A, 1) * max(np.linalg.norm(b), 1e-300)
    w = A.T @ (b - A @ x)
    it = 0
    while (~passive).any() and np.max(np.where(passive, -np.inf, w)) > tol:
        it += 1
        if it > max_iter:
            raise NumericalError(f"NNLS active set did not settle within {max_iter} iterations")
        j = int(np.argmax(np.where(passive, -np.inf, w)))
        passive[j] = True
        while True:
            s = np.zeros(n)
            P = np.flatnonzero(passive)
            s[P] = np.linalg.lstsq(A[:, P], b, rcond=None)[0]
            if np.all(s[P] > 0):
                break
            it += 1
            if it > max_iter:
                raise NumericalError(f"NNLS active set did not settle within {max_iter} iterations")
            bad = P[s[P] <= 0]
            alpha = np.min(x[bad] / (x[bad] - s[bad]))
            x = x + alpha * (s - x)
            passive &= x > tol
            x[~passive] = 0.0
        x = s
        w = A.T @ (b - A @ x)
    return x, it


def kkt_certificate(beta, beta0, gram) -> dict:
    """KKT quantities of the cone projection at ``beta``.

    The gradient ``Gram (beta - beta0)`` must vanish on the free set
    ``{beta > 0}`` and be nonnegative on the active set ``{beta = 0}``.
    """
    beta = np.asarray(beta, dtype=float)
    grad = gram @ (beta - np.asarray(beta0, dtype=float))
    free = beta > 0
    return {
        "free_residual": float(np.max(np.abs(grad[free]), initial=0.0)),
        "active_violation": float(max(0.0, -np.min(grad[~free], initial=0.0))),
        "primal_violation": float(max(0.0, -np.min(beta, initial=0.0))),
        "active": int((~free).sum()),
    }


def project(approx: Approximant, cone: ConvexCone) -> Approximant:
    """Metric projection of ``approx`` onto ``cone`` in the grid ``L2`` norm."""
    alpha0 = approx.coefficients
    beta, iters = nnls(cone.r_factor, alpha0)
    alpha = cone.r_factor @ beta
    beta0 = cone.generator_coefficients(alpha0)
    diag = dict(approx.diagnostics)
    diag.update({"nnls_iterations": iters, "kkt": kkt_certificate(beta, beta0, cone.gram)})
    return replace(approx, coefficients=alpha, projected=True, generator_coefficients=beta,
                   diagnostics=diag)


def contraction_check(u: Approximant, v: Approximant, cone: ConvexCone):
    """``(||P u - P v||, ||u - v||)`` in the grid ``L2`` norm."""
    pu, pv = project(u, cone), project(v, cone)
    return (float(np.linalg.norm(pu.coefficients - pv.coefficients)),
            float(np.linalg.norm(u.coefficients - v.coefficients)))
