"""Evaluation vectors, least-squares decoders and the hybrid pipelines.

Pipelines
---------
``HLS-0``  uniform allocation, plain weighted least squares
``HLS-1``  Neyman allocation, plain weighted least squares
``HLS-2``  A-optimal allocation, noise-whitened weighted least squares
``ERM``    one noisy evaluation at each of ``L`` iid points, unweighted least squares
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .allocation import (Allocation, NoiseProfile, a_optimal_allocation, integer_counts,
                         neyman_allocation, uniform_allocation)
from .basis import BasisSet, DiscreteBasis
from .domain import PointStream, quadrature_integral
from .errors import NumericalError, RankDeficiencyError, StageError
from .sampler import (BoostingPolicy, SampleDesign, boost, sample_induced_continuous,
                      sample_induced_discrete)

__all__ = [
    "PIPELINES",
    "NoisyOracle",
    "EvaluationVector",
    "Approximant",
    "pinv_solve",
    "evaluate_budget",
    "estimate_variance",
    "decode_plain",
    "decode_reweighted",
    "draw_design",
    "run_hls",
    "run_erm",
    "mse",
    "best_approximation",
    "mse_from_coefficients",
]

PIPELINES = ("HLS-0", "HLS-1", "HLS-2", "ERM")
PINV_RTOL = 1e-12


class NoisyOracle:
    """Source of noisy evaluations ``y(x) = f(x) + eps(x)``.

    Parameters
    ----------
    draw : callable
        ``draw(points, rng)`` returns one independent realisation per row of
        ``points``.
    exact_mean, exact_variance : callable, optional
        ``f`` and ``sigma^2`` when known.
    """

    def __init__(self, draw: Callable, exact_mean: Optional[Callable] = None,
                 exact_variance: Optional[Callable] = None):
        self.draw = draw
        self.exact_mean = exact_mean
        self.exact_variance = exact_variance

    @classmethod
    def gaussian(cls, mean: Callable, std: Callable):
        """``y = f(x) + s(x) xi`` with standard normal ``xi``."""

        def draw(points, rng):
            return mean(points) + std(points) * rng.standard_normal(len(points))

        return cls(draw, exact_mean=mean, exact_variance=lambda x: std(x) ** 2)

    def sample_means(self, points, counts, rng, chunk=200_000):
        """Mean of ``counts[i]`` draws at each ``points[i]``."""
        points = np.atleast_2d(points)
        counts = np.asarray(counts, dtype=np.int64)
        m = len(points)
        sums = np.zeros(m)
        owner = np.repeat(np.arange(m), counts)
        for start in range(0, owner.size, chunk):
            idx = owner[start:start + chunk]
            vals = np.asarray(self.draw(points[idx], rng), dtype=float)
            bad = ~np.isfinite(vals)
            if bad.any():
                raise NumericalError(f"oracle returned {vals[bad][0]!r} at design point "
                                     f"{int(idx[np.flatnonzero(bad)[0]])}")
            sums += np.bincount(idx, weights=vals, minlength=m)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)


@dataclass(frozen=True)
class EvaluationVector:
    """``y_i = sqrt(w_i) ybar_i / sqrt(m)`` with per-point counts."""

    y: np.ndarray
    ybar: np.ndarray
    counts: np.ndarray
    L: int


@dataclass
class Approximant:
    """``x -> sum_i coefficients[i] v_i(x)`` over a basis."""

    coefficients: np.ndarray
    basis: BasisSet
    pipeline: str = ""
    projected: bool = False
    generator_coefficients: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float).reshape(-1)
        if self.coefficients.size != self.basis.n:
            raise ValueError(f"expected {self.basis.n} coefficients, got {self.coefficients.size}")

    def __call__(self, points) -> np.ndarray:
        return self.basis(points) @ self.coefficients

    evaluate = __call__

    def on_grid(self) -> np.ndarray:
        """Values at the grid points of a discrete basis."""
        return self.basis.grid_matrix @ self.coefficients


def pinv_solve(A, b, rtol=PINV_RTOL, expected_rank=None):
    """``A^+ b`` by SVD with singular values below ``rtol * s_max`` discarded."""
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > rtol * s[0] if s.size and s[0] > 0 else np.zeros_like(s, dtype=bool)
    rank = int(keep.sum())
    need = A.shape[1] if expected_rank is None else expected_rank
    if rank < need:
        raise RankDeficiencyError(rank, need)
    return Vt[keep].T @ ((U[:, keep].T @ b) / s[keep])


def evaluate_budget(oracle: NoisyOracle, design: SampleDesign, alloc: Allocation, L: int,
                    rng: np.random.Generator, counts=None) -> EvaluationVector:
    """Spend the budget: ``counts[i]`` draws at point ``i`` and the weighted mean vector."""
    if counts is None:
        counts = integer_counts(alloc.p, L)
    counts = np.asarray(counts, dtype=np.int64)
    if counts.sum() != L:
        raise ValueError("counts must sum to the budget")
    ybar = oracle.sample_means(design.points, counts, rng)
    y = np.sqrt(design.weights) * ybar / np.sqrt(design.m)
    return EvaluationVector(y, ybar, counts, int(L))


def estimate_variance(oracle: NoisyOracle, design: SampleDesign, R: int,
                      rng: np.random.Generator, floor: float = 1e-12) -> NoiseProfile:
    """Unbiased sample variance from ``R`` draws per point, floored at ``floor``."""
    if R < 2:
        raise ValueError("need R >= 2 draws for a variance estimate")
    pts = np.repeat(np.atleast_2d(design.points), R, axis=0)
    vals = np.asarray(oracle.draw(pts, rng), dtype=float).reshape(design.m, R)
    bad = ~np.isfinite(vals)
    if bad.any():
        i = int(np.flatnonzero(bad.any(axis=1))[0])
        raise NumericalError(f"oracle returned a non-finite value at design point {i}")
    s2 = np.maximum(vals.var(axis=1, ddof=1), floor)
    return NoiseProfile(s2, source=f"mc-estimated({R})")


def decode_plain(design: SampleDesign, ev: EvaluationVector, basis=None, pipeline="") -> Approximant:
    """``alpha = (sqrt(W) V)^+ y``."""
    alpha = pinv_solve(design.weighted_matrix, ev.y)
    return Approximant(alpha, basis if basis is not None else _NullBasis(design.n), pipeline)


def decode_reweighted(design: SampleDesign, ev: EvaluationVector, alloc: Allocation,
                      noise: NoiseProfile, L: int, basis=None, pipeline="") -> Approximant:
    """``alpha = (Gamma sqrt(W) V)^+ Gamma y`` with ``Gamma = Sigma^{-1/2}``.

    ``Sigma_ii = w_i sigma_i^2 / (m L_i)`` uses the realised integer counts,
    which equal ``L p_i`` up to rounding.
    """
    counts = np.asarray(ev.counts, dtype=float)
    if np.any(counts <= 0):
        raise NumericalError("whitening undefined: a design point received no evaluations")
    gamma = np.sqrt(design.m * counts / (design.weights * noise.sigma2))
    gamma = gamma / gamma.max()
    alpha = pinv_solve(gamma[:, None] * design.weighted_matrix, gamma * ev.y)
    return Approximant(alpha, basis if basis is not None else _NullBasis(design.n), pipeline)


class _NullBasis:
    """Placeholder carrying only ``n`` for decoders called without a basis."""

    def __init__(self, n):
        self.n = n

    def __call__(self, points):
        raise ValueError("approximant has no basis attached")


def draw_design(basis: BasisSet, m: int, stream: PointStream,
                boosting: Optional[BoostingPolicy] = None) -> SampleDesign:
    """Christoffel-sampled design, boosted if a policy is given."""
    if isinstance(basis, DiscreteBasis):
        call = lambda s: sample_induced_discrete(basis, m, s)
    else:
        call = lambda s: sample_induced_continuous(basis, m, s)
    if boosting is None:
        return call(stream)
    return boost(call, boosting, stream)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_hls(pipeline: str, basis: BasisSet, oracle: NoisyOracle, m: int, L: int,
            delta: Optional[float] = None, R: int = 50, *, design_stream: PointStream = None,
            variance_rng=None, evaluation_rng=None, boosting: Optional[BoostingPolicy] = None,
            design: Optional[SampleDesign] = None, noise: Optional[NoiseProfile] = None,
            allocation: Optional[Allocation] = None) -> Approximant:
    """Hybrid least squares: sample, estimate noise, allocate, evaluate, decode.

    Stages may be skipped by passing precomputed ``design``, ``noise`` or
    ``allocation`` (as done when several pipelines share one design).
    Exceptions are re-raised as :class:`StageError` tagged with the stage.
    """
    if pipeline not in PIPELINES[:3]:
        raise ValueError(f"unknown hybrid pipeline {pipeline!r}")
    if m < basis.n:
        raise ValueError(f"need m >= n (m={m}, n={basis.n})")
    if L < m:
        raise ValueError(f"need L >= m (L={L}, m={m})")
    if design is None:
        design = _stage("sampling", draw_design, basis, m, design_stream, boosting)
    if noise is None and pipeline != "HLS-0":
        if oracle.exact_variance is not None and variance_rng is None:
            noise = NoiseProfile(oracle.exact_variance(design.points), "exact")
        else:
            noise = _stage("variance", estimate_variance, oracle, design, R, variance_rng)
    if allocation is None:
        if pipeline == "HLS-0":
            allocation = uniform_allocation(design.m)
        elif pipeline == "HLS-1":
            allocation = _stage("allocation", neyman_allocation, design, noise, L)
        else:
            if delta is None:
                delta = 0.01 / design.m
            allocation = _stage("allocation", a_optimal_allocation, design, noise, L, delta)
    ev = _stage("evaluation", evaluate_budget, oracle, design, allocation, L, evaluation_rng)
    if pipeline == "HLS-2":
        approx = _stage("decoding", decode_reweighted, design, ev, allocation, noise, L, basis, pipeline)
    else:
        approx = _stage("decoding", decode_plain, design, ev, basis, pipeline)
    approx.diagnostics.update({"design_hash": design.digest(), "cond": design.cond, "m": design.m,
                               "L": int(L), "allocation": allocation.kind,
                               "tolerance_missed": allocation.tolerance_missed,
                               "threshold_missed": design.threshold_missed})
    return approx


def run_erm(basis: BasisSet, oracle: NoisyOracle, L: int, rng: np.random.Generator,
            chunk: int = 50_000) -> Approximant:
    """Unweighted least squares on ``L`` iid points with one noisy evaluation each.

    The normal equations are never formed: rows are absorbed chunk by chunk
    into a running QR factorisation.
    """
    n = basis.n
    if L < n:
        raise ValueError(f"need L >= n (L={L}, n={n})")
    measure = basis.measure
    Rf = np.zeros((0, n))
    qty = np.zeros(0)
    done = 0
    while done < L:
        k = min(chunk, L - done)
        x = measure.sample(k, rng)
        y = np.asarray(oracle.draw(x, rng), dtype=float)
        A = np.vstack([Rf, basis(x)])
        b = np.concatenate([qty, y])
        Qc, Rf = np.linalg.qr(A)
        qty = Qc.T @ b
        done += k
    alpha = pinv_solve(Rf, qty)
    return Approximant(alpha, basis, "ERM", diagnostics={"L": int(L)})


def best_approximation(basis: BasisSet, f: Callable, level: int = 64):
    """Orthogonal projection coefficients of ``f`` and ``||f||^2`` under the basis measure."""
    if isinstance(basis, DiscreteBasis):
        vals = np.asarray(f(basis.grid), dtype=float)
        wq = basis.grid_weights
        return basis.grid_matrix.T @ (wq * vals), float(wq @ vals ** 2)
    nodes, weights = basis.measure.quadrature_rule(level)
    vals = np.asarray(f(nodes), dtype=float)
    return basis(nodes).T @ (weights * vals), float(weights @ vals ** 2)


def mse_from_coefficients(alpha_hat, alpha_star, f_norm2) -> float:
    """``||f_hat - f||^2 = ||alpha_hat - alpha*||^2 + ||f||^2 - ||alpha*||^2`` (orthonormal basis)."""
    alpha_hat = np.asarray(alpha_hat)
    alpha_star = np.asarray(alpha_star)
    return float(np.sum((alpha_hat - alpha_star) ** 2) + max(f_norm2 - alpha_star @ alpha_star, 0.0))


def mse(approx: Approximant, reference, test_points=None, level: int = 64) -> float:
    """Mean squared error against ``reference``.

    With ``test_points`` the error is averaged over them; ``reference`` may
    then be a callable or an array of reference values.  Otherwise
    ``reference`` must be callable and the error is integrated by tensor
    quadrature under the basis measure.
    """
    if test_points is not None:
        ref = reference(test_points) if callable(reference) else np.asarray(reference, dtype=float)
        return float(np.mean((approx(test_points) - ref) ** 2))
    return quadrature_integral(lambda x: (approx(x) - reference(x)) ** 2,
                               approx.basis.measure, level)
