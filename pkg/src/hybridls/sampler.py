"""Christoffel (induced-measure) sampling and weighted design assembly.

Continuous sampling covers full tensor Legendre bases, whose induced measure
is a product of univariate measures with density
``(1 / (D + 1)) * sum_k (2k + 1) P_k(t)^2`` relative to ``dt / 2``.  Each
univariate CDF is a polynomial of degree ``2D + 1``; it is tabulated on 4096
Chebyshev nodes and inverted by bracketing plus safeguarded Newton steps.

Discrete sampling draws grid indices with probabilities proportional to the
grid Christoffel function (leverage-score sampling).
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.polynomial import legendre as npleg

from .basis import BasisSet, DiscreteBasis, christoffel
from .domain import PointStream
from .errors import SamplingError

__all__ = [
    "SampleDesign",
    "BoostingPolicy",
    "make_design",
    "induced_cdf",
    "induced_quantile",
    "sample_induced_continuous",
    "sample_induced_discrete",
    "leverage_probabilities",
    "boost",
    "adaptive_boost",
    "write_design_csv",
]

CDF_TABLE_SIZE = 4096
QUANTILE_TOL = 1e-12


@dataclass(frozen=True)
class SampleDesign:
    """Weighted least-squares design on ``m`` points.

    ``V`` holds ``v_j(x_i) / sqrt(m)``; the weighted design matrix is
    ``sqrt(W) V`` with ``W = diag(weights)``.
    """

    points: np.ndarray
    weights: np.ndarray
    phi: np.ndarray
    V: np.ndarray
    singular_values: np.ndarray
    grid_indices: np.ndarray = None
    provenance: dict = field(default_factory=dict)
    trials: int = 1
    threshold_missed: bool = False

    @property
    def m(self) -> int:
        return self.V.shape[0]

    @property
    def n(self) -> int:
        return self.V.shape[1]

    @property
    def weighted_matrix(self) -> np.ndarray:
        return np.sqrt(self.weights)[:, None] * self.V

    @property
    def cond(self) -> float:
        s = self.singular_values
        return float(s[0] / s[-1]) if s[-1] > 0 else float("inf")

    def in_embedding_event(self, lo=0.9, hi=1.1) -> bool:
        """All singular values of ``sqrt(W) V`` inside ``[lo, hi]``."""
        s = self.singular_values
        return bool(s[-1] >= lo and s[0] <= hi)

    def digest(self) -> str:
        """Content hash of points and weights, used to verify coupling."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.points).tobytes())
        h.update(np.ascontiguousarray(self.weights).tobytes())
        return h.hexdigest()[:16]

    @classmethod
    def from_arrays(cls, weights, phi, V=None, points=None):
        """Design built from raw arrays (for allocation studies and tests).

        If ``V`` is omitted, a one-column design with ``V = sqrt(phi / m)`` is
        used so that row norms match ``w * phi / m`` as for Christoffel designs
        of a one-dimensional space.
        """
        weights = np.asarray(weights, dtype=float)
        phi = np.asarray(phi, dtype=float)
        m = weights.size
        if V is None:
            V = np.sqrt(phi / m)[:, None]
        V = np.atleast_2d(np.asarray(V, dtype=float))
        if points is None:
            points = np.arange(m, dtype=float)[:, None]
        sv = np.linalg.svd(np.sqrt(weights)[:, None] * V, compute_uv=False)
        return cls(np.asarray(points, dtype=float), weights, phi, V, sv,
                   provenance={"kind": "arrays"})


@dataclass(frozen=True)
class BoostingPolicy:
    trials: int = 50
    cond_threshold: float = 2.5
    accept_rule: str = "first-below-threshold"

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.cond_threshold > 1:
            raise ValueError("cond_threshold must exceed 1")
        if self.accept_rule not in ("min-cond", "first-below-threshold"):
            raise ValueError(f"unknown accept rule {self.accept_rule!r}")


def make_design(points, basis_values, grid_indices=None, provenance=None,
                weights=None) -> SampleDesign:
    """Assemble a design from basis values at the sample points.

    Weights default to the Christoffel weights ``n / phi``.
    """
    basis_values = np.atleast_2d(basis_values)
    m, n = basis_values.shape
    phi = np.einsum("ij,ij->i", basis_values, basis_values)
    if weights is None:
        weights = n / phi
    V = basis_values / np.sqrt(m)
    sv = np.linalg.svd(np.sqrt(weights)[:, None] * V, compute_uv=False)
    return SampleDesign(np.atleast_2d(points), np.asarray(weights, dtype=float), phi, V, sv,
                        grid_indices=grid_indices, provenance=dict(provenance or {}))


@lru_cache(maxsize=64)
def _cdf_tables(degree: int):
    # density sum_k (2k+1) P_k^2 / (D+1) w.r.t. dt/2 as a Legendre series
    dens = np.zeros(1)
    for k in range(degree + 1):
        ek = np.zeros(k + 1)
        ek[k] = 1.0
        dens = npleg.legadd(dens, (2 * k + 1) * npleg.legmul(ek, ek))
    dens = dens / (2.0 * (degree + 1))
    cdf = npleg.legint(dens, lbnd=-1.0)
    nodes = np.sort(np.cos(np.pi * np.arange(CDF_TABLE_SIZE) / (CDF_TABLE_SIZE - 1)))
    nodes[0], nodes[-1] = -1.0, 1.0
    values = npleg.legval(nodes, cdf)
    values[0], values[-1] = 0.0, 1.0
    return dens, cdf, nodes, np.maximum.accumulate(values)


def induced_cdf(t, degree: int) -> np.ndarray:
    """CDF of the univariate induced measure of Legendre degree ``degree`` on [-1, 1]."""
    _, cdf, _, _ = _cdf_tables(int(degree))
    return np.clip(npleg.legval(np.asarray(t, dtype=float), cdf), 0.0, 1.0)


def induced_quantile(u, degree: int, tol: float = QUANTILE_TOL) -> np.ndarray:
    """Inverse of :func:`induced_cdf` by tabulated bracketing and Newton polishing."""
    dens, cdf, nodes, table = _cdf_tables(int(degree))
    u = np.asarray(u, dtype=float)
    shape = u.shape
    u = u.reshape(-1)
    if np.any((u < 0) | (u > 1)) or not np.all(np.isfinite(u)):
        raise SamplingError("quantile targets must lie in [0, 1]")
    j = np.clip(np.searchsorted(table, u, side="right") - 1, 0, CDF_TABLE_SIZE - 2)
    lo, hi = nodes[j].copy(), nodes[j + 1].copy()
    flo, fhi = table[j], table[j + 1]
    span = np.where(fhi > flo, fhi - flo, 1.0)
    t = lo + (u - flo) / span * (hi - lo)
    for _ in range(100):
        f = npleg.legval(t, cdf) - u
        done = np.abs(f) <= tol
        if done.all():
            break
        lo = np.where(f < 0, t, lo)
        hi = np.where(f > 0, t, hi)
        dfdt = npleg.legval(t, dens)
        step = np.where(dfdt > 0, f / np.where(dfdt > 0, dfdt, 1.0), np.inf)
        t_new = t - step
        outside = ~((t_new > lo) & (t_new < hi))
        t_new = np.where(outside, 0.5 * (lo + hi), t_new)
        t = np.where(done, t, t_new)
        if np.all(hi - lo <= 1e-16):
            break
    f = npleg.legval(t, cdf) - u
    bad = (np.abs(f) > max(tol, 1e-13)) & ((hi - lo) > 1e-15)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise SamplingError(f"inverse CDF lost its bracket at quantile {u[k]!r} "
                            f"(residual {f[k]:.3e})")
    return t.reshape(shape)


def sample_induced_continuous(basis: BasisSet, m: int, stream: PointStream) -> SampleDesign:
    """Draw ``m`` points from the induced measure of a tensor Legendre basis."""
    if basis.metadata.get("kind") != "tensor-legendre":
        raise ValueError("continuous induced sampling needs a full tensor Legendre basis")
    if stream.dim != basis.dim:
        raise ValueError(f"stream dimension {stream.dim} != basis dimension {basis.dim}")
    D = basis.metadata["max_degree"]
    u = stream.random(m)
    t = np.empty_like(u)
    for j in range(basis.dim):
        try:
            t[:, j] = induced_quantile(u[:, j], D)
        except SamplingError as exc:
            raise SamplingError(f"coordinate {j}: {exc}") from exc
    dom = basis.domain
    points = dom.lower_array + 0.5 * (t + 1.0) * dom.width
    return make_design(points, basis(points),
                       provenance={"sampler": "induced-continuous", "stream": stream.describe()})


def leverage_probabilities(basis: DiscreteBasis) -> np.ndarray:
    """Grid sampling probabilities proportional to grid weight times Christoffel function."""
    p = basis.grid_weights * christoffel(basis).phi_grid()
    return p / p.sum()


def sample_induced_discrete(basis: DiscreteBasis, m: int, stream: PointStream) -> SampleDesign:
    """Draw ``m`` grid indices iid with leverage-score probabilities.

    The stream supplies one uniform per draw, inverted through the cumulative
    probabilities, so quasi-random streams can be used too.  Repeated indices
    are kept as separate design rows.
    """
    prob = leverage_probabilities(basis)
    cum = np.cumsum(prob)
    cum[-1] = 1.0
    u = stream.with_dim(1).random(m)[:, 0] if stream.dim != 1 else stream.random(m)[:, 0]
    idx = np.minimum(np.searchsorted(cum, u, side="right"), basis.Q - 1)
    vals = basis.grid_matrix[idx]
    return make_design(basis.grid[idx], vals, grid_indices=idx,
                       provenance={"sampler": "induced-discrete", "stream": stream.describe()})


def boost(sampler_call: Callable[[PointStream], SampleDesign], policy: BoostingPolicy,
          stream: PointStream) -> SampleDesign:
    """Repeat a sampling call and keep a well-conditioned design.

    Trial 0 uses a replay of ``stream``; trial ``t >= 1`` uses ``stream.spawn(t)``.
    Under ``first-below-threshold`` the first design with
    ``cond(sqrt(W) V) < cond_threshold`` is returned; otherwise (or if no
    trial succeeds, in which case ``threshold_missed`` is set) the design with
    the smallest condition number.
    """
    best = None
    for t in range(policy.trials):
        sub = stream.replay() if t == 0 else stream.spawn(t)
        design = sampler_call(sub)
        if best is None or design.cond < best.cond:
            best = design
        if policy.accept_rule == "first-below-threshold" and design.cond < policy.cond_threshold:
            return replace(design, trials=t + 1)
    missed = policy.accept_rule == "first-below-threshold"
    return replace(best, trials=policy.trials, threshold_missed=missed)


def adaptive_boost(sampler_for_m: Callable[[int, PointStream], SampleDesign],
                   policy: BoostingPolicy, stream: PointStream, m0: int, growth: float = 0.1,
                   m_max: int = None) -> SampleDesign:
    """Smallest ``m`` on a geometric ladder for which boosting meets the threshold.

    Starting at ``m0``, ``m`` grows by ``max(1, ceil(growth * m))`` until
    :func:`boost` succeeds (or ``m_max`` is reached, returning the last
    design flagged ``threshold_missed``).  Rung ``k`` boosts on
    ``stream.spawn(k)``.
    """
    m = int(m0)
    m_max = 100 * m if m_max is None else int(m_max)
    k = 0
    while True:
        design = boost(lambda s: sampler_for_m(m, s), policy, stream.spawn(k))
        if not design.threshold_missed or m >= m_max:
            prov = dict(design.provenance, adaptive_rungs=k + 1, m0=int(m0))
            return replace(design, provenance=prov)
        m = min(m_max, m + max(1, int(np.ceil(growth * m))))
        k += 1


def write_design_csv(path, design: SampleDesign):
    """Columns ``x1..xd, weight``; sidecar ``<path>.json`` with singular values."""
    pts = np.atleast_2d(design.points)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j + 1}" for j in range(pts.shape[1])] + ["weight"])
        for x, w in zip(pts, design.weights):
            writer.writerow([f"{v:.17g}" for v in x] + [f"{w:.17g}"])
    side = {"m": design.m, "n": design.n, "singular_values": design.singular_values.tolist(),
            "cond": design.cond, "trials": design.trials,
            "threshold_missed": design.threshold_missed}
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh, indent=2)
