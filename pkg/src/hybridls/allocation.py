"""Allocation of a repeated-evaluation budget over the design points.

For a design with weighted rows ``r_i`` (rows of ``sqrt(W) V``) and an
allocation ``p`` of a budget ``L``, the evaluation vector has diagonal
covariance ``Sigma_ii = w_i sigma_i^2 / (m L p_i)``.  Two objectives are used:

``G(p) = (1/L) sum_i w_i^2 sigma_i^2 Phi_i / (m^2 p_i)``
    variance of the plain weighted estimator when the rows are orthonormal,
    minimised in closed form by the Neyman allocation
    ``p_i ~ w_i sigma_i sqrt(Phi_i)``;

``H(p) = tr(U(p)^{-1})`` with ``U(p) = sum_i c_i p_i r_i r_i^T``, ``c_i = L m / (w_i sigma_i^2)``
    variance of the noise-whitened estimator, minimised numerically over
    ``{p : sum p = 1, p >= delta}`` (A-optimal allocation).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr, solve_triangular

from .errors import NumericalError, RankDeficiencyError
from .sampler import SampleDesign

__all__ = [
    "NoiseProfile",
    "Allocation",
    "uniform_allocation",
    "neyman_allocation",
    "a_optimal_allocation",
    "allocate",
    "objective_G",
    "objective_H",
    "gradient_H",
    "hessian_H",
    "project_shifted_simplex",
    "kkt_residual",
    "support_sparsity",
    "condition_J",
    "integer_counts",
    "write_allocation_csv",
]


@dataclass(frozen=True)
class NoiseProfile:
    """Conditional noise variances at the design points."""

    sigma2: np.ndarray
    source: str = "exact"

    def __post_init__(self):
        s2 = np.asarray(self.sigma2, dtype=float).reshape(-1)
        if not np.all(s2 > 0) or not np.all(np.isfinite(s2)):
            raise ValueError("noise variances must be positive and finite")
        object.__setattr__(self, "sigma2", s2)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.sigma2)


@dataclass(frozen=True)
class Allocation:
    p: np.ndarray
    delta: float
    kind: str
    objective_value: float = float("nan")
    kkt_residual: float = float("nan")
    iterations: int = 0
    tolerance_missed: bool = False
    info: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.p.size

    def counts(self, L: int) -> np.ndarray:
        return integer_counts(self.p, L)


def _check(design: SampleDesign, noise: NoiseProfile):
    if noise.sigma2.size != design.m:
        raise ValueError(f"noise profile has {noise.sigma2.size} entries, design has {design.m} points")


def uniform_allocation(m: int) -> Allocation:
    return Allocation(np.full(m, 1.0 / m), 0.0, "uniform")


def neyman_allocation(design: SampleDesign, noise: NoiseProfile, L: float = 1.0) -> Allocation:
    """Closed-form minimiser of ``G``: ``p_i ~ w_i sigma_i sqrt(Phi_i)``."""
    _check(design, noise)
    score = design.weights * noise.sigma * np.sqrt(design.phi)
    total = score.sum()
    if not total > 0:
        raise NumericalError("Neyman scores vanish identically")
    p = score / total
    return Allocation(p, 0.0, "neyman", objective_value=objective_G(p, design, noise, L))


def objective_G(p, design: SampleDesign, noise: NoiseProfile, L: float = 1.0) -> float:
    """Surrogate variance ``G(p)``; ``+inf`` if a noisy point gets no budget."""
    p = np.asarray(p, dtype=float)
    num = design.weights ** 2 * noise.sigma2 * design.phi / design.m ** 2
    if np.any((p <= 0) & (num > 0)):
        return float("inf")
    pos = num > 0
    return float(np.sum(num[pos] / p[pos]) / L)


def _information_factor(p, design, noise, L):
    """Upper-triangular ``T`` with ``U(p) = T^T T``, plus ``c`` and ``R``."""
    R = design.weighted_matrix
    c = L * design.m / (design.weights * noise.sigma2)
    scale = np.sqrt(c * np.asarray(p, dtype=float))
    T = qr(scale[:, None] * R, mode="r")[0][: R.shape[1]]
    d = np.abs(np.diag(T))
    if d.min() <= 1e-13 * d.max():
        raise RankDeficiencyError(int(np.sum(d > 1e-13 * d.max())), R.shape[1])
    return T, c, R


def _r_uinv(p, design, noise, L):
    T, c, R = _information_factor(p, design, noise, L)
    Tinv = solve_triangular(T, np.eye(T.shape[0]))
    Uinv = Tinv @ Tinv.T
    return Uinv, c, R


def objective_H(p, design: SampleDesign, noise: NoiseProfile, L: float = 1.0) -> float:
    """``H(p) = tr(U(p)^{-1})``."""
    T, _, _ = _information_factor(p, design, noise, L)
    Tinv = solve_triangular(T, np.eye(T.shape[0]))
    return float(np.sum(Tinv ** 2))


def gradient_H(p, design: SampleDesign, noise: NoiseProfile, L: float = 1.0) -> np.ndarray:
    """``dH/dp_i = -c_i ||U^{-1} r_i||^2``."""
    Uinv, c, R = _r_uinv(p, design, noise, L)
    RU = R @ Uinv
    return -c * np.einsum("ij,ij->i", RU, RU)


def hessian_H(p, design: SampleDesign, noise: NoiseProfile, L: float = 1.0) -> np.ndarray:
    """``d2H/dp_i dp_j = 2 c_i c_j (r_i^T U^{-1} r_j)(r_i^T U^{-2} r_j)``."""
    Uinv, c, R = _r_uinv(p, design, noise, L)
    RU = R @ Uinv
    P1 = RU @ R.T
    P2 = RU @ RU.T
    return 2.0 * np.outer(c, c) * P1 * P2


def _h_and_grad(p, design, noise, L):
    Uinv, c, R = _r_uinv(p, design, noise, L)
    RU = R @ Uinv
    return float(np.trace(Uinv)), -c * np.einsum("ij,ij->i", RU, RU)


def project_shifted_simplex(v, delta: float) -> np.ndarray:
    """Euclidean projection onto ``{p : sum p = 1, p_i >= delta}``.

    Exact sort-based algorithm applied to ``v - delta`` and the simplex of
    mass ``1 - m delta``.
    """
    v = np.asarray(v, dtype=float)
    m = v.size
    mass = 1.0 - m * delta
    if mass < -1e-15:
        raise ValueError("delta must not exceed 1/m")
    if mass <= 0:
        return np.full(m, delta)
    u = v - delta
    s = np.sort(u)[::-1]
    css = np.cumsum(s) - mass
    k = np.arange(1, m + 1)
    rho = np.nonzero(s - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return delta + np.maximum(u - theta, 0.0)


def kkt_residual(p, grad, H, delta) -> float:
    """Projected-gradient residual ``||p - proj(p - grad / H)||_inf``.

    Scaling the gradient by ``H`` makes the residual invariant to the budget
    and noise scale, since ``sum_i p_i dH/dp_i = -H``.
    """
    return float(np.max(np.abs(p - project_shifted_simplex(p - grad / H, delta))))


def _newton_polish(p, design, noise, L, delta, max_steps=200, tol=1e-8):
    """Active-set Newton refinement on the free face of the shifted simplex."""
    m = p.size
    H, g = _h_and_grad(p, design, noise, L)
    steps = 0
    for steps in range(1, max_steps + 1):
        if kkt_residual(p, g, H, delta) <= 0.1 * tol:
            break
        free = p > delta * (1 + 1e-12) + 1e-15
        if free.sum() == 0:
            break
        lam = g[free].mean()
        # release bound entries whose multiplier is negative
        release = (~free) & (g < lam)
        free = free | release
        F = np.flatnonzero(free)
        Hm = hessian_H(p, design, noise, L)[np.ix_(F, F)]
        k = F.size
        K = np.zeros((k + 1, k + 1))
        K[:k, :k] = Hm
        K[:k, k] = 1.0
        K[k, :k] = 1.0
        rhs = np.concatenate([-g[F], [0.0]])
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        d = np.zeros(m)
        d[F] = sol[:k]
        d -= d.sum() / k * free  # exact feasibility of the direction
        neg = d < 0
        alpha_max = 1.0
        if neg.any():
            alpha_max = min(1.0, float(np.min((p[neg] - delta) / -d[neg])))
        slope = float(g @ d)
        if not slope < 0 or alpha_max <= 0:
            # Newton direction unusable; fall back to a projected-gradient move
            d = project_shifted_simplex(p - g / H, delta) - p
            slope = float(g @ d)
            alpha_max = 1.0
            if not slope < 0:
                break
        alpha = alpha_max
        accepted = False
        for _ in range(60):
            q = p + alpha * d
            q = np.maximum(q, delta)
            q = q / q.sum() if abs(q.sum() - 1) > 1e-15 else q
            q = project_shifted_simplex(q, delta)
            try:
                Hq, gq = _h_and_grad(q, design, noise, L)
            except RankDeficiencyError:
                alpha *= 0.5
                continue
            if Hq <= H + 1e-4 * alpha * slope or Hq <= H * (1 - 1e-15):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        p, H, g = q, Hq, gq
    return p, H, g, steps


def a_optimal_allocation(design: SampleDesign, noise: NoiseProfile, L: float, delta: float,
                         max_iter: int = 100000, rtol: float = 1e-12,
                         kkt_tol: float = 1e-8) -> Allocation:
    """Minimise ``H(p)`` over ``{p : sum p = 1, p >= delta}``.

    Projected gradient with Barzilai-Borwein steps and Armijo backtracking,
    started at the Neyman point clipped into the feasible set, and stopped
    when the relative objective decrease falls below ``rtol``.  The iterate
    is then refined by active-set Newton steps.  If the KKT residual (see
    :func:`kkt_residual`) stays above ``kkt_tol`` the best iterate is
    returned with ``tolerance_missed`` set.
    """
    _check(design, noise)
    m = design.m
    if not 0 < delta <= 1.0 / m * (1 + 1e-12):
        raise ValueError(f"delta must lie in (0, 1/m], got {delta}")
    delta = min(delta, 1.0 / m)
    if np.linalg.matrix_rank(design.weighted_matrix) < design.n:
        raise RankDeficiencyError(np.linalg.matrix_rank(design.weighted_matrix), design.n)

    p = project_shifted_simplex(neyman_allocation(design, noise, L).p, delta)
    H, g = _h_and_grad(p, design, noise, L)
    step = 1.0 / max(np.max(np.abs(g)), 1e-300)
    it = 0
    p_old = g_old = None
    while it < max_iter:
        it += 1
        if p_old is not None:
            s, y = p - p_old, g - g_old
            sy = float(s @ y)
            if sy > 0:
                step = float(s @ s) / sy
        d = project_shifted_simplex(p - step * g, delta) - p
        slope = float(g @ d)
        if slope >= 0:
            break
        alpha = 1.0
        while True:
            q = p + alpha * d
            try:
                Hq, gq = _h_and_grad(q, design, noise, L)
                if Hq <= H + 1e-4 * alpha * slope:
                    break
            except RankDeficiencyError:
                pass
            alpha *= 0.5
            if alpha < 1e-20:
                q = None
                break
        if q is None:
            break
        p_old, g_old = p, g
        decrease = (H - Hq) / abs(H)
        p, H, g = q, Hq, gq
        step *= alpha
        if decrease < rtol:
            break

    p, H, g, newton_steps = _newton_polish(p, design, noise, L, delta, tol=kkt_tol)
    res = kkt_residual(p, g, H, delta)
    return Allocation(p, float(delta), "a-optimal", objective_value=H, kkt_residual=res,
                      iterations=it + newton_steps, tolerance_missed=bool(res > kkt_tol),
                      info={"gradient_iterations": it, "newton_steps": newton_steps})


def allocate(kind: str, design: SampleDesign, noise: NoiseProfile, L: float,
             delta: float = None) -> Allocation:
    """Dispatch on ``kind`` in ``{"uniform", "neyman", "aopt"}``."""
    if kind == "uniform":
        return uniform_allocation(design.m)
    if kind == "neyman":
        return neyman_allocation(design, noise, L)
    if kind in ("aopt", "a-optimal"):
        if delta is None:
            delta = 0.01 / design.m
        return a_optimal_allocation(design, noise, L, delta)
    raise ValueError(f"unknown allocation kind {kind!r}")


def support_sparsity(alloc: Allocation, slack_tol: float = 1e-6, round_tol: float = 1e-14):
    """``(|{i : p_i > delta}|, slack)``; slack counts entries within ``slack_tol`` above delta.

    Entries within ``round_tol`` of ``delta`` sit on the bound up to rounding
    in the simplex projection and are not counted.
    """
    above = alloc.p > alloc.delta + round_tol
    near = above & (alloc.p <= alloc.delta + slack_tol)
    return int(above.sum()), int(near.sum())


def condition_J(design: SampleDesign, noise: NoiseProfile) -> float:
    """``max(w sigma^2) * max(1 / (w sigma^2))`` over the design points."""
    ws = design.weights * noise.sigma2
    return float(ws.max() * (1.0 / ws).max())


def integer_counts(p, L: int) -> np.ndarray:
    """Round ``p L`` to integers summing to ``L`` (largest remainder), at least 1 on ``supp(p)``."""
    p = np.asarray(p, dtype=float)
    L = int(L)
    support = p > 0
    if L < support.sum():
        raise ValueError(f"budget {L} smaller than the support size {support.sum()}")
    raw = p / p.sum() * L
    counts = np.floor(raw).astype(np.int64)
    counts[support] = np.maximum(counts[support], 1)
    diff = L - counts.sum()
    if diff > 0:
        order = np.argsort(-(raw - np.floor(raw)), kind="stable")
        order = order[support[order]]
        counts[order[:diff]] += 1
    while diff < 0:
        # too many forced ones: trim the largest overshoots
        excess = np.where(counts > 1, counts - raw, -np.inf)
        j = int(np.argmax(excess))
        counts[j] -= 1
        diff += 1
    return counts


def write_allocation_csv(path, alloc: Allocation, design: SampleDesign, L: int):
    """Columns ``index, x1..xd, p, L_i``; sidecar ``<path>.json``."""
    pts = np.atleast_2d(design.points)
    counts = integer_counts(alloc.p, L)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index"] + [f"x{j + 1}" for j in range(pts.shape[1])] + ["p", "L_i"])
        for i in range(alloc.m):
            writer.writerow([i] + [f"{v:.17g}" for v in pts[i]] + [f"{alloc.p[i]:.17g}", int(counts[i])])
    side = {"kind": alloc.kind, "delta": alloc.delta, "objective": alloc.objective_value,
            "kkt_residual": alloc.kkt_residual, "iterations": alloc.iterations,
            "tolerance_missed": alloc.tolerance_missed, "L": int(L)}
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh, indent=2)
