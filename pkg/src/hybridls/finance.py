"""Bivariate Black-Scholes spread options.

The parameter point is ``x = (T, K, sigma1, sigma2, rho)`` and the random
input ``Z = (z1, z2)`` is standard bivariate normal.  The discounted payoff

    g(x, Z) = max(S1 exp(-s1^2 T/2 + s1 sqrt(T) z1)
                  - S2 exp(-s2^2 T/2 + s2 sqrt(T) (rho z1 + sqrt(1-rho^2) z2))
                  - K exp(-r T), 0)

has mean equal to the spread-option price, so it serves both as a random
field spanning surrogate spaces and as a noisy oracle for the price.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from .basis import DiscreteBasis, load_discrete_basis, save_discrete_basis
from .decoder import Approximant, NoisyOracle
from .domain import HyperRectangle
from .random_subspace import RandomFieldGenerator

__all__ = [
    "BSModel",
    "QuoteGrid",
    "FINANCE_DOMAIN",
    "STUDY_MATURITIES",
    "STUDY_STRIKES",
    "spread_payoff",
    "payoff_field",
    "payoff_oracle",
    "margrabe_price",
    "spread_price_quadrature",
    "synth_market",
    "CalibrationResult",
    "calibrate",
    "degeneracy_probe",
    "mc_reference",
    "save_surrogate",
    "load_surrogate",
    "write_quotes_csv",
    "read_quotes_csv",
]

FINANCE_DOMAIN = HyperRectangle((0.0, 0.0, 0.0, 0.0, -1.0), (1.0, 50.0, 0.5, 0.5, 1.0))
STUDY_MATURITIES = tuple(d / 252 for d in (10, 20, 30, 60, 120, 180, 240))
STUDY_STRIKES = tuple(float(2 * k - 1) for k in range(1, 26))


@dataclass(frozen=True)
class BSModel:
    sigma1: float = 0.3
    sigma2: float = 0.1
    rho: float = -0.3
    r: float = 0.03
    s0: tuple = (100.0, 96.0)

    def __post_init__(self):
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ValueError("volatilities must be nonnegative")
        if not -1 <= self.rho <= 1:
            raise ValueError("correlation must lie in [-1, 1]")
        if min(self.s0) <= 0:
            raise ValueError("spot prices must be positive")

    def point(self, T, K) -> np.ndarray:
        return np.array([T, K, self.sigma1, self.sigma2, self.rho], dtype=float)

    def with_params(self, sigma1, sigma2, rho) -> "BSModel":
        return BSModel(float(sigma1), float(sigma2), float(rho), self.r, self.s0)


@dataclass
class QuoteGrid:
    maturities: np.ndarray
    strikes: np.ndarray
    prices: np.ndarray
    std_errors: np.ndarray = None
    mc_samples: int = 0
    seed: object = None
    info: dict = field(default_factory=dict)

    def points(self, sigma1, sigma2, rho) -> np.ndarray:
        """Parameter points for every (T, K), maturity-major order."""
        T, K = np.meshgrid(self.maturities, self.strikes, indexing="ij")
        n = T.size
        return np.column_stack([T.ravel(), K.ravel(), np.full(n, sigma1), np.full(n, sigma2),
                                np.full(n, rho)])


def _terminal(x, z1, z2, r, s0):
    T, s1, s2, rho = x[..., 0], x[..., 2], x[..., 3], x[..., 4]
    sq = np.sqrt(T)
    a = s0[0] * np.exp(-0.5 * s1 ** 2 * T + s1 * sq * z1)
    b = s0[1] * np.exp(-0.5 * s2 ** 2 * T + s2 * sq * (rho * z1 + np.sqrt(np.maximum(1 - rho ** 2, 0.0)) * z2))
    return a, b, x[..., 1] * np.exp(-r * T)


def spread_payoff(x, z, r=0.03, s0=(100.0, 96.0)) -> np.ndarray:
    """Discounted payoff at paired rows of ``x`` (N, 5) and ``z`` (N, 2)."""
    x = np.atleast_2d(x)
    z = np.atleast_2d(z)
    a, b, k = _terminal(x, z[:, 0], z[:, 1], r, s0)
    return np.maximum(a - b - k, 0.0)


def payoff_field(model: BSModel = BSModel(), chunk: int = 4096) -> RandomFieldGenerator:
    """Random field ``Z -> g(., Z)`` on the five-dimensional parameter box."""
    r, s0 = model.r, model.s0

    def draw(count, rng):
        return rng.standard_normal((count, 2))

    def evaluate(points, params):
        points = np.atleast_2d(points)
        params = np.atleast_2d(params)
        out = np.empty((points.shape[0], params.shape[0]))
        z1, z2 = params[None, :, 0], params[None, :, 1]
        for s in range(0, points.shape[0], chunk):
            x = points[s:s + chunk, None, :]
            a, b, k = _terminal(x, z1, z2, r, s0)
            out[s:s + chunk] = np.maximum(a - b - k, 0.0)
        return out

    gen = RandomFieldGenerator(draw, evaluate, name="bs-spread")
    gen.evaluate_diagonal = lambda points, params: spread_payoff(points, params, r, s0)
    gen.model = model
    return gen


def payoff_oracle(model: BSModel = BSModel()) -> NoisyOracle:
    """Noisy price oracle: one payoff per draw with fresh normals."""
    r, s0 = model.r, model.s0

    def draw(points, rng):
        points = np.atleast_2d(points)
        return spread_payoff(points, rng.standard_normal((len(points), 2)), r, s0)

    return NoisyOracle(draw)


def margrabe_price(model: BSModel, T: float) -> float:
    """Exchange-option price ``E[max(S1_T - S2_T, 0)] e^{-rT}`` in closed form."""
    s1, s2 = model.s0
    vol2 = model.sigma1 ** 2 + model.sigma2 ** 2 - 2 * model.rho * model.sigma1 * model.sigma2
    vol = np.sqrt(max(vol2, 0.0))
    if T <= 0 or vol == 0:
        return float(max(s1 - s2, 0.0))
    sd = vol * np.sqrt(T)
    d1 = (np.log(s1 / s2) + 0.5 * sd ** 2) / sd
    return float(s1 * ndtr(d1) - s2 * ndtr(d1 - sd))


def spread_price_quadrature(model: BSModel, T: float, K: float) -> float:
    """Spread price by conditioning on ``z1`` and integrating numerically.

    Given ``z1`` the second asset is lognormal, so the inner expectation is a
    Black-Scholes put on it; the outer normal integral uses adaptive
    quadrature.  Independent of Monte Carlo and of the exchange formula.
    """
    s10, s20 = model.s0
    s1, s2, rho, r = model.sigma1, model.sigma2, model.rho, model.r
    if T <= 0:
        return float(max(s10 - s20 - K, 0.0))
    sq = np.sqrt(T)
    resid = s2 * sq * np.sqrt(max(1 - rho ** 2, 0.0))
    disc_k = K * np.exp(-r * T)

    def inner(z1):
        a = s10 * np.exp(-0.5 * s1 ** 2 * T + s1 * sq * z1)
        fwd = s20 * np.exp(-0.5 * s2 ** 2 * T + s2 * sq * rho * z1 + 0.5 * resid ** 2)
        strike = a - disc_k
        if strike <= 0:
            return 0.0
        if resid == 0:
            return max(strike - fwd, 0.0)
        d1 = (np.log(fwd / strike) + 0.5 * resid ** 2) / resid
        return strike * ndtr(-(d1 - resid)) - fwd * ndtr(-d1)

    dens = lambda z: np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
    val, _ = integrate.quad(lambda z: inner(z) * dens(z), -12.0, 12.0, limit=400,
                            epsabs=1e-12, epsrel=1e-12)
    return float(val)


def synth_market(model: BSModel, maturities=STUDY_MATURITIES, strikes=STUDY_STRIKES,
                 mc_samples: int = 500_000, rng=None, seed=None, chunk: int = 100_000) -> QuoteGrid:
    """Monte Carlo prices on a (T, K) grid with common random numbers across the grid."""
    if mc_samples < 1:
        raise ValueError("mc_samples must be positive")
    rng = np.random.default_rng(seed) if rng is None else rng
    mats = np.asarray(maturities, dtype=float)
    ks = np.asarray(strikes, dtype=float)
    sums = np.zeros((mats.size, ks.size))
    sq = np.zeros_like(sums)
    done = 0
    while done < mc_samples:
        c = min(chunk, mc_samples - done)
        z = rng.standard_normal((c, 2))
        for i, T in enumerate(mats):
            x = model.point(T, 0.0)[None, :]
            a, b, _ = _terminal(x, z[:, 0], z[:, 1], model.r, model.s0)
            spread = a - b
            pay = np.maximum(spread[:, None] - ks[None, :] * np.exp(-model.r * T), 0.0)
            sums[i] += pay.sum(axis=0)
            sq[i] += (pay ** 2).sum(axis=0)
        done += c
    mean = sums / mc_samples
    var = np.maximum(sq / mc_samples - mean ** 2, 0.0) * mc_samples / max(mc_samples - 1, 1)
    se = np.sqrt(var / mc_samples)
    return QuoteGrid(mats, ks, mean, se, int(mc_samples), seed,
                     info={"model": [model.sigma1, model.sigma2, model.rho]})


def mc_reference(points, mc_samples: int, rng, model: BSModel = BSModel(), chunk: int = 20_000):
    """Monte Carlo prices at arbitrary parameter points, common normals across points."""
    points = np.atleast_2d(points)
    total = np.zeros(points.shape[0])
    done = 0
    while done < mc_samples:
        c = min(chunk, mc_samples - done)
        z = rng.standard_normal((c, 2))
        for s in range(0, points.shape[0], 64):
            x = points[s:s + 64, None, :]
            a, b, k = _terminal(x, z[None, :, 0], z[None, :, 1], model.r, model.s0)
            total[s:s + 64] += np.maximum(a - b - k, 0.0).sum(axis=1)
        done += c
    return total / mc_samples


@dataclass
class CalibrationResult:
    sigma1: float
    sigma2: float
    loss: float
    iterations: int
    gradient_norm: float
    tolerance_missed: bool


def calibrate(surrogate, quotes: QuoteGrid, rho_fixed: float = -0.3,
              bounds=((0.0, 0.5), (0.0, 0.5)), init=(0.2, 0.2), fd_step: float = 1e-5,
              gtol: float = 1e-10, max_iter: int = 500) -> CalibrationResult:
    """Fit ``(sigma1, sigma2)`` by projected Gauss-Newton on the mean squared quote mismatch.

    ``surrogate`` maps ``(N, 5)`` parameter points to prices.  The Jacobian
    uses forward differences (backward at an upper bound).  Iteration stops
    when the projected gradient norm drops to ``gtol``, when a line search
    cannot improve the loss, or after ``max_iter`` iterations; the flag
    ``tolerance_missed`` reports whether ``gtol`` was reached.
    """
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    target = np.asarray(quotes.prices, dtype=float).ravel()
    nq = target.size

    def residual(theta):
        pts = quotes.points(theta[0], theta[1], rho_fixed)
        return np.asarray(surrogate(pts), dtype=float) - target

    def jacobian(theta, r0):
        J = np.empty((nq, 2))
        for j in range(2):
            h = fd_step if theta[j] + fd_step <= hi[j] else -fd_step
            tp = theta.copy()
            tp[j] += h
            J[:, j] = (residual(tp) - r0) / h
        return J

    theta = np.clip(np.asarray(init, dtype=float), lo, hi)
    r0 = residual(theta)
    loss = float(r0 @ r0 / nq)
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        J = jacobian(theta, r0)
        grad = 2.0 * J.T @ r0 / nq
        gnorm = float(np.linalg.norm(theta - np.clip(theta - grad, lo, hi)))
        if gnorm <= gtol:
            break
        JtJ = J.T @ J
        step = -np.linalg.lstsq(JtJ + 1e-14 * np.trace(JtJ) * np.eye(2), J.T @ r0, rcond=None)[0]
        accepted = False
        for direction in (step, -grad):
            alpha = 1.0
            for _ in range(50):
                cand = np.clip(theta + alpha * direction, lo, hi)
                rc = residual(cand)
                lc = float(rc @ rc / nq)
                if lc <= loss + 1e-4 * float(grad @ (cand - theta)) and lc < loss:
                    accepted = True
                    break
                alpha *= 0.5
            if accepted:
                break
        if not accepted:
            break
        theta, r0, loss = cand, rc, lc
    return CalibrationResult(float(theta[0]), float(theta[1]), loss, it, gnorm, bool(gnorm > gtol))


@dataclass
class DegeneracyResult:
    max_difference: float
    standard_error: float
    differences: np.ndarray


def degeneracy_probe(model_true: BSModel, alt_params, maturities=STUDY_MATURITIES,
                     strikes=STUDY_STRIKES, mc_samples: int = 500_000, rng=None) -> DegeneracyResult:
    """Largest absolute price difference between two parameter sets over a quote grid.

    Each set is priced with its own independent Monte Carlo sample; the
    returned standard error belongs to the difference at the maximising cell.
    """
    rng = np.random.default_rng() if rng is None else rng
    r1, r2 = rng.spawn(2)
    alt = model_true.with_params(*alt_params)
    q1 = synth_market(model_true, maturities, strikes, mc_samples, rng=r1)
    q2 = synth_market(alt, maturities, strikes, mc_samples, rng=r2)
    diff = np.abs(q1.prices - q2.prices)
    k = np.unravel_index(np.argmax(diff), diff.shape)
    se = float(np.hypot(q1.std_errors[k], q2.std_errors[k]))
    return DegeneracyResult(float(diff[k]), se, diff)


def write_quotes_csv(path, quotes: QuoteGrid):
    """Columns ``T, K, price, mc_samples, seed``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["T", "K", "price", "mc_samples", "seed"])
        for i, T in enumerate(quotes.maturities):
            for j, K in enumerate(quotes.strikes):
                writer.writerow([f"{T:.17g}", f"{K:.17g}", f"{quotes.prices[i, j]:.17g}",
                                 quotes.mc_samples, "" if quotes.seed is None else quotes.seed])


def read_quotes_csv(path) -> QuoteGrid:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no quotes")
    missing = {"T", "K", "price"} - set(rows[0])
    if missing:
        raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
    mats = np.array(sorted({float(r["T"]) for r in rows}))
    ks = np.array(sorted({float(r["K"]) for r in rows}))
    prices = np.full((mats.size, ks.size), np.nan)
    for r in rows:
        prices[np.searchsorted(mats, float(r["T"])), np.searchsorted(ks, float(r["K"]))] = float(r["price"])
    if np.isnan(prices).any():
        raise ValueError(f"{path}: quote grid is incomplete")
    seed = rows[0].get("seed") or None
    return QuoteGrid(mats, ks, prices, None, int(rows[0].get("mc_samples") or 0), seed)


def save_surrogate(approx: Approximant, directory, params, seed=None, model: BSModel = BSModel()):
    """Persist a surrogate over a payoff-field subspace.

    Writes the basis files, the field realisations ``params.csv``, the
    triangular factor and the coefficients, enough to rebuild off-grid
    evaluation in :func:`load_surrogate`.
    """
    basis = approx.basis
    save_discrete_basis(basis, directory, seed=seed,
                        extra={"pipeline": approx.pipeline, "projected": approx.projected,
                               "model": {"r": model.r, "s0": list(model.s0)}})
    np.savetxt(os.path.join(directory, "params.csv"), np.atleast_2d(params), delimiter=",",
               fmt="%.17g", header="z1,z2", comments="")
    np.savetxt(os.path.join(directory, "r_factor.csv"), basis.r_factor, delimiter=",", fmt="%.17g")
    with open(os.path.join(directory, "coefficients.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "alpha", "projected"])
        for i, a in enumerate(approx.coefficients):
            writer.writerow([i, f"{a:.17g}", int(approx.projected)])


def load_surrogate(directory) -> Approximant:
    grid, _, meta = load_discrete_basis(directory)
    params = np.loadtxt(os.path.join(directory, "params.csv"), delimiter=",", skiprows=1, ndmin=2)
    r_factor = np.loadtxt(os.path.join(directory, "r_factor.csv"), delimiter=",", ndmin=2)
    with open(os.path.join(directory, "coefficients.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    alpha = np.array([float(r["alpha"]) for r in rows])
    mdl = meta.get("model", {})
    model = BSModel(r=mdl.get("r", 0.03), s0=tuple(mdl.get("s0", (100.0, 96.0))))
    field_ = payoff_field(model)
    fn = lambda x: field_.evaluate(x, params)
    dom = meta.get("domain")
    domain = HyperRectangle(dom["lower"], dom["upper"]) if dom else FINANCE_DOMAIN
    basis = DiscreteBasis(fn, grid, fn(grid), r_factor, domain, metadata={"kind": "discrete"})
    return Approximant(alpha, basis, meta.get("pipeline", ""), projected=bool(meta.get("projected")))
