"""Domains, reference measures and point streams.

Every domain is an axis-aligned box carrying a product probability measure.
Point streams emit samples in the unit cube which are then mapped affinely
onto a box.  Three stream kinds exist:

* ``iid``    -- pseudo-random uniforms from a seeded ``numpy`` generator,
* ``halton`` -- the unscrambled Halton sequence (index 0 is skipped, so the
  base-2 sequence starts 1/2, 1/4, 3/4, ...),
* ``sobol``  -- scrambled Sobol' points.  Scrambling is scipy's linear
  matrix scramble followed by a random digital shift, both keyed by the seed.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.stats import qmc

from .errors import QuadratureError

__all__ = [
    "HyperRectangle",
    "ProductMeasure",
    "PointStream",
    "generate_points",
    "quadrature_integral",
    "radical_inverse",
    "star_discrepancy_estimate",
    "write_points_csv",
    "read_points_csv",
]

# offset between index ranges of spawned Halton substreams
_HALTON_SPAWN_STRIDE = 1 << 24


@dataclass(frozen=True)
class HyperRectangle:
    """Axis-aligned box ``[lower_1, upper_1] x ... x [lower_d, upper_d]``."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or len(lo) == 0:
            raise ValueError("lower and upper must be non-empty and of equal length")
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValueError(f"need lower < upper componentwise, got {lo} and {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def cube(cls, d, lower=-1.0, upper=1.0):
        return cls((lower,) * d, (upper,) * d)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lower_array(self) -> np.ndarray:
        return np.asarray(self.lower)

    @property
    def upper_array(self) -> np.ndarray:
        return np.asarray(self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.upper_array - self.lower_array

    def from_unit(self, u):
        """Map points of the unit cube onto the box."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        return self.lower_array + u * self.width

    def to_unit(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return (x - self.lower_array) / self.width

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.all((x >= self.lower_array) & (x <= self.upper_array), axis=1)


@dataclass(frozen=True)
class ProductMeasure:
    """Product probability measure on a box.

    Only uniform marginals are implemented; ``marginals`` names one density
    per dimension so other families can be slotted in later.
    """

    domain: HyperRectangle
    marginals: tuple = field(default=None)

    def __post_init__(self):
        marg = self.marginals
        if marg is None:
            marg = ("uniform",) * self.domain.dim
        marg = tuple(marg)
        if len(marg) != self.domain.dim:
            raise ValueError("one marginal per dimension required")
        unknown = set(marg) - {"uniform"}
        if unknown:
            raise ValueError(f"unsupported marginal densities: {sorted(unknown)}")
        object.__setattr__(self, "marginals", marg)

    @classmethod
    def uniform(cls, domain):
        return cls(domain)

    @property
    def dim(self) -> int:
        return self.domain.dim

    def marginal_density(self, j: int) -> Callable:
        a, b = self.domain.lower[j], self.domain.upper[j]

        def density(t):
            t = np.asarray(t, dtype=float)
            return np.where((t >= a) & (t <= b), 1.0 / (b - a), 0.0)

        return density

    def sample(self, count, rng) -> np.ndarray:
        """Draw ``count`` iid points from the measure."""
        return self.domain.from_unit(rng.random((count, self.dim)))

    def quadrature_rule(self, level):
        """Tensor Gauss-Legendre nodes and probability weights."""
        t, wt = leggauss(level)
        axes, weights = [], []
        for j in range(self.dim):
            a, b = self.domain.lower[j], self.domain.upper[j]
            axes.append(0.5 * (a + b) + 0.5 * (b - a) * t)
            weights.append(0.5 * wt)
        grids = np.meshgrid(*axes, indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=1)
        w = weights[0]
        for extra in weights[1:]:
            w = np.multiply.outer(w, extra)
        return nodes, np.ravel(w)


def radical_inverse(indices, base: int) -> np.ndarray:
    """Van der Corput radical inverse of non-negative integers in ``base``."""
    idx = np.asarray(indices, dtype=np.int64).copy()
    result = np.zeros(idx.shape, dtype=float)
    scale = 1.0 / base
    while np.any(idx > 0):
        idx, digit = np.divmod(idx, base)
        result += digit * scale
        scale /= base
    return result


class PointStream:
    """Replayable generator of points in the unit cube.

    Use the constructors :meth:`iid`, :meth:`halton` and :meth:`sobol`.
    Calling :meth:`random` advances the stream; :meth:`replay` returns a
    fresh copy at the initial state and :meth:`spawn` an independent
    substream keyed by an integer.
    """

    def __init__(self, kind, dim, seed=None, bases=None, skip=0, spawn_key=()):
        if kind not in ("iid", "halton", "sobol"):
            raise ValueError(f"unknown stream kind {kind!r}")
        if dim < 1:
            raise ValueError("dimension must be positive")
        if kind == "halton":
            if bases is None or len(bases) != dim:
                raise ValueError("halton stream needs one base per dimension")
            bases = tuple(int(b) for b in bases)
        self.kind = kind
        self.dim = int(dim)
        self.seed = seed
        self.bases = bases
        self.skip = int(skip)
        self.spawn_key = tuple(spawn_key)
        self._reset()

    @classmethod
    def iid(cls, dim, seed):
        return cls("iid", dim, seed=seed)

    @classmethod
    def halton(cls, bases: Sequence[int], skip=0):
        return cls("halton", len(bases), bases=bases, skip=skip)

    @classmethod
    def sobol(cls, dim, seed):
        return cls("sobol", dim, seed=seed)

    def _seed_sequence(self):
        return np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)

    def _reset(self):
        self._position = 0
        if self.kind == "iid":
            self._rng = np.random.default_rng(self._seed_sequence())
        elif self.kind == "sobol":
            self._engine = qmc.Sobol(self.dim, scramble=True,
                                     seed=np.random.default_rng(self._seed_sequence()))

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "seed": self.seed,
                "bases": list(self.bases) if self.bases else None,
                "skip": self.skip, "spawn_key": list(self.spawn_key)}

    def random(self, count: int) -> np.ndarray:
        """Next ``count`` points, shape ``(count, dim)``, inside ``[0, 1]^dim``."""
        count = int(count)
        if count < 1:
            raise ValueError("count must be at least 1")
        if self.kind == "iid":
            out = self._rng.random((count, self.dim))
        elif self.kind == "halton":
            idx = np.arange(self._position, self._position + count) + 1 + self.skip
            out = np.stack([radical_inverse(idx, b) for b in self.bases], axis=1)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                out = self._engine.random(count)
        self._position += count
        return out

    def replay(self) -> "PointStream":
        return PointStream(self.kind, self.dim, seed=self.seed, bases=self.bases,
                           skip=self.skip, spawn_key=self.spawn_key)

    def spawn(self, key: int) -> "PointStream":
        """Independent substream; identical keys give identical substreams."""
        if self.kind == "halton":
            return PointStream("halton", self.dim, bases=self.bases,
                               skip=self.skip + (int(key) + 1) * _HALTON_SPAWN_STRIDE,
                               spawn_key=self.spawn_key + (int(key),))
        return PointStream(self.kind, self.dim, seed=self.seed,
                           spawn_key=self.spawn_key + (int(key),))

    def with_dim(self, dim) -> "PointStream":
        """Same kind and seed, different dimension (Halton uses the first primes)."""
        if self.kind == "halton":
            return PointStream.halton(_first_primes(dim), skip=self.skip)
        return PointStream(self.kind, dim, seed=self.seed, spawn_key=self.spawn_key)


def _first_primes(k):
    primes, cand = [], 2
    while len(primes) < k:
        if all(cand % p for p in primes):
            primes.append(cand)
        cand += 1
    return primes


def generate_points(stream: PointStream, count: int, domain: HyperRectangle) -> np.ndarray:
    """Draw ``count`` points from ``stream`` and map them onto ``domain``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    if stream.dim != domain.dim:
        raise ValueError(f"stream dimension {stream.dim} != domain dimension {domain.dim}")
    return domain.from_unit(stream.random(count))


def quadrature_integral(g, measure: ProductMeasure, level: int = 64) -> float:
    """Tensor Gauss-Legendre estimate of the integral of ``g`` against ``measure``.

    ``g`` maps an ``(N, d)`` array of points to ``N`` values.  The rule with
    ``level`` nodes per dimension integrates polynomials of per-dimension
    degree ``2 * level - 1`` exactly.
    """
    if level < 1:
        raise ValueError("level must be positive")
    nodes, weights = measure.quadrature_rule(level)
    values = np.asarray(g(nodes), dtype=float).reshape(-1)
    bad = ~np.isfinite(values)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise QuadratureError(nodes[k], values[k])
    return float(weights @ values)


def star_discrepancy_estimate(u, n_boxes=4096, rng=None) -> float:
    """Lower estimate of the star discrepancy by random anchored boxes.

    Box corners are drawn both uniformly and from the points themselves,
    where the extremal boxes tend to sit.
    """
    u = np.atleast_2d(u)
    rng = np.random.default_rng(0) if rng is None else rng
    corners = np.vstack([rng.random((n_boxes, u.shape[1])), u])
    worst = 0.0
    for chunk in np.array_split(corners, max(1, len(corners) // 512)):
        inside = np.all(u[None, :, :] <= chunk[:, None, :], axis=2).mean(axis=1)
        vol = np.prod(chunk, axis=1)
        worst = max(worst, float(np.max(np.abs(inside - vol))))
    return worst


def write_points_csv(path, points):
    """One row per point, columns ``x1..xd``, 17 significant digits."""
    points = np.atleast_2d(points)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j + 1}" for j in range(points.shape[1])])
        for row in points:
            writer.writerow([f"{float(v):.17g}" for v in row])


def read_points_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = [k for k, name in enumerate(header) if name.startswith("x")]
        rows = [[float(r[k]) for k in cols] for r in reader]
    return np.asarray(rows, dtype=float).reshape(-1, len(cols))
