"""Derivation of independent random substreams from one master seed.

Every consumer of randomness (design, variance estimation, evaluation, test
set, ...) gets its own ``SeedSequence`` keyed by a fixed purpose code and any
replicate indices, so results do not depend on call order or worker count.
"""

from __future__ import annotations

import numpy as np

from .domain import PointStream

__all__ = ["PURPOSES", "SeedPlan"]

PURPOSES = {
    "design": 0,
    "variance": 1,
    "evaluation": 2,
    "test": 3,
    "erm": 4,
    "subspace": 5,
    "market": 6,
    "calibration": 7,
    "reference": 8,
}


class SeedPlan:
    """Keyed substreams of a master seed."""

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)

    def _key(self, purpose, indices):
        if purpose not in PURPOSES:
            raise KeyError(f"unknown purpose {purpose!r}")
        return (PURPOSES[purpose],) + tuple(int(i) for i in indices)

    def seed_sequence(self, purpose: str, *indices) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.master_seed, spawn_key=self._key(purpose, indices))

    def rng(self, purpose: str, *indices) -> np.random.Generator:
        return np.random.default_rng(self.seed_sequence(purpose, *indices))

    def stream(self, kind: str, dim: int, purpose: str, *indices) -> PointStream:
        """Point stream of the given kind (``iid`` or ``sobol``) keyed like :meth:`rng`."""
        if kind == "halton":
            raise ValueError("halton streams are deterministic; build them directly")
        return PointStream(kind, dim, seed=self.master_seed, spawn_key=self._key(purpose, indices))

    def __repr__(self):
        return f"SeedPlan({self.master_seed})"
