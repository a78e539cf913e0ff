"""Finite-support organ-motion model.

Each realisation is a rigid translation of the whole patient relative to the
fixed beams.  Realisation 0 is always the nominal (zero) position; the rest
are draws from an isotropic zero-mean Gaussian.  Realisation indices are
0-based throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .phantom import DoseInfluence


@dataclass(frozen=True)
class ScenarioSet:
    displacements: np.ndarray  # (P, 3) mm
    probabilities: np.ndarray  # (P,)
    seed: int | None = None
    sigma_mm: float = 0.0

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.displacements, dtype=float))
        q = np.asarray(self.probabilities, dtype=float).ravel()
        if d.shape[1:] != (3,) or len(d) < 1:
            raise ValueError("displacements must be (P, 3) with P >= 1")
        if q.size != len(d):
            raise ValueError("one probability per displacement")
        if (q <= 0).any() or abs(q.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be positive and sum to one")
        if not np.isfinite(d).all():
            raise ValueError("displacements must be finite")
        object.__setattr__(self, "displacements", d)
        object.__setattr__(self, "probabilities", q)

    @property
    def P(self) -> int:
        return len(self.displacements)

    def realize(self, nominal: DoseInfluence) -> list[np.ndarray]:
        return shifted_dose_matrices(nominal, self.displacements)

    def nearest(self, displacement) -> int:
        d2 = ((self.displacements - np.asarray(displacement)) ** 2).sum(axis=1)
        return int(np.argmin(d2))


def sample_miga(sigma_mm: float, P: int, seed: int | None = None) -> ScenarioSet:
    """``P`` equally likely displacements, the first of which is the nominal position."""
    if P < 1:
        raise ValueError(f"need at least one realisation, got P={P}")
    if sigma_mm <= 0 and P > 1:
        raise ValueError("sigma_mm must be positive")
    rng = np.random.default_rng(seed)
    disp = rng.normal(0.0, sigma_mm, size=(P, 3)) if P > 1 else np.zeros((1, 3))
    disp[0] = 0.0
    return ScenarioSet(disp, np.full(P, 1.0 / P), seed, float(sigma_mm))


def nominal_only() -> ScenarioSet:
    return ScenarioSet(np.zeros((1, 3)), np.ones(1), None, 0.0)


def shifted_dose_matrices(nominal: DoseInfluence, displacements) -> list[np.ndarray]:
    """One dose-influence matrix per displacement; a zero shift returns the nominal matrix."""
    disp = np.atleast_2d(np.asarray(displacements, dtype=float))
    if not np.isfinite(disp).all():
        raise ValueError("displacements must be finite")
    return [nominal.shifted(d) for d in disp]


def draw_path(scen: ScenarioSet | np.ndarray, F: int, rng: np.random.Generator) -> np.ndarray:
    """``F`` independent realisation indices drawn with the scenario probabilities."""
    if F < 1:
        raise ValueError("a path needs at least one fraction")
    q = scen.probabilities if isinstance(scen, ScenarioSet) else np.asarray(scen, dtype=float)
    if q.size == 1:
        return np.zeros(F, dtype=np.int64)
    return rng.choice(q.size, size=F, p=q).astype(np.int64)


def draw_path_out_of_sample(scen: ScenarioSet, F: int, rng: np.random.Generator) -> np.ndarray:
    """Fresh Gaussian displacements, each mapped to the closest atom of ``scen``."""
    if F < 1:
        raise ValueError("a path needs at least one fraction")
    if scen.P == 1:
        return np.zeros(F, dtype=np.int64)
    draws = rng.normal(0.0, scen.sigma_mm, size=(F, 3))
    return np.array([scen.nearest(d) for d in draws], dtype=np.int64)
