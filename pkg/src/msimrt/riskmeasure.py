"""Coherent risk measures on finite-support cost distributions.

Five measures are used by the planner: the expectation, AV@R at 0.8, the
worst case, and the two 50/50 blends of the expectation with the latter
two.  A measure is a tree of ``RiskMeasure`` nodes; :meth:`RiskMeasure.terms`
flattens it into weighted leaf terms, which is what the stage LP builder
consumes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

E, AVAR, WORST, COMBO = "E", "AVAR", "WORST", "COMBO"


@dataclass(frozen=True)
class RiskMeasure:
    kind: str
    alpha: float = 0.0
    weight: float = 1.0
    inner: tuple["RiskMeasure", "RiskMeasure"] | None = None

    def __post_init__(self):
        if self.kind not in (E, AVAR, WORST, COMBO):
            raise ValueError(f"unknown risk measure kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"AV@R level must lie in [0, 1], got {self.alpha}")
        if self.kind == COMBO:
            if self.inner is None or len(self.inner) != 2:
                raise ValueError("a combination needs exactly two inner measures")
            if not 0.0 <= self.weight <= 1.0:
                raise ValueError(f"combination weight must lie in [0, 1], got {self.weight}")

    def terms(self) -> list[tuple[float, str, float]]:
        """Leaf terms ``(weight, kind, alpha)`` with kind in {E, AVAR, WORST}.

        AV@R at level 0 is dispatched to E and at level 1 to WORST, so the
        AVAR leaves always have 0 < alpha < 1.
        """
        if self.kind == COMBO:
            a, b = self.inner
            out = [(self.weight * w, k, al) for w, k, al in a.terms()]
            out += [((1.0 - self.weight) * w, k, al) for w, k, al in b.terms()]
            return [t for t in out if t[0] > 0.0]
        if self.kind == AVAR:
            if self.alpha == 0.0:
                return [(1.0, E, 0.0)]
            if self.alpha == 1.0:
                return [(1.0, WORST, 1.0)]
            return [(1.0, AVAR, self.alpha)]
        return [(1.0, self.kind, 1.0 if self.kind == WORST else 0.0)]

    def __str__(self) -> str:
        if self.kind == COMBO:
            return f"{self.weight:g}*{self.inner[0]}+{1 - self.weight:g}*{self.inner[1]}"
        if self.kind == AVAR:
            return f"avar:{self.alpha:g}"
        return "worst" if self.kind == WORST else "E"


EXPECTATION = RiskMeasure(E)
WORST_CASE = RiskMeasure(WORST)


def avar(alpha: float) -> RiskMeasure:
    return RiskMeasure(AVAR, alpha=alpha)


def combo(weight: float, first: RiskMeasure, second: RiskMeasure) -> RiskMeasure:
    return RiskMeasure(COMBO, weight=weight, inner=(first, second))


def parse(text: str) -> RiskMeasure:
    """Parse ``E``, ``avar:0.8``, ``worst``, ``E+avar:0.8``, ``E+worst``.

    ``a+b`` is the equal-weight blend ``0.5 a + 0.5 b``; the explicit form
    ``w*a+v*b`` (as printed by ``str``) is accepted too.
    """
    text = text.strip()
    if "+" in text:
        left, right = text.split("+", 1)
        wl, left = _weighted(left)
        wr, right = _weighted(right)
        if wl is None and wr is None:
            return combo(0.5, parse(left), parse(right))
        w = wl if wl is not None else 1.0 - wr
        if wr is not None and abs(w + wr - 1.0) > 1e-9:
            raise ValueError(f"blend weights in {text!r} must sum to 1")
        return combo(w, parse(left), parse(right))
    low = text.lower()
    if low == "e":
        return EXPECTATION
    if low == "worst":
        return WORST_CASE
    if low.startswith("avar:"):
        try:
            level = float(low.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad AV@R level in {text!r}") from None
        return avar(level)
    raise ValueError(f"unrecognised risk measure {text!r}")


def _weighted(term: str) -> tuple[float | None, str]:
    if "*" not in term:
        return None, term
    w, rest = term.split("*", 1)
    try:
        return float(w), rest
    except ValueError:
        raise ValueError(f"bad blend weight in {term!r}") from None


STANDARD_MEASURES = {
    "E": parse("E"),
    "avar:0.8": parse("avar:0.8"),
    "worst": parse("worst"),
    "E+avar:0.8": parse("E+avar:0.8"),
    "E+worst": parse("E+worst"),
}


def _check(costs, probs):
    z = np.asarray(costs, dtype=float).ravel()
    q = np.asarray(probs, dtype=float).ravel()
    if z.size != q.size or z.size == 0:
        raise ValueError("costs and probabilities must be non-empty and of equal length")
    if (q < 0).any() or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must be nonnegative and sum to one")
    if not np.isfinite(z).all():
        raise ValueError("costs must be finite")
    return z, q


def _avar_value(z, q, alpha):
    # the minimising zeta of the Rockafellar-Uryasev form is the alpha-quantile,
    # so it suffices to scan the atoms
    scale = 1.0 / (1.0 - alpha)
    return min(zeta + scale * float(q @ np.maximum(z - zeta, 0.0)) for zeta in z)


def evaluate(rm: RiskMeasure, costs, probs) -> float:
    z, q = _check(costs, probs)
    total = 0.0
    for w, kind, alpha in rm.terms():
        if kind == E:
            total += w * float(q @ z)
        elif kind == WORST:
            total += w * float(z[q > 0].max())
        else:
            total += w * _avar_value(z, q, alpha)
    return total


def _avar_weights(z, q, alpha):
    # mass q/(1-alpha) on atoms strictly above VaR, remainder on the VaR atom;
    # equal costs are filled in index order
    order = np.lexsort((np.arange(z.size), -z))
    mu = np.zeros_like(q)
    budget = 1.0
    scale = 1.0 / (1.0 - alpha)
    for i in order:
        if budget <= 0.0:
            break
        take = min(q[i] * scale, budget)
        mu[i] = take
        budget -= take
    return mu


def risk_adjusted_probs(rm: RiskMeasure, costs, probs) -> np.ndarray:
    """A maximiser of ``mu @ costs`` over the dual set of ``rm``."""
    z, q = _check(costs, probs)
    mu = np.zeros_like(q)
    for w, kind, alpha in rm.terms():
        if kind == E:
            mu += w * q
        elif kind == WORST:
            top = (z == z[q > 0].max()) & (q > 0)
            mu += w * top / top.sum()
        else:
            mu += w * _avar_weights(z, q, alpha)
    return mu
