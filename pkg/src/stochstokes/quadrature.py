"""Symmetric triangle quadrature rules in barycentric coordinates.

Weights are normalised to sum to one; multiply by the triangle area.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

__all__ = ["TriangleRule", "RULE_DEG4", "RULE_DEG6", "rule"]


@dataclass(frozen=True)
class TriangleRule:
    degree: int
    points: np.ndarray  # (q, 3) barycentric
    weights: np.ndarray  # (q,)

    @property
    def size(self) -> int:
        return self.weights.size


def _orbit(bary: tuple[float, float, float], w: float) -> tuple[list, list]:
    pts = sorted(set(permutations(bary)))
    return [list(p) for p in pts], [w] * len(pts)


def _build(degree: int, orbits) -> TriangleRule:
    pts: list = []
    wts: list = []
    for (_, b, c), w in orbits:
        p, q = _orbit((1.0 - b - c, b, c), w)
        pts += p
        wts += q
    w = np.array(wts)
    return TriangleRule(degree, np.array(pts), w / w.sum())


# Strang-Fix / Dunavant 6-point rule, exact for degree 4
RULE_DEG4 = _build(
    4,
    [
        ((0.108103018168070, 0.445948490915965, 0.445948490915965), 0.223381589678011),
        ((0.816847572980459, 0.091576213509771, 0.091576213509771), 0.109951743655322),
    ],
)

# Dunavant 12-point rule, exact for degree 6
RULE_DEG6 = _build(
    6,
    [
        ((0.501426509658179, 0.249286745170910, 0.249286745170910), 0.116786275726379),
        ((0.873821971016996, 0.063089014491502, 0.063089014491502), 0.050844906370207),
        ((0.053145049844817, 0.310352451033784, 0.636502499121399), 0.082851075618374),
    ],
)


def rule(degree: int) -> TriangleRule:
    if degree <= 4:
        return RULE_DEG4
    if degree <= 6:
        return RULE_DEG6
    raise ValueError(f"no rule of degree {degree}")
