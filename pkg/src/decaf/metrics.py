"""Distances between compositions and the random-guess reference point."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class DistanceTriple:
    l1: float
    l2: float
    linf: float

    def to_dict(self) -> dict:
        return {"L1": self.l1, "L2": self.l2, "Linf": self.linf}


def lp_distance(x, y, p: float) -> float:
    """``(sum |x_i - y_i|^p)^(1/p)``; ``p=inf`` gives the largest absolute difference."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    diff = np.abs(x - y)
    if math.isinf(p):
        return float(diff.max()) if diff.size else 0.0
    if p <= 0:
        raise ValueError("p must be positive")
    return float(np.sum(diff ** p) ** (1.0 / p))


def distances(x, y) -> DistanceTriple:
    return DistanceTriple(lp_distance(x, y, 1), lp_distance(x, y, 2), lp_distance(x, y, math.inf))


def mean_triple(triples: Iterable[DistanceTriple]) -> DistanceTriple:
    arr = np.array([(t.l1, t.l2, t.linf) for t in triples])
    if arr.size == 0:
        raise ValueError("no distances to average")
    m = arr.mean(axis=0)
    return DistanceTriple(float(m[0]), float(m[1]), float(m[2]))


def random_guess_baseline(
    truth,
    trials: int = 1000,
    seed: int | np.random.Generator = 0,
    null_classes: Iterable[int] | None = None,
) -> DistanceTriple:
    """Mean distance from ``truth`` to compositions drawn uniformly from the simplex.

    By default the guesser knows nothing and draws from the full simplex. When
    ``null_classes`` is given those entries are fixed at zero and the guess is
    uniform over the remaining face.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    truth = np.asarray(truth, dtype=float)
    n = len(truth)
    rng = np.random.default_rng(seed)
    support = np.ones(n, dtype=bool)
    if null_classes is not None:
        support[list(null_classes)] = False
    guesses = np.zeros((trials, n))
    guesses[:, support] = rng.dirichlet(np.ones(int(support.sum())), size=trials)
    diff = np.abs(guesses - truth)
    return DistanceTriple(
        float(diff.sum(axis=1).mean()),
        float(np.sqrt((diff ** 2).sum(axis=1)).mean()),
        float(diff.max(axis=1).mean()),
    )
