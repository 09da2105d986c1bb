"""OSPA multi-object performance metric and cardinality-error summaries.

The optimal subpattern assignment (OSPA) distance of order p with cut-off c
between finite point sets X and Y, with m = |X| <= n = |Y|:

    d_p^c(X, Y) = ( (1/n) [ min_pi sum_i min(d(x_i, y_pi(i)), c)^p
                            + c^p (n - m) ] )^(1/p)

decomposed into a localization term (the matched-distance part) and a
cardinality term (the c-penalty part).  The inner minimization over
injective assignments is solved exactly with the Hungarian algorithm.
Distances are Euclidean on planar positions; both sets empty gives 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = ["OspaParams", "ospa", "cardinality_error"]


@dataclass(frozen=True)
class OspaParams:
    order: float = 1.0
    cutoff: float = 100.0

    def __post_init__(self) -> None:
        if not (self.order >= 1):
            raise ValueError(f"order must be >= 1, got {self.order}")
        if not (self.cutoff > 0):
            raise ValueError(f"cutoff must be positive, got {self.cutoff}")


def _as_points(X) -> np.ndarray:
    pts = np.asarray(list(X), dtype=float)
    if pts.size == 0:
        return np.zeros((0, 2))
    return pts.reshape(len(pts), 2)


def ospa(X, Y, params: OspaParams = OspaParams()) -> tuple[float, float, float]:
    """Return (total, localization, cardinality) OSPA components.

    Symmetric in its set arguments; each component lies in [0, cutoff] and
    total^p = loc^p + card^p.
    """
    A, B = _as_points(X), _as_points(Y)
    if len(A) > len(B):
        A, B = B, A
    m, n = len(A), len(B)
    if n == 0:
        return 0.0, 0.0, 0.0
    p, c = params.order, params.cutoff
    if m == 0:
        card = c * ((n - m) / n) ** (1.0 / p)
        return card, 0.0, card
    # pairwise Euclidean distances clipped at the cut-off
    diff = A[:, None, :] - B[None, :, :]
    D = np.minimum(np.sqrt((diff ** 2).sum(axis=2)), c)
    rows, cols = linear_sum_assignment(D ** p)
    matched = float((D[rows, cols] ** p).sum())
    loc = (matched / n) ** (1.0 / p)
    card = c * ((n - m) / n) ** (1.0 / p)
    total = ((matched + (c ** p) * (n - m)) / n) ** (1.0 / p)
    return float(total), float(loc), float(card)


def cardinality_error(true_counts, est_counts) -> tuple[list[int], float]:
    """Per-step signed errors (est - true) and their mean absolute value."""
    true_counts = list(true_counts)
    est_counts = list(est_counts)
    if len(true_counts) != len(est_counts):
        raise ValueError(
            f"length mismatch: {len(true_counts)} true vs {len(est_counts)} estimated"
        )
    errors = [int(e) - int(t) for t, e in zip(true_counts, est_counts)]
    mae = float(np.mean([abs(e) for e in errors])) if errors else 0.0
    return errors, mae
