"""Nonparametric priors for object births, deaths, and measurement allocation.

Two stochastic processes drive the tracker.  A dependent Dirichlet process
(DDP) governs how clusters (objects) persist and appear over time: a cluster
that survived from the previous step attracts assignments in proportion to
its past and current occupancy, a fresh cluster opens with rate alpha.  An
Indian buffet process (IBP) governs the binary measurement-to-object
allocation matrix: a column (object) is picked by a new row (measurement)
in proportion to its popularity, and each row opens a Poisson-thinned
number of brand-new columns.

The three-case DDP predictive, given per-cluster survived counts V_{k|k-1}
and within-step counts V_k:

    case 1 (occupied):        (V_{k|k-1}[j] + V_k[j]) / (alpha + T)
    case 2 (survived, empty):  V_{k|k-1}[j]           / (alpha + T)
    case 3 (new cluster):      alpha                  / (alpha + T)

with T = sum_j (V_{k|k-1}[j] + V_k[j]).  Clusters with both counts zero are
dead and carry probability exactly zero.

Hyperparameter moves: alpha is resampled with the usual auxiliary-variable
(beta-augmentation) scheme for a DP concentration under a Gamma prior;
gamma is conjugate because the total number of columns opened by N rows is
Poisson(gamma * H_N), H_N the N-th harmonic number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "DdpCounts",
    "IbpState",
    "ddp_assignment_probabilities",
    "ddp_sample_assignment",
    "ibp_sample_matrix",
    "ibp_existing_column_prior",
    "resample_alpha",
    "resample_gamma",
    "harmonic_number",
]


def harmonic_number(n: int) -> float:
    """H_n = 1 + 1/2 + ... + 1/n, with H_0 = 0."""
    if n < 0:
        raise ValueError(f"harmonic number needs n >= 0, got {n}")
    return sum(1.0 / j for j in range(1, n + 1))


@dataclass(frozen=True)
class DdpCounts:
    """Occupancy bookkeeping for the time-varying cluster assignment prior.

    survived[j] counts members of cluster j that survived and transitioned
    from the previous step; current[j] counts assignments already made to
    cluster j at the present step.  A cluster with survived[j] == 0 and
    current[j] == 0 is dead: it keeps its index but can never be chosen
    again.
    """

    survived: tuple[int, ...]
    current: tuple[int, ...]
    alpha: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "survived", tuple(int(v) for v in self.survived))
        object.__setattr__(self, "current", tuple(int(v) for v in self.current))
        if len(self.survived) != len(self.current):
            raise ValueError(
                "survived and current must have equal length, got "
                f"{len(self.survived)} vs {len(self.current)}"
            )
        if any(v < 0 for v in self.survived) or any(v < 0 for v in self.current):
            raise ValueError("cluster counts must be non-negative")
        if not (self.alpha > 0):
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def num_clusters(self) -> int:
        return len(self.survived)


def ddp_assignment_probabilities(counts: DdpCounts) -> np.ndarray:
    """Predictive probabilities over existing clusters plus one new cluster.

    Returns a vector of length num_clusters + 1; the last entry is the
    probability of opening a new cluster.  Dead clusters get exactly 0.
    """
    J = counts.num_clusters
    probs = np.zeros(J + 1)
    total = float(sum(counts.survived) + sum(counts.current))
    denom = counts.alpha + total
    for j in range(J):
        if counts.current[j] > 0:
            probs[j] = (counts.survived[j] + counts.current[j]) / denom
        elif counts.survived[j] > 0:
            probs[j] = counts.survived[j] / denom
        # else dead: stays 0
    probs[J] = counts.alpha / denom
    return probs


def ddp_sample_assignment(counts: DdpCounts, rng: np.random.Generator) -> int:
    """Draw a cluster index from the DDP predictive.

    Returns an index in [0, num_clusters); num_clusters itself means "new".
    """
    probs = ddp_assignment_probabilities(counts)
    # inverse-cdf draw keeps zero-probability (dead) clusters unreachable
    u = rng.random() * probs.sum()
    acc = 0.0
    for j, p in enumerate(probs):
        acc += p
        if u < acc:
            return j
    return counts.num_clusters


def ibp_sample_matrix(gamma: float, num_rows: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a binary allocation matrix from the IBP restaurant construction.

    Row j (1-indexed) takes existing column i with probability n_i/j and
    opens Poisson(gamma/j) new columns.  The returned matrix is in
    left-ordered form: columns sorted by the binary number they spell
    top-down, descending (equivalently by first-activation row, ties broken
    by the full column pattern).
    """
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    if num_rows < 0:
        raise ValueError(f"num_rows must be non-negative, got {num_rows}")
    columns: list[list[int]] = []  # per column: list of 0/1 of length num_rows
    counts: list[int] = []
    for j in range(1, num_rows + 1):
        for i, n_i in enumerate(counts):
            if rng.random() < n_i / j:
                columns[i][j - 1] = 1
                counts[i] += 1
        fresh = rng.poisson(gamma / j)
        for _ in range(fresh):
            col = [0] * num_rows
            col[j - 1] = 1
            columns.append(col)
            counts.append(1)
    if not columns:
        return np.zeros((num_rows, 0), dtype=np.int8)
    # left-ordered form: descending by column read as a binary number (row 1
    # is the most significant bit)
    order = sorted(range(len(columns)), key=lambda i: tuple(columns[i]), reverse=True)
    mat = np.array([columns[i] for i in order], dtype=np.int8).T
    return mat


@dataclass(frozen=True)
class IbpState:
    """Sufficient statistics of a partially observed buffet.

    column_counts[i] is the number of prior rows that activated column i
    (excluding any row currently being resampled); num_rows is the number
    of customers the counts refer to.
    """

    column_counts: tuple[int, ...]
    num_rows: int
    gamma: float

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "column_counts", tuple(int(v) for v in self.column_counts)
        )
        if any(c < 1 for c in self.column_counts):
            raise ValueError("empty columns are pruned; counts must be >= 1")
        if any(c > self.num_rows for c in self.column_counts):
            raise ValueError("column count cannot exceed num_rows")
        if not (self.gamma > 0):
            raise ValueError(f"gamma must be positive, got {self.gamma}")


def ibp_existing_column_prior(state: IbpState, column: int) -> float:
    """Prior probability that a row activates an existing column.

    This is the popularity rule n_i/j used as the Gibbs prior term
    m_{-r,i} / num_rows; the caller passes counts that already exclude the
    row being resampled.
    """
    if not (0 <= column < len(state.column_counts)):
        raise ValueError(
            f"column {column} out of range for {len(state.column_counts)} columns"
        )
    if state.num_rows < 1:
        raise ValueError("need num_rows >= 1")
    return state.column_counts[column] / state.num_rows


def resample_alpha(
    num_clusters: int,
    num_items: int,
    current_alpha: float,
    prior_shape: float,
    prior_rate: float,
    rng: np.random.Generator,
) -> float:
    """Resample the DDP concentration under a Gamma(shape, rate) prior.

    Auxiliary-variable scheme: draw eta ~ Beta(alpha+1, n), then alpha from
    a two-component Gamma mixture.  With num_items == 0 (or no clusters yet)
    this is exactly a draw from the prior.
    """
    if prior_shape <= 0 or prior_rate <= 0:
        raise ValueError("prior shape and rate must be positive")
    if num_clusters > num_items:
        raise ValueError("cannot have more clusters than items")
    if num_items == 0 or num_clusters == 0:
        return float(rng.gamma(prior_shape, 1.0 / prior_rate))
    if not (current_alpha > 0):
        raise ValueError(f"current_alpha must be positive, got {current_alpha}")
    eta = rng.beta(current_alpha + 1.0, num_items)
    rate = prior_rate - math.log(eta)
    # mixture weight for the higher-shape component
    odds = (prior_shape + num_clusters - 1.0) / (num_items * rate)
    shape = prior_shape + num_clusters
    if rng.random() >= odds / (1.0 + odds):
        shape -= 1.0
    draw = float(rng.gamma(shape, 1.0 / rate))
    return max(draw, 1e-12)


def resample_gamma(
    num_active_columns: int,
    num_rows: int,
    prior_shape: float,
    prior_rate: float,
    rng: np.random.Generator,
) -> float:
    """Resample the IBP rate: conjugate Gamma update.

    The number of columns opened by num_rows customers is
    Poisson(gamma * H_num_rows), so the conditional is
    Gamma(shape + K, rate + H_num_rows).
    """
    if prior_shape <= 0 or prior_rate <= 0:
        raise ValueError("prior shape and rate must be positive")
    if num_rows < 0:
        raise ValueError(f"num_rows must be non-negative, got {num_rows}")
    if num_active_columns < 0:
        raise ValueError(f"num_active_columns must be non-negative, got {num_active_columns}")
    shape = prior_shape + num_active_columns
    rate = prior_rate + harmonic_number(num_rows)
    draw = float(rng.gamma(shape, 1.0 / rate))
    return max(draw, 1e-12)
