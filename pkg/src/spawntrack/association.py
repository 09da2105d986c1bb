"""Measurement-to-object allocation matrix and its Gibbs moves.

The binary matrix A has one row per measurement at the current step and one
column per live object label.  a[r, l] = 1 means object l is one of the
origins of measurement r; a row with several ones is a spawning event.  The
prior over A is the exchangeable form of the IBP: an active column with m
ones among M rows carries the weight

    Beta(m, M - m + 1) = (m-1)! (M-m)! / M!

(the normalized pattern law, since sum over nonempty patterns of that Beta
equals H_M), and the total number of freshly opened columns is
Poisson(gamma * H_M).  The Gibbs conditional for an existing entry then has
prior odds m_{-r,c} / (M - m_{-r,c}), the familiar popularity rule.

Structural constraints, enforced as move vetoes rather than errors:

  * no orphan measurements — a flip may never empty a row (the model has no
    clutter density, so an unexplained measurement has no likelihood);
  * a surviving object's column may not gain its first entry or lose its
    last one through an entry flip — those transitions belong to the
    survival/death move, which prices them with the survival prior;
  * a newborn column never goes empty — birth and death of newborn objects
    happen atomically through the per-row block move below, keeping every
    reverse move available.

The per-row block move resamples the set of newborn singleton columns
currently sitting in a row: it proposes k* ~ Poisson(gamma / M) replacement
columns with states drawn around the measurement and accepts or rejects the
block through a Metropolis-Hastings ratio; this is the Case-3 (new cluster)
channel of the assignment prior, so its acceptance carries the
alpha / (alpha + T) factor alongside the IBP column weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AllocationMatrix",
    "Violation",
    "BirthResult",
    "masked_states",
    "gibbs_entry_logodds",
    "propose_new_columns",
    "validate",
    "ibp_column_log_factor",
    "row_loglik",
    "log_poisson",
]

_LOG_2PI = math.log(2.0 * math.pi)


class AllocationMatrix:
    """Sparse binary allocation with cached column counts.

    rows[r] is the set of active labels in row r; col_counts maps every
    live column label to its number of ones (0 is legal only for the empty
    column of a surviving object).
    """

    __slots__ = ("rows", "col_counts")

    def __init__(self, num_rows: int, labels=()) -> None:
        self.rows: list[set[int]] = [set() for _ in range(num_rows)]
        self.col_counts: dict[int, int] = {int(l): 0 for l in labels}

    @property
    def num_rows(self) -> int:
        return len(self.rows)

    def entry(self, row: int, label: int) -> bool:
        return label in self.rows[row]

    def set_entry(self, row: int, label: int, value: bool) -> None:
        if label not in self.col_counts:
            raise KeyError(f"unknown column label {label}")
        present = label in self.rows[row]
        if value and not present:
            self.rows[row].add(label)
            self.col_counts[label] += 1
        elif not value and present:
            self.rows[row].discard(label)
            self.col_counts[label] -= 1

    def add_column(self, label: int) -> None:
        if label in self.col_counts:
            raise KeyError(f"column label {label} already present")
        self.col_counts[label] = 0

    def drop_column(self, label: int) -> None:
        count = self.col_counts.pop(label)
        if count:
            for row in self.rows:
                row.discard(label)

    def copy(self) -> "AllocationMatrix":
        out = AllocationMatrix.__new__(AllocationMatrix)
        out.rows = [set(r) for r in self.rows]
        out.col_counts = dict(self.col_counts)
        return out


@dataclass(frozen=True)
class Violation:
    kind: str
    row: int | None = None
    col: int | None = None


def validate(A: AllocationMatrix) -> Violation | None:
    """Check structural invariants; return the first violation or None."""
    recount: dict[int, int] = {l: 0 for l in A.col_counts}
    for r, labels in enumerate(A.rows):
        if not labels:
            return Violation("empty-row", row=r)
        for l in labels:
            if l not in recount:
                return Violation("unknown-column", row=r, col=l)
            recount[l] += 1
    for l, n in recount.items():
        if n != A.col_counts[l]:
            return Violation("stale-count", col=l)
    return None


def masked_states(A: AllocationMatrix, row: int, states):
    """The states selected by row r of the allocation mask.

    Returns the ObjectState list for labels active in the row (the row of
    the Hadamard-masked state collection), sorted by label for determinism.
    An all-zero row violates the no-orphan invariant, so hitting one is an
    internal error, not a legal input.
    """
    labels = A.rows[row]
    if not labels:
        raise RuntimeError(f"row {row} has no active entries (invariant breach)")
    return [states.state(l) for l in sorted(labels)]


def row_loglik(labels, positions, y, sigma_o_sq: float) -> float:
    """log N(y; mean of selected positions, sigma_o^2 I2), float-only path."""
    n = len(labels)
    sx = 0.0
    sy = 0.0
    for l in labels:
        px, py = positions[l]
        sx += px
        sy += py
    dx = y[0] - sx / n
    dy = y[1] - sy / n
    return -_LOG_2PI - math.log(sigma_o_sq) - 0.5 * (dx * dx + dy * dy) / sigma_o_sq


def ibp_column_log_factor(m: int, M: int) -> float:
    """log Beta(m, M - m + 1), the weight of an active column with m ones."""
    if not (1 <= m <= M):
        raise ValueError(f"need 1 <= m <= M, got m={m}, M={M}")
    return math.lgamma(m) + math.lgamma(M - m + 1) - math.lgamma(M + 1)


def gibbs_entry_logodds(A, row, col, y, states, meas_model, ibp_gamma=None):
    """Log conditional odds of a_{row,col} = 1 versus 0, or None on veto.

    logodds = log[m_{-r,c} / (M - m_{-r,c})]
              + loglik(y | row with col) - loglik(y | row without col).

    Vetoes (None): flipping off would orphan the row; m_{-r,c} = 0 — for a
    surviving object's column the 0 <-> 1 transition is priced by the
    survival move, and for a newborn singleton it is owned by the block
    move.  The IBP rate cancels from an existing column's conditional;
    ibp_gamma is accepted for interface uniformity only.
    """
    row_set = A.rows[row]
    present = col in row_set
    m_minus = A.col_counts[col] - (1 if present else 0)
    if m_minus == 0:
        return None
    if present and len(row_set) == 1:
        return None
    M = A.num_rows
    pos = states.positions
    s = meas_model.sigma_o_sq
    return (
        math.log(m_minus / (M - m_minus))
        + row_loglik(row_set | {col}, pos, y, s)
        - row_loglik(row_set - {col}, pos, y, s)
    )


@dataclass(frozen=True)
class BirthResult:
    accepted: bool
    removed: tuple[int, ...]
    added: tuple  # of (label, state 4-vector)
    log_delta: float = 0.0  # target log-density change if accepted


def _truncated_poisson_draw(lam: float, rng: np.random.Generator) -> int:
    """Poisson(lam) conditioned on >= 1 (inverse-cdf walk)."""
    u = rng.random()
    k = 1
    p = lam * math.exp(-lam) / -math.expm1(-lam)
    acc = p
    while u > acc and k < 1000:
        k += 1
        p *= lam / k
        acc += p
    return k


def log_poisson(k: int, lam: float) -> float:
    """log Poisson pmf, with the lam = 0 point mass at k = 0."""
    if lam == 0.0:
        return 0.0 if k == 0 else -math.inf
    return k * math.log(lam) - lam - math.lgamma(k + 1)


def propose_new_columns(
    A: AllocationMatrix,
    row: int,
    y,
    states,
    birth_prior,
    gamma: float,
    meas_model,
    rng: np.random.Generator,
    force_accept: bool = False,
    vel_base=None,
) -> BirthResult:
    """Block-resample the newborn singleton columns sitting in one row.

    Proposes k* ~ Poisson(gamma / M) replacement columns, each active only
    in this row, with states positioned around the measurement and
    velocities from the row's base (vel_base, defaulting to the global
    Gaussian birth base) — a data-driven proposal corrected in the MH
    ratio so the target is untouched.  When the row has no support
    besides its own singletons the count proposal is truncated to k* >= 1
    (no-orphan constraint); truncation is symmetric between the forward and
    reverse direction because the move never changes the row's other
    support.  On acceptance A is mutated in place and the caller syncs its
    track set from the BirthResult.  `force_accept` is a test hook for
    auditing the proposal count distribution.
    """
    M = A.num_rows
    row_set = A.rows[row]
    # the newborn singleton columns currently sitting in this row
    own = sorted(l for l in row_set if A.col_counts[l] == 1 and not states.survived(l))
    other_support = len(row_set) - len(own)
    if not force_accept and sum(1 for l in row_set if states.survived(l)) >= 2:
        # A row already explained by two carried objects takes no newborn
        # insertions: when a merged group's members have drifted, a fresh
        # column parked exactly on the measurement is often likelihood-
        # preferred, and once carried it cannot be walked back — it wedges
        # into the group as a permanent phantom member.  The predicate
        # counts only survived columns, which this move never touches, so
        # gating the whole move on it leaves the target invariant.
        return BirthResult(False, (), ())
    lam = gamma / M
    must_have = other_support == 0
    if lam == 0.0:
        return BirthResult(False, (), ())
    if must_have:
        k_new = _truncated_poisson_draw(lam, rng)
    else:
        k_new = int(rng.poisson(lam))
    proposed = [birth_prior.sample_near(y, rng, vel_base) for _ in range(k_new)]
    if force_accept:
        added = _apply_block(A, row, states, own, proposed)
        return BirthResult(True, tuple(own), tuple(added))

    k_old = len(own)
    if k_old == 0 and k_new == 0:
        return BirthResult(False, (), ())

    pos = states.positions
    s = meas_model.sigma_o_sq
    T = states.ddp_total()
    K_total = states.newborn_column_total()
    log_case3 = math.log(states.alpha / (states.alpha + T))
    log_col = ibp_column_log_factor(1, M) - math.log(states.harmonic_m)

    # target change: per-column birth factors, newborn count prior, likelihood
    target_delta = (k_new - k_old) * (log_case3 + log_col)
    proposal_delta = 0.0
    for vec in proposed:
        target_delta += birth_prior.logpdf(vec, vel_base)
        proposal_delta += birth_prior.proposal_logpdf(vec, y, vel_base)
    for l in own:
        # each existing newborn is priced under the velocity base it was
        # created with, in prior and reverse proposal alike — the base is
        # part of the column's identity, and quoting it on both sides
        # keeps the velocity factors cancelling exactly
        vec = states.state_vector(l)
        vb = states.vel_base(l)
        target_delta -= birth_prior.logpdf(vec, vb)
        proposal_delta -= birth_prior.proposal_logpdf(vec, y, vb)
    lam_count = gamma * states.harmonic_m
    target_delta += log_poisson(K_total - k_old + k_new, lam_count) - log_poisson(
        K_total, lam_count
    )

    keep = [l for l in row_set if l not in set(own)]
    new_pos = dict(pos)
    new_labels = list(keep)
    for i, vec in enumerate(proposed):
        key = -(i + 1)  # placeholder labels, only for this evaluation
        new_pos[key] = (vec[0], vec[1])
        new_labels.append(key)
    target_delta += row_loglik(new_labels, new_pos, y, s) - row_loglik(
        row_set, pos, y, s
    )

    # count-proposal pmf ratio (shared truncation normalizer cancels)
    log_accept = (
        target_delta
        - proposal_delta
        + log_poisson(k_old, lam)
        - log_poisson(k_new, lam)
    )
    if math.log(rng.random() + 1e-300) < log_accept:
        added = _apply_block(A, row, states, own, proposed)
        return BirthResult(True, tuple(own), tuple(added), target_delta)
    return BirthResult(False, (), ())


def _apply_block(A, row, states, removed, proposed):
    for l in removed:
        A.drop_column(l)
    added = []
    for vec in proposed:
        label = states.new_label()
        A.add_column(label)
        A.set_entry(row, label, True)
        added.append((label, vec))
    return added
