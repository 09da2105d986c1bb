"""Sequential collapsed Gibbs tracker for spawning measurements.

One chain filters forward in time.  At step k the configurations of all
earlier steps are frozen at their carried values (per-step filtering); the
sampler explores the joint conditional of

  * survival indicators s_l for every object carried from k-1,
  * the measurement-to-object allocation matrix A_k (IBP-distributed),
  * the number of newborn objects and their states,
  * all object states x_{l,k},
  * the concentrations alpha (cluster persistence/birth) and gamma (IBP).

How the two nonparametric priors fit together — the restaurant picture has
customers = measurements and dishes/clusters = objects.  The time-varying
cluster prior contributes its three predictive channels as follows: Case 1
(join an occupied cluster, in proportion to occupancy) is realized by the
exchangeable IBP column weights Beta(m, M-m+1) that the entry flips price
in; Case 2 (first member of a cluster that survived from k-1) is realized
by the survival move, which prices the 0 <-> nonempty transition of a
surviving column together with the survival prior P_s; Case 3 (open a
brand-new cluster, rate alpha) is an explicit alpha / (alpha + T) factor
on every newborn column, with T = S_prev + M_k the total occupancy the
restaurant presents at step k (S_prev = surviving members' counts from
k-1, each of the M_k measurements seats one customer).  T is constant
within a step, so entry flips keep their clean popularity conditional
while births and survival flips carry the alpha coupling.

The unnormalized per-step target (conditional on the carried past):

  log T = sum_{l in S} [s_l log P_s + (1-s_l) log(1-P_s)]
        + sum_{alive survivors} log N(x_l | A x_l^{k-1}, Sigma_s)
        + sum_{alive survivors} [ m_l>0 : log Beta(m_l, M-m_l+1)
                                  m_l=0 : -log M ]
        + sum_{newborn cols b} [ log p_birth(x_b) + log Beta(m_b, M-m_b+1)
                                 - log H_M + log(alpha/(alpha+T)) ]
        + log Poisson(K_new ; gamma H_M)
        + sum_rows log N(y_r | mean of assigned positions, sigma_o^2 I)
        + log Gamma(alpha; a_A, b_A) + log Gamma(gamma; a_G, b_G)

The m_l = 0 line is the coasting mass: a survivor may sit a step out with
an empty column (a missed detection) and be killed only by the survival
flip.  The beta-function column weights diverge as m -> 0, so the empty
pattern needs its own finite constant; 1/M makes the one-row detection of
a coasting survivor prior-neutral (Beta(1, M) * M = 1) — coasting is
priced against detection purely by the measurement likelihood.  There is
no separate detection probability: missed detections are exactly what
empty columns imply, nothing more.

Every move below is an exact Gibbs draw or an MH step with respect to this
density, and a test mode cross-checks each accepted move's increment
against a from-scratch evaluation.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from . import association
from .association import AllocationMatrix, row_loglik, ibp_column_log_factor
from .dynamics import (
    BirthModel,
    MeasurementModel,
    MotionModel,
    NiwParams,
    ObjectState,
    niw_posterior_from_stats,
    transition_logpdf,
)
from .priors import DdpCounts, harmonic_number, resample_alpha

__all__ = [
    "SamplerConfig",
    "Track",
    "TrackSet",
    "ChainState",
    "PosteriorSummary",
    "step",
    "run",
    "estimate",
    "state_conditional",
    "log_joint",
]

_LOG_2PI = math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)


def _default_niw() -> NiwParams:
    return NiwParams(
        mean=np.full(4, 0.001), scale=1e-3, dof=50.0, scatter=np.eye(4)
    )


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs of one tracking chain.

    The test hooks (survival_prior_only, births_enabled, resample_states,
    survival_enabled, track_log_joint) freeze parts of the sweep so unit
    tests can compare marginals against enumeration; production runs leave
    them at defaults.
    """

    burn_in: int = 100
    samples: int = 200
    alpha_prior: tuple[float, float] = (1.0, 0.1)
    gamma_prior: tuple[float, float] = (1.0, 1.0)
    niw: NiwParams = field(default_factory=_default_niw)
    motion: MotionModel = field(default_factory=MotionModel)
    meas: MeasurementModel = field(default_factory=MeasurementModel)
    region: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 1000.0), (0.0, 1000.0))
    init_alpha: float | None = None
    init_gamma: float | None = None
    resample_hyperparams: bool = True
    # --- test hooks ---
    survival_prior_only: bool = False   # survival flips ignore columns/likelihood
    births_enabled: bool = True
    resample_states: bool = True
    survival_enabled: bool = True
    track_log_joint: bool = False

    def __post_init__(self) -> None:
        if self.burn_in < 0 or self.samples < 1:
            raise ValueError("need burn_in >= 0 and samples >= 1")
        for name in ("alpha_prior", "gamma_prior"):
            a, b = getattr(self, name)
            if a <= 0 or b <= 0:
                raise ValueError(f"{name} must be positive")

    def birth_model(self) -> BirthModel:
        return BirthModel.from_niw(
            self.niw, self.region, proposal_pos_var=self.meas.sigma_o_sq
        )


class Track:
    """Mutable per-object record inside one chain."""

    __slots__ = (
        "label",
        "state",
        "prev_state",
        "survived",
        "alive",
        "alive_since",
        "m_prev",
        "was_shared",
        "vel_base",
        "solo_hist",
        "niw_n",
        "niw_sum",
        "niw_ssq",
    )

    def __init__(
        self, label, state, alive_since, survived, prev_state=None, m_prev=0,
        vel_base=None,
    ):
        self.label = label
        self.state = np.asarray(state, dtype=float).reshape(4)
        self.prev_state = (
            None if prev_state is None else np.asarray(prev_state, dtype=float).reshape(4)
        )
        self.survived = survived
        self.alive = True
        self.alive_since = alive_since
        self.m_prev = m_prev  # its column count at k-1 (DDP surviving occupancy)
        # True when the track shared a measurement with another track at
        # the last carry (merged-group membership); grants the wider
        # attach radius next step
        self.was_shared = False
        # newborn-only velocity base (mean, var) fixed at creation; None
        # means the global birth base.  Irrelevant once the track survives
        # a step boundary (the transition density takes over).
        self.vel_base = vel_base
        # recent (time, x, y) sole-custody measurements, for the velocity
        # re-anchor at carry (see step)
        self.solo_hist: list = []
        self.niw_n = 0
        self.niw_sum = np.zeros(4)
        self.niw_ssq = np.zeros((4, 4))

    def absorb_state(self) -> None:
        """Fold the carried state into the track's NIW sufficient stats."""
        self.niw_n += 1
        self.niw_sum += self.state
        self.niw_ssq += np.outer(self.state, self.state)


class TrackSet:
    """Live tracks of one chain; labels are never reused after death."""

    def __init__(self) -> None:
        self.tracks: dict[int, Track] = {}
        self.dead_labels: set[int] = set()
        self._next_label: int = 0

    def new_label(self) -> int:
        label = self._next_label
        self._next_label += 1
        return label

    def add(self, track: Track) -> None:
        if track.label in self.tracks or track.label in self.dead_labels:
            raise ValueError(f"label {track.label} already used")
        self.tracks[track.label] = track

    def remove(self, label: int) -> None:
        del self.tracks[label]
        self.dead_labels.add(label)

    def alive_labels(self) -> list[int]:
        return sorted(l for l, t in self.tracks.items() if t.alive)

    def ddp_counts(self, alpha: float, alloc: AllocationMatrix | None) -> DdpCounts:
        """Occupancy view over this step's clusters (sorted by label).

        survived[j] carries the k-1 column count of a surviving, alive
        cluster; current[j] its present column count.  A dead survivor
        shows (0, 0) — the dead-cluster case of the assignment prior.
        """
        labels = sorted(self.tracks)
        survived = []
        current = []
        for l in labels:
            t = self.tracks[l]
            survived.append(t.m_prev if (t.survived and t.alive) else 0)
            cur = 0
            if alloc is not None and l in alloc.col_counts:
                cur = alloc.col_counts[l]
            current.append(cur)
        return DdpCounts(survived=tuple(survived), current=tuple(current), alpha=alpha)


@dataclass
class PosteriorSummary:
    """Per-step posterior digest from the retained sweeps."""

    cardinality_mode: int
    cardinality_histogram: dict[int, int]
    state_means: dict[int, np.ndarray]
    label_counts: dict[int, int]
    sample_count: int


class ChainState:
    """One Gibbs chain: tracks, allocation, hyperparameters, clock."""

    def __init__(self, config: SamplerConfig) -> None:
        a_a, b_a = config.alpha_prior
        a_g, b_g = config.gamma_prior
        self.config = config
        self.tracks = TrackSet()
        self.alloc = AllocationMatrix(0)
        self.alpha = config.init_alpha if config.init_alpha is not None else a_a / b_a
        self.gamma = config.init_gamma if config.init_gamma is not None else a_g / b_g
        self.time = 0
        self.measurements: list[tuple[float, float]] = []
        self.measurements_prev: list[tuple[float, float]] = []
        # cumulative statistics feeding the hyperparameter conditionals
        self.cum_clusters = 0
        self.cum_items = 0
        self.cum_columns = 0
        self.cum_harmonic = 0.0
        # diagnostics (populated in track_log_joint mode)
        self.log_joint_max_err = 0.0

    @classmethod
    def initial(cls, config: SamplerConfig, initial_states=()) -> "ChainState":
        """A chain seeded with tracks already alive before the first step."""
        chain = cls(config)
        for vec in initial_states:
            label = chain.tracks.new_label()
            chain.tracks.add(
                Track(label, vec, alive_since=0, survived=True, prev_state=vec, m_prev=1)
            )
        return chain

    @property
    def niw(self) -> dict[int, NiwParams]:
        """Collapsed per-cluster NIW posteriors from carried states."""
        out = {}
        for l, t in self.tracks.tracks.items():
            if t.niw_n == 0:
                out[l] = self.config.niw
                continue
            xbar = t.niw_sum / t.niw_n
            scatter = t.niw_ssq - t.niw_n * np.outer(xbar, xbar)
            scatter = 0.5 * (scatter + scatter.T)
            out[l] = niw_posterior_from_stats(self.config.niw, t.niw_n, xbar, scatter)
        return out


class _StepContext:
    """Everything one step's sweeps touch; doubles as the `states` view the
    association move functions consume."""

    def __init__(self, chain: ChainState, measurements, rng) -> None:
        cfg = chain.config
        self.chain = chain
        self.config = cfg
        self.rng = rng
        self.tracks = chain.tracks.tracks
        self.alloc: AllocationMatrix = chain.alloc
        self.measurements = measurements  # list of (y0, y1) float tuples
        self.M = len(measurements)
        self.harmonic_m = harmonic_number(self.M)
        self.positions: dict[int, tuple[float, float]] = {}
        self.S_prev = 0  # sum of m_prev over alive survivors
        self.K_nb = 0    # number of newborn columns
        # precomputed kinematics
        self.A_mat = cfg.motion.transition_matrix()
        cov = cfg.motion.regularized_noise_cov()
        self.Sigma_chol = np.linalg.cholesky(cov)
        self.Sigma_inv = np.linalg.inv(cov)
        self.birth = cfg.birth_model()
        self.sigma_o_sq = cfg.meas.sigma_o_sq
        # per-row newborn velocity base (mean, var), None = global base;
        # filled in by _init_step from the previous scan's displacements
        self.vel_bases: list = [None] * self.M
        # per-row survivor labels whose deterministic prediction lies
        # inside the mint gate (filled by _init_step); a row with such an
        # anchor extends the wide attach radius to a survivor showing the
        # merge-onset signature — its own measurement vanished in a scan
        # that lost rows — while a row claimed only by a takeover newborn
        # does not (keeping displaced debris on the narrow radius)
        self.row_anchor: list[set] = [set() for _ in range(self.M)]
        # survivors with no measurement inside the mint gate of their own
        # prediction, in a scan that lost rows: the merge-onset signature
        # (filled by _init_step)
        self.lost_row: set = set()
        # True when this scan has fewer rows than the previous scan.  The
        # comparison is scan-to-scan, not scan-to-carried-columns: carried
        # columns can outnumber objects (a displaced column riding beside
        # its replacement), and counting them would declare a deficit in a
        # healthy scan and hand wide gates to exactly the columns that
        # should be dying.  Shared custody only counts as evidence of a
        # merged measurement under this deficit (filled by _init_step);
        # deficit_n is the number of rows lost
        self.merge_deficit: bool = False
        self.deficit_n: int = 0
        # Members of a merged group that observed a second row inside their
        # local neighborhood this scan: the group they belonged to has
        # separated, and shared-custody privileges (was_shared) end with it
        # at carry.  The test is local — a birth or death elsewhere in the
        # region changes the global row count without touching the group,
        # so the global count is not evidence of anything about this member
        # (filled during the attach pass).
        self.nbhd_split: set = set()
        # Frozen per-column reference points for the entry pass's thinned
        # scan: a survivor's deterministic prediction (init_pred, filled
        # by _init_step) or a newborn column's mint measurement (mint_xy,
        # recorded at column creation).  Both are constants for the whole
        # step, so thinning the scan by them is a state-independent
        # schedule choice — each sweep composes exact conditional updates
        # and the target is untouched.  Without the thinning, a column
        # whose state has drifted toward a neighboring measurement keeps
        # getting cross-attachment flips proposed at full rate, and two
        # drifted columns can lock into joint custody of both rows (their
        # mean explains both) — custody the frozen references say neither
        # column has any claim to.
        self.init_pred: dict[int, tuple[float, float]] = {}
        self.init_pred2: dict[int, tuple[float, float]] = {}
        self.mint_row: dict[int, int] = {}
        # A survivor's full-rate scan is further restricted to the row
        # NEAREST its frozen prediction (filled by _init_step).  When two
        # measurements sit inside one narrow gate, symmetric cross-custody
        # (every column on every row) starves both columns of individual
        # innovation feedback, their states then drift on the transition
        # prior alone, and drifted pairs fall into the joint-custody
        # attractor above.  Nearest-row custody keeps the feedback loop
        # closed; a genuinely merged measurement is still every member's
        # nearest row, so merged-group coupling is unaffected.
        self.nearest_row: dict[int, int] = {}
        ps = min(max(cfg.motion.survival_prob, 1e-300), 1.0 - 1e-12)
        self.log_ps = math.log(ps)
        self.log_1mps = math.log1p(-ps)
        # Log-mass of an alive survivor's empty column: one coasting scan is
        # priced as the object claiming a detection somewhere else in the
        # region, 2*pi*sigma_o^2 / |region| relative to an allocated object's
        # likelihood scale.  Small but nonzero (coasting stays possible);
        # with no scan at all the factor is vacuous and coasting is free.
        if self.M:
            self.empty_col_logmass = (
                math.log(2.0 * math.pi * self.sigma_o_sq) - self.birth.log_area
            )
        else:
            self.empty_col_logmass = 0.0
        # Two geometric radii with different jobs.
        #
        # Mint gate: a row with no carried prediction inside it seeds a
        # fresh takeover column at the measurement.  Kept moderate: wider
        # and a drifting prediction suppresses the takeover reset that
        # re-anchors position and velocity; narrower and healthy tracks
        # get replaced on every wobble.  It also bounds where a newborn's
        # position proposal concentrates, so it must stay below the
        # distance at which a stretched attachment starts funding a paired
        # phantom at the reflected point 2y - x (newborn prior cost ~20+
        # nats, break-even near 21 m at the default observation noise).
        self.gate_sq = 25.0 * self.sigma_o_sq
        # Attach gate: how far a carried prediction may sit from a
        # measurement and still start the step attached to it (initial
        # coverage), be rescued by the revive proposal, and have its
        # pattern priced as plausible by the kill move's reverse density.
        # Survivor custody cannot fund reflection phantoms — a survivor's
        # state is pinned near its prediction by the transition density,
        # not free to sit at a reflected point — so this radius is set by
        # a different trade: members of a merged (shared-measurement)
        # group dead-reckon with no individual position feedback, and the
        # group's single row must keep them attached for the group to
        # survive; the wider radius lets the survival economics (which
        # favor keeping an attached member by several nats) decide instead
        # of the geometry.
        self.attach_gate_sq = 60.0 * self.sigma_o_sq
        self.log_joint = None  # running value in track_log_joint mode

    def log_surv(self, m_prev: int) -> float:
        """log P(track survives) given its occupancy at k-1.

        Survival is per-member thinning of the previous column: the track
        persists iff at least one of its m_prev measurement attachments
        survives, so P = 1 - (1-P_s)^m_prev.  An empty column cannot seed a
        survivor (P = 0): this is column-based death, switched off by the
        survival_prior_only hook which reverts to a flat Bernoulli(P_s).
        """
        if self.config.survival_prior_only:
            return self.log_ps
        if m_prev <= 0:
            return -math.inf
        if m_prev == 1:
            return self.log_ps
        return math.log1p(-math.exp(m_prev * self.log_1mps))

    def log_dead(self, m_prev: int) -> float:
        """log P(track dies) under the same thinned-survival prior."""
        if self.config.survival_prior_only:
            return self.log_1mps
        if m_prev <= 0:
            return 0.0
        return m_prev * self.log_1mps

    # --- adapter protocol for association moves ---
    @property
    def alpha(self) -> float:
        return self.chain.alpha

    def survived(self, label: int) -> bool:
        return self.tracks[label].survived

    def state(self, label: int) -> ObjectState:
        return ObjectState.from_vector(self.tracks[label].state)

    def state_vector(self, label: int) -> np.ndarray:
        return self.tracks[label].state

    def vel_base(self, label: int):
        return self.tracks[label].vel_base

    def wide_grant(self, r: int, col: int) -> bool:
        """Whether column col earns the wide attach radius toward row r.

        Membership: the column was in a merged group at the last carry, or
        it lost its row in a row-losing scan and row r is anchored by
        someone else.  Reachability: the column's one- and two-step-ahead
        predictions both sit inside the wide gate — a column whose carried
        velocity is diving away from the row satisfies the first and fails
        the second, and admitting such a column buys one step of mean
        cancellation followed by a dead group.
        """
        track = self.tracks[col]
        if not (
            track.was_shared
            or (col in self.lost_row and bool(self.row_anchor[r] - {col}))
        ):
            return False
        y = self.measurements[r]
        x2, y2 = self.init_pred2[col]
        return (y[0] - x2) ** 2 + (y[1] - y2) ** 2 <= self.attach_gate_sq

    def entry_eligible(self, r: int, col: int) -> bool:
        """Whether (row r, column col) is in the entry pass's full-rate scan.

        Measured from the column's frozen reference point (survivor
        prediction or newborn mint row) with the same per-pair radius the
        attach and rescue moves use, so one geometry story governs all
        custody channels.  A column with no reference (should not occur)
        stays eligible everywhere.
        """
        y = self.measurements[r]
        xy = self.init_pred.get(col)
        if xy is not None:
            if self.nearest_row.get(col) != r:
                return False
            gate = self.attach_gate_sq if self.wide_grant(r, col) else self.gate_sq
        else:
            # a newborn column explains the measurement it was minted on;
            # custody of any other row is the cancellation attractor again
            # (most cheaply, a mint 10-15 m from a neighboring row joining
            # it and dragging the conditional off both)
            return self.mint_row.get(col, r) == r
        return (y[0] - xy[0]) ** 2 + (y[1] - xy[1]) ** 2 <= gate

    def ddp_total(self) -> float:
        return float(self.S_prev + self.M)

    def newborn_column_total(self) -> int:
        return self.K_nb

    def new_label(self) -> int:
        return self.chain.tracks.new_label()

    # --- bookkeeping helpers ---
    def rows_of(self, label: int) -> list[int]:
        return [r for r in range(self.M) if label in self.alloc.rows[r]]

    def row_ll(self, row_set, y) -> float:
        return row_loglik(row_set, self.positions, y, self.sigma_o_sq)


def log_joint(ctx: _StepContext) -> float:
    """From-scratch evaluation of the unnormalized per-step log target."""
    cfg = ctx.config
    A = ctx.alloc
    M = ctx.M
    total = 0.0
    T = ctx.S_prev + M
    for l in sorted(ctx.tracks):
        t = ctx.tracks[l]
        if t.survived:
            total += ctx.log_surv(t.m_prev) if t.alive else ctx.log_dead(t.m_prev)
            if t.alive:
                st = ObjectState.from_vector(t.state)
                pv = ObjectState.from_vector(t.prev_state)
                total += transition_logpdf(st, pv, cfg.motion)
                if not cfg.survival_prior_only:
                    m = A.col_counts.get(l, 0)
                    if m > 0:
                        total += ibp_column_log_factor(m, M)
                    else:
                        total += ctx.empty_col_logmass
        elif t.alive:  # newborn
            m = A.col_counts[l]
            total += ctx.birth.logpdf(t.state, t.vel_base)
            total += ibp_column_log_factor(m, M) - math.log(ctx.harmonic_m)
            total += math.log(ctx.chain.alpha / (ctx.chain.alpha + T))
    lam = ctx.chain.gamma * ctx.harmonic_m
    total += association.log_poisson(ctx.K_nb, lam)
    for r in range(M):
        if A.rows[r]:
            total += ctx.row_ll(A.rows[r], ctx.measurements[r])
    a_a, b_a = cfg.alpha_prior
    a_g, b_g = cfg.gamma_prior
    al, ga = ctx.chain.alpha, ctx.chain.gamma
    total += (a_a - 1.0) * math.log(al) - b_a * al + a_a * math.log(b_a) - math.lgamma(a_a)
    total += (a_g - 1.0) * math.log(ga) - b_g * ga + a_g * math.log(b_g) - math.lgamma(a_g)
    return total


def _bump(ctx: _StepContext, delta: float) -> None:
    if ctx.log_joint is not None:
        ctx.log_joint += delta


# Join-proposal levels for the kill/revive toggle: rows whose measurement
# falls inside the track's attach radius are offered at _RESCUE_Q,
# everything else at a small floor that keeps the proposal's support full.
# Shaping the proposal this way leaves the target untouched but steers the
# flow: re-coupling a co-located object (a merged-pair member knocked out
# by a kill) is proposed almost every sweep, while resurrecting displaced
# debris into a straddling phantom pair is starved below once-per-run
# frequency.  The radius is per-track: merged-group members (shared
# custody at the last carry) get the wide attach gate, because their
# dead-reckoned predictions drift without individual feedback; solo tracks
# get the mint gate, because within-reach rescue of a solo track's debris
# into an owned row is exactly the pair-inflation channel (pairing profit
# stays positive out to ~19 m at default noise, so geometry, not the
# target, has to starve it).
_RESCUE_Q = 0.9
_JOIN_FLOOR = 1e-6


def _join_q(ctx: "_StepContext", track: Track, px: float, py: float, r: int) -> float:
    y = ctx.measurements[r]
    d = (y[0] - px) ** 2 + (y[1] - py) ** 2
    gate = ctx.attach_gate_sq if ctx.wide_grant(r, track.label) else ctx.gate_sq
    return _RESCUE_Q if d <= gate else _JOIN_FLOOR


def _survival_move(ctx: _StepContext, track: Track) -> None:
    """Joint kill/revive MH move for one carried object.

    Kill drops the object's column together with its entries; revive draws
    a state from the transition prior and an entry pattern from a
    product-Bernoulli proposal gated on geometry (_join_q).  The transition
    density of the proposed state cancels against the proposal, leaving
    survival, column-weight (the coasting mass when the pattern is empty),
    likelihood, the pattern-proposal correction, and the alpha-coupling
    through the newborn case-weight factors (killing a survivor shrinks
    the occupancy total T that newborns see).
    """
    A = ctx.alloc
    M = ctx.M
    label = track.label
    rng = ctx.rng
    prior_only = ctx.config.survival_prior_only
    alpha = ctx.chain.alpha

    if track.alive:
        zs = ctx.rows_of(label)
        if prior_only and zs:
            return  # pure-prior mode never touches the allocation
        if zs:
            # Attached columns are not kill candidates.  A sole owner's
            # death would orphan its measurement outright.  A shared row
            # constrains only the mean of its owners, so which member died
            # is invisible to the data; the exact conditional still holds a
            # small per-step death mass there, and carrying a single sample
            # per scan converts that mass into an absorbing execution rate
            # that compounds over a long merged stretch until a real object
            # is gone.  Membership edits on shared rows belong to the entry
            # pass (which prices them by the row likelihood); this move
            # prices existence for unattached columns only.  Revival may
            # still propose joining an occupied row — that asymmetry is the
            # undo channel for a member executed just before its row merged.
            return
        m = len(zs)
        delta = ctx.log_dead(track.m_prev) - ctx.log_surv(track.m_prev)
        log_qz = 0.0
        if not prior_only:
            if m > 0:
                delta -= ibp_column_log_factor(m, M)
            else:
                delta -= ctx.empty_col_logmass
            # gate the pattern proposal on the deterministic prediction, not
            # the sampled state: a jitter-free reference keeps a hovering
            # just-outside-the-gate object from tunneling into rescue range
            pred = ctx.A_mat @ track.prev_state
            for r in range(M):
                q = _join_q(ctx, track, pred[0], pred[1], r)
                if r in zs:
                    y = ctx.measurements[r]
                    base = A.rows[r] - {label}
                    delta -= ctx.row_ll(base | {label}, y) - ctx.row_ll(base, y)
                    log_qz += math.log(q)
                else:
                    log_qz += math.log1p(-q)
            if ctx.K_nb:
                T = ctx.S_prev + M
                delta += ctx.K_nb * (
                    math.log(alpha + T) - math.log(alpha + T - track.m_prev)
                )
        if math.log(rng.random() + 1e-300) < delta + log_qz:
            book = None
            if ctx.log_joint is not None:
                st = ObjectState.from_vector(track.state)
                pv = ObjectState.from_vector(track.prev_state)
                book = delta - transition_logpdf(st, pv, ctx.config.motion)
            for r in zs:
                A.set_entry(r, label, False)
            A.drop_column(label)
            track.alive = False
            del ctx.positions[label]
            ctx.S_prev -= track.m_prev
            if book is not None:
                _bump(ctx, book)
    else:
        if track.m_prev <= 0 and not prior_only:
            return  # column-based death: an empty column cannot seed a survivor
        pred = ctx.A_mat @ track.prev_state
        vec = pred + ctx.Sigma_chol @ rng.standard_normal(4)
        ctx.positions[label] = (vec[0], vec[1])
        zs = []
        delta = ctx.log_surv(track.m_prev) - ctx.log_dead(track.m_prev)
        log_qz = 0.0
        if not prior_only:
            lls = []
            for r in range(M):
                q = _join_q(ctx, track, pred[0], pred[1], r)
                if rng.random() < q:
                    y = ctx.measurements[r]
                    base = A.rows[r]
                    zs.append(r)
                    log_qz += math.log(q)
                    lls.append(ctx.row_ll(base | {label}, y) - ctx.row_ll(base, y))
                else:
                    log_qz += math.log1p(-q)
            m = len(zs)
            if m > 0:
                delta += ibp_column_log_factor(m, M) + sum(lls)
            else:
                delta += ctx.empty_col_logmass
            if ctx.K_nb:
                T = ctx.S_prev + M
                delta += ctx.K_nb * (
                    math.log(alpha + T) - math.log(alpha + T + track.m_prev)
                )
        if math.log(rng.random() + 1e-300) < delta - log_qz:
            A.add_column(label)
            for r in zs:
                A.set_entry(r, label, True)
            track.alive = True
            track.state = vec
            ctx.S_prev += track.m_prev
            if ctx.log_joint is not None:
                st = ObjectState.from_vector(vec)
                pv = ObjectState.from_vector(track.prev_state)
                _bump(ctx, delta + transition_logpdf(st, pv, ctx.config.motion))
        else:
            del ctx.positions[label]


# Sweep-inclusion probability for entry flips outside the column's frozen
# eligibility radius (see _StepContext.entry_eligible).  Far pairs still get
# exact conditional updates, just rarely: support and invariance are intact,
# only the mixing rate for geometrically baseless custody is turned down.
# Sized so a whole step's sweeps expect well under one far attempt per
# pair — two drifted columns canceling each other's error can make far
# custody worth several nats, and at any appreciable rate the sweeps find
# that attractor and stick (a close-range approach gives it several
# scans' worth of chances).  Every geometrically legitimate far channel
# (merged-group membership, deficit rescue) runs at full rate through
# wide_grant, so this floor only guards formal support.
_FAR_SCAN_P = 1e-4


def _entry_pass(ctx: _StepContext) -> None:
    A = ctx.alloc
    cfg = ctx.config
    for r in range(ctx.M):
        y = ctx.measurements[r]
        for col in sorted(A.col_counts):
            if not ctx.entry_eligible(r, col) and ctx.rng.random() >= _FAR_SCAN_P:
                continue
            lo = association.gibbs_entry_logodds(A, r, col, y, ctx, cfg.meas)
            if lo is None:
                continue
            if lo > 30:
                want = True
            elif lo < -30:
                want = False
            else:
                want = ctx.rng.random() < 1.0 / (1.0 + math.exp(-lo))
            have = col in A.rows[r]
            if want != have:
                A.set_entry(r, col, want)
                _bump(ctx, lo if want else -lo)


def _birth_pass(ctx: _StepContext) -> None:
    for r in range(ctx.M):
        res = association.propose_new_columns(
            ctx.alloc,
            r,
            ctx.measurements[r],
            ctx,
            ctx.birth,
            ctx.chain.gamma,
            ctx.config.meas,
            ctx.rng,
            vel_base=ctx.vel_bases[r],
        )
        if res.accepted:
            _sync_birth(ctx, res, r, ctx.vel_bases[r])
            _bump(ctx, res.log_delta)


def _sync_birth(ctx: _StepContext, res, row: int, vel_base=None) -> None:
    for l in res.removed:
        ctx.chain.tracks.remove(l)
        del ctx.positions[l]
        ctx.K_nb -= 1
    for label, vec in res.added:
        t = Track(
            label, vec, alive_since=ctx.chain.time, survived=False,
            vel_base=vel_base,
        )
        ctx.chain.tracks.add(t)
        ctx.positions[label] = (vec[0], vec[1])
        ctx.mint_row[label] = row
        ctx.K_nb += 1


def _conditional_params(ctx: _StepContext, track: Track):
    """Precision and shift of one state's exact Gaussian conditional.

    For a newborn the position prior is flat inside the region, so the
    position rows carry likelihood information only and the Gaussian is
    the untruncated factor of the (region-truncated) conditional.
    """
    if track.survived:
        mean0 = ctx.A_mat @ track.prev_state
        Lam = ctx.Sigma_inv.copy()
        b = ctx.Sigma_inv @ mean0
    else:
        if track.vel_base is not None:
            vm, vv = track.vel_base
        else:
            vm, vv = ctx.birth.vel_mean, ctx.birth.vel_var
        Lam = np.zeros((4, 4))
        Lam[2, 2] = 1.0 / vv[0]
        Lam[3, 3] = 1.0 / vv[1]
        b = np.zeros(4)
        b[2] = vm[0] / vv[0]
        b[3] = vm[1] / vv[1]
    label = track.label
    s = ctx.sigma_o_sq
    for r in range(ctx.M):
        row = ctx.alloc.rows[r]
        if label not in row:
            continue
        n = len(row)
        y = ctx.measurements[r]
        sx = sy = 0.0
        for l in row:
            if l != label:
                px, py = ctx.positions[l]
                sx += px
                sy += py
        coef = 1.0 / (n * n * s)
        Lam[0, 0] += coef
        Lam[1, 1] += coef
        b[0] += (y[0] - sx / n) / (n * s)
        b[1] += (y[1] - sy / n) / (n * s)
    return Lam, b


def _truncated_normal(mu, sigma, lo, hi, rng) -> float:
    """Inverse-cdf draw from N(mu, sigma^2) restricted to [lo, hi]."""
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    fa = 0.5 * (1.0 + math.erf(a / _SQRT2))
    fb = 0.5 * (1.0 + math.erf(b / _SQRT2))
    if fb - fa < 1e-14:
        # interval buried in a far tail; the mass sits at the near bound
        return lo if mu < lo else hi
    u = fa + (fb - fa) * rng.random()
    u = min(max(u, 1e-15), 1.0 - 1e-15)
    return mu + sigma * float(ndtri(u))


def _state_pass(ctx: _StepContext) -> None:
    for label in sorted(ctx.tracks):
        track = ctx.tracks[label]
        if not track.alive:
            continue
        old_book = None
        if ctx.log_joint is not None:
            old_book = _state_terms(ctx, track)
        Lam, b = _conditional_params(ctx, track)
        if track.survived:
            L = np.linalg.cholesky(Lam)
            mean = np.linalg.solve(Lam, b)
            z = ctx.rng.standard_normal(4)
            vec = mean + np.linalg.solve(L.T, z)
        else:
            # diagonal conditional: positions truncated to the region,
            # velocities straight from their Gaussian factor
            vec = np.empty(4)
            for i in (0, 1):
                mu = b[i] / Lam[i, i]
                sd = 1.0 / math.sqrt(Lam[i, i])
                vec[i] = _truncated_normal(
                    mu, sd, ctx.birth.low[i], ctx.birth.high[i], ctx.rng
                )
            for i in (2, 3):
                vec[i] = b[i] / Lam[i, i] + ctx.rng.standard_normal() / math.sqrt(
                    Lam[i, i]
                )
        track.state = vec
        ctx.positions[label] = (vec[0], vec[1])
        if old_book is not None:
            _bump(ctx, _state_terms(ctx, track) - old_book)


def _state_terms(ctx: _StepContext, track: Track) -> float:
    """The log-target terms that depend on one track's state."""
    if track.survived:
        st = ObjectState.from_vector(track.state)
        pv = ObjectState.from_vector(track.prev_state)
        total = transition_logpdf(st, pv, ctx.config.motion)
    else:
        total = ctx.birth.logpdf(track.state, track.vel_base)
    for r in ctx.rows_of(track.label):
        total += ctx.row_ll(ctx.alloc.rows[r], ctx.measurements[r])
    return total


def _hyper_pass(ctx: _StepContext) -> None:
    chain = ctx.chain
    cfg = ctx.config
    a_a, b_a = cfg.alpha_prior
    a_g, b_g = cfg.gamma_prior
    n_clusters = chain.cum_clusters + ctx.K_nb
    # items = surviving occupancy + current allocation entries, cumulatively;
    # entries (not M) so clusters never outnumber items even when one row
    # owns several newborn singletons
    entries = sum(ctx.alloc.col_counts.values())
    n_items = chain.cum_items + ctx.S_prev + entries
    old_alpha = chain.alpha
    new_alpha = resample_alpha(n_clusters, n_items, old_alpha, a_a, b_a, ctx.rng)
    if ctx.log_joint is not None:
        T = ctx.S_prev + ctx.M
        d = (a_a - 1.0) * (math.log(new_alpha) - math.log(old_alpha))
        d -= b_a * (new_alpha - old_alpha)
        d += ctx.K_nb * (
            math.log(new_alpha / (new_alpha + T)) - math.log(old_alpha / (old_alpha + T))
        )
        _bump(ctx, d)
    chain.alpha = new_alpha

    old_gamma = chain.gamma
    shape = a_g + chain.cum_columns + ctx.K_nb
    rate = b_g + chain.cum_harmonic + ctx.harmonic_m
    new_gamma = max(float(ctx.rng.gamma(shape, 1.0 / rate)), 1e-12)
    if ctx.log_joint is not None:
        lam_old = old_gamma * ctx.harmonic_m
        lam_new = new_gamma * ctx.harmonic_m
        d = (a_g - 1.0) * (math.log(new_gamma) - math.log(old_gamma))
        d -= b_g * (new_gamma - old_gamma)
        d += association.log_poisson(ctx.K_nb, lam_new) - association.log_poisson(
            ctx.K_nb, lam_old
        )
        _bump(ctx, d)
    chain.gamma = new_gamma


def _sweep(ctx: _StepContext) -> None:
    cfg = ctx.config
    if cfg.survival_enabled:
        for label in sorted(ctx.tracks):
            t = ctx.tracks[label]
            if t.survived:
                _survival_move(ctx, t)
    _entry_pass(ctx)
    if cfg.births_enabled and ctx.chain.gamma > 0:
        _birth_pass(ctx)
    if cfg.resample_states:
        _state_pass(ctx)
    if cfg.resample_hyperparams:
        _hyper_pass(ctx)
    if ctx.log_joint is not None:
        fresh = log_joint(ctx)
        err = abs(fresh - ctx.log_joint)
        if err > ctx.chain.log_joint_max_err:
            ctx.chain.log_joint_max_err = err
        ctx.log_joint = fresh


def _init_step(chain: ChainState, measurements, rng) -> _StepContext:
    cfg = chain.config
    meas = [(float(y[0]), float(y[1])) for y in measurements]
    prev_meas = list(chain.measurements)  # last scan, for velocity seeding
    survivors = []
    for l in sorted(chain.tracks.tracks):
        t = chain.tracks.tracks[l]
        # everything carried into this step is a survivor candidate
        t.prev_state = t.state.copy()
        t.survived = True
        t.alive = True
        survivors.append(l)
    chain.alloc = AllocationMatrix(len(meas), labels=survivors)
    ctx = _StepContext(chain, meas, rng)
    for l in survivors:
        t = chain.tracks.tracks[l]
        t.state = ctx.A_mat @ t.prev_state  # deterministic init; resampled in sweeps
        ctx.positions[l] = (t.state[0], t.state[1])
        ctx.init_pred[l] = ctx.positions[l]
        two = ctx.A_mat @ t.state
        ctx.init_pred2[l] = (two[0], two[1])
        ctx.S_prev += t.m_prev
    # Gated initial coverage: every carried prediction inside a row's attach
    # gate starts attached to that row.  Attaching all of them (not just the
    # nearest) matters when measurements merge — several carried objects then
    # share one gate, and each must start coupled to the shared row, because
    # the survival toggle would otherwise retire the uncovered ones before
    # the entry pass could couple them.  Rows with no survivor inside the
    # narrower mint gate also seed a takeover newborn at the measurement —
    # possibly alongside a loosely attached survivor, leaving the sweeps to
    # keep whichever explanation the target prefers; a row not covered at
    # all gets a clean takeover and column-based death retires the stranded
    # survivor at the step boundary.
    # Per-row newborn velocity base: a measurement whose nearest last-scan
    # measurement sits within plausible one-step reach is treated as the
    # continuation of that fix, and newborns minted for the row carry the
    # conjugate velocity posterior of the differenced displacement instead
    # of the zero-centered global base (see BirthModel.vel_posterior).  A
    # newborn's velocity couples to no data within its birth step — the
    # state pass redraws it from this base every sweep — so the base is
    # the only channel through which a replacement column can inherit the
    # motion of the object it takes over from; without it a takeover of a
    # moving object always restarts near zero velocity and immediately
    # falls out of every gate.  When the scan before last also holds a
    # consistent fix (near the constant-velocity backcast 2*p1 - y), the
    # two-step difference is used instead: halving the differencing noise
    # matters because seed noise is carried as a position drift of several
    # meters per step until the next reset.  The reach bound (twice the
    # attach gate) covers fast-but-plausible displacements while keeping
    # far-away clutter from planting wild velocity bases; a row beyond
    # reach keeps base None, i.e. the global zero-centered prior, which is
    # the old behavior.  Bases enter prior and proposal identically, so
    # all acceptance ratios are untouched (velocity factors cancel).
    # Differencing trusts its parent match, so it is restricted to scans
    # where the match is unambiguous: with another last-scan measurement
    # inside the nearest one's mint gate, the difference is as likely to
    # span two objects as one, and a cross-object seed (several m/s of
    # pure geometry) is far worse than dead-reckoning in place.  Crowded
    # rows get a zero-mean base with a tight variance rather than the
    # global prior: a mint in a crowd must sit still until the crowd
    # resolves, and the global prior's tails (a several-m/s draw that
    # couples to no data inside the birth step) walk it out of every gate
    # within two steps.
    dt = cfg.motion.dt
    prev2_meas = chain.measurements_prev
    crowd_base = (np.zeros(2), np.full(2, 4.0))
    parent: list = [None] * len(meas)
    if prev_meas:
        for r, y in enumerate(meas):
            parent[r] = min(
                prev_meas, key=lambda q: (y[0] - q[0]) ** 2 + (y[1] - q[1]) ** 2
            )
    for r, y in enumerate(meas):
        if not prev_meas:
            continue
        p1 = parent[r]
        crowded = any(
            q is not p1
            and (p1[0] - q[0]) ** 2 + (p1[1] - q[1]) ** 2 <= ctx.gate_sq
            for q in prev_meas
        )
        if crowded:
            ctx.vel_bases[r] = crowd_base
            continue
        if any(i != r and parent[i] is p1 for i in range(len(meas))):
            # Several rows difference against one last-scan measurement: a
            # merged measurement splitting back into members.  The raw
            # difference folds the separation jump into the seed (several
            # m/s of geometry), so seed from the parent's own last
            # displacement — the group's common motion — instead.
            if prev2_meas:
                p2 = min(
                    prev2_meas,
                    key=lambda q: (p1[0] - q[0]) ** 2 + (p1[1] - q[1]) ** 2,
                )
                ddx, ddy = p1[0] - p2[0], p1[1] - p2[1]
                if ddx * ddx + ddy * ddy <= 2.0 * ctx.gate_sq:
                    ctx.vel_bases[r] = ctx.birth.vel_posterior(
                        ddx, ddy, dt, ctx.sigma_o_sq
                    )
                    continue
            ctx.vel_bases[r] = crowd_base
            continue
        dx, dy = y[0] - p1[0], y[1] - p1[1]
        if dx * dx + dy * dy <= 2.0 * ctx.gate_sq:
            base = ctx.birth.vel_posterior(dx, dy, dt, ctx.sigma_o_sq)
            if prev2_meas:
                bx, by = 2.0 * p1[0] - y[0], 2.0 * p1[1] - y[1]
                p2 = min(
                    prev2_meas,
                    key=lambda q: (bx - q[0]) ** 2 + (by - q[1]) ** 2,
                )
                crowded2 = any(
                    q is not p2
                    and (p2[0] - q[0]) ** 2 + (p2[1] - q[1]) ** 2
                    <= ctx.gate_sq
                    for q in prev2_meas
                )
                if (
                    not crowded2
                    and (bx - p2[0]) ** 2 + (by - p2[1]) ** 2
                    <= 2.0 * ctx.gate_sq
                ):
                    base = ctx.birth.vel_posterior(
                        y[0] - p2[0], y[1] - p2[1], 2.0 * dt, ctx.sigma_o_sq
                    )
            ctx.vel_bases[r] = base
    for r, y in enumerate(meas):
        for l in survivors:
            px, py = ctx.positions[l]
            if (y[0] - px) ** 2 + (y[1] - py) ** 2 <= ctx.gate_sq:
                ctx.row_anchor[r].add(l)
    if prev_meas and len(meas) < len(prev_meas):
        ctx.merge_deficit = True
        ctx.deficit_n = len(prev_meas) - len(meas)
        anchored = set().union(*ctx.row_anchor) if ctx.row_anchor else set()
        lost = set(survivors) - anchored
        # The scan lost exactly len(prev_meas) - len(meas) rows, so at most
        # that many unanchored predictions can be members whose measurement
        # merged away; wide admission is rationed to the nearest ones, and
        # every drifted column beyond the ration keeps the narrow radius —
        # an uncapped grant lets loitering debris ride a merged row through
        # its whole window as a phantom member.
        slots = ctx.deficit_n
        if len(lost) > slots:
            anchored_rows = [
                r for r in range(len(meas)) if ctx.row_anchor[r]
            ]
            def _dist_to_anchored(l):
                px, py = ctx.positions[l]
                return min(
                    (
                        (meas[r][0] - px) ** 2 + (meas[r][1] - py) ** 2
                        for r in anchored_rows
                    ),
                    default=math.inf,
                )
            lost = set(sorted(lost, key=_dist_to_anchored)[:slots])
        ctx.lost_row = lost
    # Initial custody is an assignment, not a broadcast: predictions and
    # rows pair up greedily by distance, each used once — attaching every
    # prediction to every measurement in reach would seed symmetric
    # cross-custody whenever two rows share a gate, opening the step
    # inside the joint-custody attractor the entry scan restriction
    # exists to avoid, while plain nearest-row attach lets a drifted
    # prediction steal its neighbor's row and orphan the rightful owner.
    # A second round lets a survivor whose candidates were all claimed
    # take an unclaimed row within the wide gate (unless its carried
    # velocity is diving away): columns swapping objects is invisible to
    # cardinality and position metrics, an orphaned column dying on the
    # eve of a merge is not.  Merged-group members are exempt from
    # uniqueness — sharing a row is their defining property — and attach
    # to their nearest row by the wide grant.  A row left with no owner
    # seeds a takeover newborn at the measurement.
    if meas:
        pairs = []
        for l in survivors:
            px, py = ctx.positions[l]
            ctx.nearest_row[l] = min(
                range(len(meas)),
                key=lambda r: (meas[r][0] - px) ** 2 + (meas[r][1] - py) ** 2,
            )
            for r, y in enumerate(meas):
                d = (y[0] - px) ** 2 + (y[1] - py) ** 2
                if d <= ctx.attach_gate_sq:
                    pairs.append((d, l, r))
        pairs.sort()
        assigned: dict[int, int] = {}
        claimed: set[int] = set()
        # round 1 runs over the full attach radius: a track whose velocity
        # is still converging (fresh mint, post-split member) lags its row
        # by more than the narrow gate for a few scans, and executing it
        # there just mints a replacement with the same noisy velocity —
        # the churn repeats instead of converging.  Greedy unique pairing
        # keeps the wider radius honest: a drifted column gets a row only
        # when nothing closer claims it, and the velocity re-anchor at
        # carry then pulls it back onto the measurement sequence.
        for d, l, r in pairs:
            if l in assigned or r in claimed:
                continue
            assigned[l] = r
            claimed.add(r)
        for d, l, r in pairs:
            if l in assigned or r in claimed:
                continue
            if ctx.nearest_row[l] not in claimed:
                # not a theft victim: its own row is free, so a failed
                # round 1 means it drifted out of the mint gate — let it
                # die and hand the row to a fresh takeover newborn
                # rather than ride at long range with a stale velocity
                continue
            x2, y2 = ctx.init_pred2[l]
            yr = meas[r]
            if (yr[0] - x2) ** 2 + (yr[1] - y2) ** 2 <= ctx.attach_gate_sq:
                assigned[l] = r
                claimed.add(r)
        for l, r in assigned.items():
            chain.alloc.set_entry(r, l, True)
            ctx.nearest_row[l] = r
        for l in survivors:
            if l in assigned:
                continue
            r = ctx.nearest_row[l]
            y = meas[r]
            px, py = ctx.positions[l]
            d = (y[0] - px) ** 2 + (y[1] - py) ** 2
            gateless = False
            if ctx.tracks[l].was_shared:
                near = sum(
                    1
                    for q in meas
                    if (q[0] - px) ** 2 + (q[1] - py) ** 2
                    <= 4.0 * ctx.attach_gate_sq
                )
                if near >= 2:
                    # a second row inside the neighborhood means the merged
                    # group has separated: membership privileges end, and
                    # the ordinary assignment machinery (which is what
                    # pulls the two ex-members onto distinct rows) takes
                    # over from here
                    ctx.nbhd_split.add(l)
                else:
                    gateless = near == 1
            if gateless:
                # merged-group custody is preserved without a gate: inside
                # a merged stretch the shared row only observes the group
                # mean, so a member's own prediction performs a nearly
                # free random walk and will eventually leave any fixed
                # radius — dropping it then would execute an object the
                # posterior still insists is alive (detaching costs the
                # death factor plus the empty-column mass, far more than
                # a mediocre mean fit).  The flag clears on solo custody
                # or on a neighborhood split, so free-flight tracks never
                # take this branch.
                chain.alloc.set_entry(r, l, True)
            elif ctx.wide_grant(r, l) and d <= ctx.attach_gate_sq:
                chain.alloc.set_entry(r, l, True)
    for r, y in enumerate(meas):
        if not chain.alloc.rows[r]:
            vec = ctx.birth.sample_near(y, rng, ctx.vel_bases[r])
            # a measurement just outside the region must still seed an
            # in-support newborn
            vec[0] = min(max(vec[0], ctx.birth.low[0]), ctx.birth.high[0])
            vec[1] = min(max(vec[1], ctx.birth.low[1]), ctx.birth.high[1])
            label = chain.tracks.new_label()
            chain.tracks.add(
                Track(
                    label, vec, alive_since=chain.time, survived=False,
                    vel_base=ctx.vel_bases[r],
                )
            )
            chain.alloc.add_column(label)
            chain.alloc.set_entry(r, label, True)
            ctx.positions[label] = (vec[0], vec[1])
            ctx.mint_row[label] = r
            ctx.K_nb += 1
    return ctx


def step(chain: ChainState, measurements, config=None, rng=None):
    """Advance the chain one time step; returns (chain, PosteriorSummary).

    Runs burn_in + samples sweeps of the schedule (survival flips, entry
    Gibbs pass, newborn block moves, exact state conditionals, hyper
    updates); the retained sweeps form the per-step sample set and the
    chain carries the final sweep's configuration forward.
    """
    if config is not None and config is not chain.config:
        chain.config = config
    cfg = chain.config
    if rng is None:
        raise ValueError("step requires an explicit rng")
    ctx = _init_step(chain, measurements, rng)
    chain.measurements_prev = chain.measurements
    chain.measurements = ctx.measurements
    if cfg.track_log_joint:
        ctx.log_joint = log_joint(ctx)

    card_hist: Counter = Counter()
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    total = cfg.burn_in + cfg.samples
    for it in range(total):
        _sweep(ctx)
        if it >= cfg.burn_in:
            alive = chain.tracks.alive_labels()
            card_hist[len(alive)] += 1
            for l in alive:
                st = chain.tracks.tracks[l].state
                if l in sums:
                    sums[l] += st
                    counts[l] += 1
                else:
                    sums[l] = st.copy()
                    counts[l] = 1

    mode = _histogram_mode(card_hist)
    summary = PosteriorSummary(
        cardinality_mode=mode,
        cardinality_histogram=dict(card_hist),
        state_means={l: sums[l] / counts[l] for l in sums},
        label_counts=dict(counts),
        sample_count=cfg.samples,
    )

    # carry: prune the dead, absorb survivor states, advance bookkeeping.
    # Column-based death happens here: a track whose column ends the step
    # empty has survival probability (1-(1-P_s)^0) = 0 into step k+1, so the
    # boundary survival draw is deterministic and the label retires.  An
    # empty scan (M=0) provides no thinning event at all: occupancies carry
    # through unchanged and tracks coast on the survival prior alone.
    # Merged-group membership drives the next step's geometry: members
    # dead-reckon without individual position feedback and earn the wider
    # attach radius.  Solo custody of a row is direct feedback and clears
    # the flag; shared custody in a scan that just lost rows sets it —
    # but only for the closest deficit+1 owners of the shared row, since
    # a merge of n rows into one hides exactly n objects and any further
    # owner is a drifted column that would otherwise ride the row through
    # its whole window as a sticky phantom member.  Shared custody
    # otherwise (mid-window scans keep the reduced row count, and a
    # healthy close pass can share transiently) leaves the flag as it
    # was, so membership is sticky through the window.
    granted: set = set()
    if ctx.merge_deficit:
        for r in range(ctx.M):
            owners = chain.alloc.rows[r]
            if len(owners) < 2:
                continue
            y = ctx.measurements[r]
            def _ref_d(l):
                xy = ctx.init_pred.get(l)
                if xy is None:
                    return 0.0 if ctx.mint_row.get(l) == r else math.inf
                return (y[0] - xy[0]) ** 2 + (y[1] - xy[1]) ** 2
            granted.update(
                sorted(owners, key=_ref_d)[: ctx.deficit_n + 1]
            )
    for l in sorted(chain.tracks.tracks):
        t = chain.tracks.tracks[l]
        if not t.alive:
            chain.tracks.remove(l)
            continue
        if ctx.M > 0:
            m_final = chain.alloc.col_counts.get(l, 0)
            if m_final == 0 and not cfg.survival_prior_only:
                chain.tracks.remove(l)
                if l in chain.alloc.col_counts:
                    chain.alloc.drop_column(l)
                continue
            t.m_prev = m_final
            rows_l = ctx.rows_of(l)
            if any(len(chain.alloc.rows[r]) == 1 for r in rows_l):
                t.was_shared = False
            elif l in ctx.nbhd_split:
                # a second row appeared inside this member's neighborhood:
                # the merged group it belonged to has separated, so
                # membership privileges end now — a drifted pair left
                # gateless after the split glues itself to one of the
                # separated rows, suppresses the takeover mint, and rides
                # as a phantom cluster
                t.was_shared = False
            elif ctx.merge_deficit and rows_l:
                t.was_shared = l in granted
        t.absorb_state()
    chain.cum_clusters += ctx.K_nb
    chain.cum_items += ctx.S_prev + sum(chain.alloc.col_counts.values())
    chain.cum_columns += ctx.K_nb
    chain.cum_harmonic += ctx.harmonic_m
    chain.time += 1
    return chain, summary


def _histogram_mode(hist: Counter) -> int:
    # ties break toward the smaller cardinality (no phantom objects)
    best_n = None
    best_c = -1
    for n in sorted(hist):
        if hist[n] > best_c:
            best_n, best_c = n, hist[n]
    return 0 if best_n is None else best_n


def run(measurement_sets, config: SamplerConfig, rng) -> list[PosteriorSummary]:
    """Fold `step` over a whole scenario; one summary per time step."""
    chain = ChainState(config)
    out = []
    for Y in measurement_sets:
        _, summary = step(chain, Y, rng=rng)
        out.append(summary)
    return out


def estimate(summaries) -> list[tuple[int, list[tuple[int, np.ndarray]]]]:
    """Point estimates per step: (N_hat, [(label, mean state), ...]).

    N_hat is the cardinality-histogram mode (ties toward smaller N); the
    reported states are the posterior means of the N_hat most-populated
    labels, ties broken by label age.
    """
    out = []
    for s in summaries:
        if s.sample_count < 1:
            raise ValueError("summary without samples")
        n_hat = s.cardinality_mode
        ranked = sorted(s.label_counts, key=lambda l: (-s.label_counts[l], l))
        chosen = ranked[:n_hat]
        out.append((n_hat, [(l, s.state_means[l]) for l in chosen]))
    return out


def state_conditional(label, chain: ChainState, measurements=None, config=None):
    """Exact Gaussian conditional of one object's state given the rest.

    precision = transition (or birth) precision
                + sum over its rows of (B/n_r)^T (sigma_o^2 I)^{-1} (B/n_r);
    the mean solves the matching linear system.  Returns (mean, covariance).
    """
    cfg = config if config is not None else chain.config
    if label not in chain.tracks.tracks:
        raise ValueError(f"unknown label {label}")
    meas = measurements if measurements is not None else chain.measurements
    ctx = _StepContext.__new__(_StepContext)
    ctx.chain = chain
    ctx.config = cfg
    ctx.tracks = chain.tracks.tracks
    ctx.alloc = chain.alloc
    ctx.measurements = [(float(y[0]), float(y[1])) for y in meas]
    ctx.M = len(ctx.measurements)
    ctx.A_mat = cfg.motion.transition_matrix()
    cov = cfg.motion.regularized_noise_cov()
    ctx.Sigma_inv = np.linalg.inv(cov)
    ctx.birth = cfg.birth_model()
    ctx.birth_prec = 1.0 / ctx.birth.var
    ctx.sigma_o_sq = cfg.meas.sigma_o_sq
    ctx.positions = {
        l: (t.state[0], t.state[1]) for l, t in chain.tracks.tracks.items() if t.alive
    }
    Lam, b = _conditional_params(ctx, chain.tracks.tracks[label])
    cov_out = np.linalg.inv(Lam)
    cov_out = 0.5 * (cov_out + cov_out.T)
    return np.linalg.solve(Lam, b), cov_out
