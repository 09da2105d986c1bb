"""Kinematics, measurement likelihood, and conjugate cluster-parameter updates.

State vector x = [x, y, v_x, v_y]^T evolves as a near-constant-velocity
linear Gaussian system

    x_k = A x_{k-1} + zeta_k,   zeta_k ~ N(0, Sigma_s),

with A = [[I2, dt*I2], [0, I2]] and the white-acceleration noise covariance
Sigma_s = sigma_s^2 [[dt^4/4 I2, dt^3/2 I2], [dt^3/2 I2, dt^2 I2]].

A measurement produced jointly by a set of objects (a spawning event when
the set has more than one member) is modelled as

    y = mean_{l in set} B x_l + eta,   eta ~ N(0, sigma_o^2 I2),

with B = [I2 0] the position projection: the observed point is the noisy
arithmetic mean of the originating objects' positions, which reduces to the
ordinary observation model for a singleton set.

Cluster parameters carry a Normal-inverse-Wishart prior with the textbook
conjugate update and multivariate Student-t posterior predictive.  The NIW
machinery is dimension-generic; the tracker uses it at d = 4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ObjectState",
    "MotionModel",
    "MeasurementModel",
    "NiwParams",
    "BirthModel",
    "transition_sample",
    "transition_logpdf",
    "measurement_mean",
    "measurement_loglik",
    "niw_posterior",
    "niw_posterior_from_stats",
    "niw_posterior_predictive_logpdf",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ObjectState:
    """Planar position (m) and velocity (m/s) of one object."""

    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self) -> None:
        pos = np.asarray(self.position, dtype=float).reshape(2)
        vel = np.asarray(self.velocity, dtype=float).reshape(2)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise ValueError("state components must be finite")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "velocity", vel)

    @classmethod
    def from_vector(cls, vec) -> "ObjectState":
        v = np.asarray(vec, dtype=float).reshape(4)
        return cls(position=v[:2], velocity=v[2:])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


@dataclass(frozen=True)
class MotionModel:
    """Constant-velocity kinematics with white acceleration noise.

    The discretised piecewise-constant-acceleration covariance
    sigma_s^2 [[dt^4/4 I2, dt^3/2 I2], [dt^3/2 I2, dt^2 I2]] is rank
    deficient: per axis it is the outer product of [dt^2/2, dt], so the
    noise lives on a 2-dim subspace and admits no 4-dim density.  Sampling
    uses the exact rank-2 factor; every density, inverse, or Cholesky of
    the process noise goes through regularized_noise_cov(), which adds
    noise_jitter on the diagonal to make those operations well posed.
    """

    dt: float = 1.0
    sigma_s: float = 1.0
    survival_prob: float = 0.99
    noise_jitter: float = 0.04

    def __post_init__(self) -> None:
        if not (self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not (self.sigma_s > 0):
            raise ValueError(f"sigma_s must be positive, got {self.sigma_s}")
        if not (0.0 <= self.survival_prob <= 1.0):
            raise ValueError(f"survival_prob must lie in [0,1], got {self.survival_prob}")
        if not (self.noise_jitter > 0):
            raise ValueError(f"noise_jitter must be positive, got {self.noise_jitter}")

    def transition_matrix(self) -> np.ndarray:
        A = np.eye(4)
        A[0, 2] = A[1, 3] = self.dt
        return A

    def noise_cov(self) -> np.ndarray:
        d2 = self.dt * self.dt
        q11 = d2 * d2 / 4.0
        q12 = d2 * self.dt / 2.0
        S = np.zeros((4, 4))
        S[0, 0] = S[1, 1] = q11
        S[2, 2] = S[3, 3] = d2
        S[0, 2] = S[2, 0] = S[1, 3] = S[3, 1] = q12
        return self.sigma_s ** 2 * S

    def regularized_noise_cov(self) -> np.ndarray:
        """noise_cov() plus noise_jitter on the diagonal (positive definite)."""
        return self.noise_cov() + self.noise_jitter * np.eye(4)


@dataclass(frozen=True)
class MeasurementModel:
    """Position observation with isotropic Gaussian noise."""

    sigma_o_sq: float = 10.0

    def __post_init__(self) -> None:
        if not (self.sigma_o_sq > 0):
            raise ValueError(f"sigma_o_sq must be positive, got {self.sigma_o_sq}")

    @property
    def projection(self) -> np.ndarray:
        B = np.zeros((2, 4))
        B[0, 0] = B[1, 1] = 1.0
        return B


def transition_sample(
    state: ObjectState, model: MotionModel, rng: np.random.Generator
) -> ObjectState:
    """One-step kinematic propagation with process noise.

    Draws the noise exactly from its rank-2 factor: an isotropic
    acceleration impulse a ~ N(0, sigma_s^2 I2) enters the position as
    dt^2/2 a and the velocity as dt a, reproducing noise_cov() without
    any regularization.
    """
    a = model.sigma_s * rng.standard_normal(2)
    vec = model.transition_matrix() @ state.to_vector()
    vec[0] += 0.5 * model.dt * model.dt * a[0]
    vec[1] += 0.5 * model.dt * model.dt * a[1]
    vec[2] += model.dt * a[0]
    vec[3] += model.dt * a[1]
    return ObjectState.from_vector(vec)


def transition_logpdf(next: ObjectState, prev: ObjectState, model: MotionModel) -> float:
    """log N(next; A prev, regularized_noise_cov()).

    The bare noise covariance is singular (rank 2), so the density is
    taken with respect to the jittered covariance — the same matrix used
    everywhere the sampler needs the transition prior.
    """
    cov = model.regularized_noise_cov()
    resid = next.to_vector() - model.transition_matrix() @ prev.to_vector()
    sign, logdet = np.linalg.slogdet(cov)
    quad = resid @ np.linalg.solve(cov, resid)
    return -0.5 * (4.0 * _LOG_2PI + logdet + quad)


def measurement_mean(states, model: MeasurementModel) -> np.ndarray:
    """Arithmetic mean of the associated objects' projected positions.

    This is the spawning combination rule: a measurement produced by
    several objects observes the mean of their positions.
    """
    states = list(states)
    if not states:
        raise ValueError("measurement_mean needs at least one associated state")
    out = np.zeros(2)
    for s in states:
        out += s.position
    return out / len(states)


def measurement_loglik(y, states, model: MeasurementModel) -> float:
    """log N(y; measurement_mean(states), sigma_o^2 I2)."""
    mean = measurement_mean(states, model)
    y = np.asarray(y, dtype=float).reshape(2)
    d2 = float((y[0] - mean[0]) ** 2 + (y[1] - mean[1]) ** 2)
    return -_LOG_2PI - math.log(model.sigma_o_sq) - 0.5 * d2 / model.sigma_o_sq


@dataclass(frozen=True)
class NiwParams:
    """Normal-inverse-Wishart parameters (mean, scale, dof, scatter).

    Dimension-generic: dim = len(mean), dof must exceed dim + 1 so the
    implied covariance has a finite mean (dof > 5 for the 4-dim state).
    """

    mean: np.ndarray
    scale: float
    dof: float
    scatter: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        d = mean.shape[0]
        scatter = np.asarray(self.scatter, dtype=float).reshape(d, d)
        if self.scale < 0:
            raise ValueError(f"scale must be non-negative, got {self.scale}")
        if not (self.dof > d + 1):
            raise ValueError(f"dof must exceed dim+1 = {d + 1}, got {self.dof}")
        if not np.allclose(scatter, scatter.T, atol=1e-10):
            raise ValueError("scatter must be symmetric")
        # positive-definiteness via cholesky
        try:
            np.linalg.cholesky(scatter)
        except np.linalg.LinAlgError as e:
            raise ValueError("scatter must be positive-definite") from e
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scatter", scatter)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def niw_posterior(prior: NiwParams, data) -> NiwParams:
    """Conjugate NIW update given a batch of observations."""
    data = [np.asarray(d, dtype=float).reshape(prior.dim) for d in data]
    n = len(data)
    if n == 0:
        return prior
    X = np.array(data)
    xbar = X.mean(axis=0)
    centered = X - xbar
    S = centered.T @ centered
    return niw_posterior_from_stats(prior, n, xbar, S)


def niw_posterior_from_stats(
    prior: NiwParams, n: int, xbar: np.ndarray, scatter_about_mean: np.ndarray
) -> NiwParams:
    """NIW update from sufficient statistics (count, sample mean, scatter)."""
    if n == 0:
        return prior
    kappa_n = prior.scale + n
    mean_n = (prior.scale * prior.mean + n * xbar) / kappa_n
    dev = xbar - prior.mean
    scatter_n = (
        prior.scatter
        + scatter_about_mean
        + (prior.scale * n / kappa_n) * np.outer(dev, dev)
    )
    return NiwParams(mean=mean_n, scale=kappa_n, dof=prior.dof + n, scatter=scatter_n)


@dataclass(frozen=True)
class BirthModel:
    """Prior over newborn states: uniform position, Gaussian velocity.

    Position block: uniform over the surveillance region, matching where
    objects actually appear; the prior is exactly zero outside, which is
    what pins down spawned/newborn objects — without the hard support a
    far-away measurement can be "explained" as the mean of a pinned
    survivor and a phantom at the reflected point 2y - x, and the phantom
    would wreck the track estimates.  Velocity block: the NIW
    posterior-predictive marginal for a fresh cluster, which is where the
    scale-free kappa_0 ~ 0 prior actually bites (position information in
    the NIW base is vacuous by design).

    Also owns the data-driven proposal used by the new-column move:
    position around the proposing measurement at observation-noise scale,
    velocity from the base.  Every density here accepts an optional
    vel_base=(mean, var) override of the velocity block: a newborn that
    replaces or extends an existing motion pattern can carry a base
    recentered on the locally observed displacement (see vel_posterior),
    and as long as prior and proposal quote the same base the velocity
    factors cancel in any MH ratio — the recentering changes what is
    drawn, never what is accepted.  The proposal is a convenience, not
    part of the model — MH ratios quote both densities (a proposal outside
    the region simply scores -inf under the prior and is rejected).
    """

    low: np.ndarray     # (2,) region lower corner
    high: np.ndarray    # (2,) region upper corner
    vel_mean: np.ndarray
    vel_var: np.ndarray
    proposal_pos_var: float

    def __post_init__(self) -> None:
        low = np.asarray(self.low, dtype=float).reshape(2)
        high = np.asarray(self.high, dtype=float).reshape(2)
        vm = np.asarray(self.vel_mean, dtype=float).reshape(2)
        vv = np.asarray(self.vel_var, dtype=float).reshape(2)
        if np.any(high <= low):
            raise ValueError("region must have positive extent")
        if np.any(vv <= 0) or self.proposal_pos_var <= 0:
            raise ValueError("birth variances must be positive")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        object.__setattr__(self, "vel_mean", vm)
        object.__setattr__(self, "vel_var", vv)

    @classmethod
    def from_niw(
        cls, niw: NiwParams, region, proposal_pos_var: float = 10.0
    ) -> "BirthModel":
        (x0, x1), (y0, y1) = region
        # NIW predictive marginal variance: Psi (kappa+1) / (kappa (dof-d-1))
        pred = niw.scatter * (niw.scale + 1.0) / (niw.scale * (niw.dof - niw.dim - 1.0))
        vel_var = np.diag(pred)[2:4]
        return cls(
            low=np.array([x0, y0]),
            high=np.array([x1, y1]),
            vel_mean=niw.mean[2:4],
            vel_var=vel_var,
            proposal_pos_var=proposal_pos_var,
        )

    @property
    def log_area(self) -> float:
        return float(np.sum(np.log(self.high - self.low)))

    def contains(self, px: float, py: float) -> bool:
        return (
            self.low[0] <= px <= self.high[0] and self.low[1] <= py <= self.high[1]
        )

    def logpdf(self, vec, vel_base=None) -> float:
        vec = np.asarray(vec, dtype=float).reshape(4)
        if not self.contains(vec[0], vec[1]):
            return -math.inf
        vm, vv = vel_base if vel_base is not None else (self.vel_mean, self.vel_var)
        dv = vec[2:4] - vm
        return float(
            -self.log_area
            - 0.5 * np.sum(dv * dv / vv)
            - 0.5 * np.sum(np.log(2.0 * np.pi * vv))
        )

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        out = np.empty(4)
        out[:2] = rng.uniform(self.low, self.high)
        out[2:4] = self.vel_mean + np.sqrt(self.vel_var) * rng.standard_normal(2)
        return out

    def sample_near(self, y, rng: np.random.Generator, vel_base=None) -> np.ndarray:
        """Proposal draw: position around y, velocity from its base."""
        vm, vv = vel_base if vel_base is not None else (self.vel_mean, self.vel_var)
        out = np.empty(4)
        s = math.sqrt(self.proposal_pos_var)
        out[0] = y[0] + s * rng.standard_normal()
        out[1] = y[1] + s * rng.standard_normal()
        out[2:4] = vm + np.sqrt(vv) * rng.standard_normal(2)
        return out

    def proposal_logpdf(self, vec, y, vel_base=None) -> float:
        vm, vv = vel_base if vel_base is not None else (self.vel_mean, self.vel_var)
        vec = np.asarray(vec, dtype=float).reshape(4)
        dp = vec[:2] - np.asarray([y[0], y[1]], dtype=float)
        dv = vec[2:4] - vm
        return float(
            -0.5 * np.sum(dp * dp) / self.proposal_pos_var
            - math.log(2.0 * math.pi * self.proposal_pos_var)
            - 0.5 * np.sum(dv * dv / vv)
            - 0.5 * np.sum(np.log(2.0 * np.pi * vv))
        )

    def vel_posterior(self, dx: float, dy: float, dt: float, sigma_o_sq: float):
        """Conjugate update of the velocity base by one differenced fix.

        A displacement (dx, dy) between two consecutive position
        measurements is a noisy velocity reading: (dx/dt, dy/dt) with
        variance 2 sigma_o^2 / dt^2 per axis (two independent observation
        noises in the difference).  Returns the (mean, var) pair of the
        Gaussian posterior — the shrinkage keeps a noisy difference from
        over-committing the velocity, while a clear displacement moves the
        base most of the way to the observed rate.
        """
        noise = 2.0 * sigma_o_sq / (dt * dt)
        lam = self.vel_var / (self.vel_var + noise)
        mean = self.vel_mean + lam * (np.array([dx, dy]) / dt - self.vel_mean)
        return mean, lam * noise


def niw_posterior_predictive_logpdf(params: NiwParams, x) -> float:
    """Multivariate Student-t predictive density implied by the NIW.

    t_{nu'}(mean, scatter (scale+1) / (scale nu')) with nu' = dof - dim + 1.
    """
    d = params.dim
    x = np.asarray(x, dtype=float).reshape(d)
    nu = params.dof - d + 1.0
    if params.scale <= 0:
        raise ValueError("predictive needs scale > 0")
    S = params.scatter * (params.scale + 1.0) / (params.scale * nu)
    resid = x - params.mean
    sign, logdet = np.linalg.slogdet(S)
    quad = resid @ np.linalg.solve(S, resid)
    return (
        math.lgamma(0.5 * (nu + d))
        - math.lgamma(0.5 * nu)
        - 0.5 * d * math.log(nu * math.pi)
        - 0.5 * logdet
        - 0.5 * (nu + d) * math.log1p(quad / nu)
    )
