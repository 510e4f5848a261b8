"""Bootstrap particle filter with adaptive multinomial resampling.

Particles are propagated with the model transition and weighted by the
observation density; the transition doubles as the proposal, so the
proposal and transition densities cancel in the weight recursion.  When
the effective sample size drops below a fraction of the particle count,
the cloud is resampled multinomially and every survivor's unnormalized
weight is reset to the pre-resampling mean, which keeps the running
likelihood estimate unchanged across the resampling step.

The end product is `run_pf`, an unbiased estimator of the marginal
likelihood p(y_{1:T} | theta).  Both outer samplers treat that estimate
as their pseudo-marginal target, so this module must never exchange
state across particle-filter instances: each instance belongs to one
theta sample and one RNG stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import log_sum_exp, normalized_from_log
from .ssm import Dataset, SSMDefinition

__all__ = [
    "PFConfig",
    "ParticleCloud",
    "pf_ess",
    "multinomial_resample",
    "pf_step",
    "run_pf",
    "filtering_estimate",
]


@dataclass(frozen=True)
class PFConfig:
    """Particle count and the ESS fraction that triggers resampling."""

    n_particles: int
    resample_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.n_particles < 2:
            raise ValueError("n_particles must be at least 2")
        if not 0.0 < self.resample_fraction <= 1.0:
            raise ValueError("resample_fraction must be in (0, 1]")


@dataclass
class ParticleCloud:
    """States and log unnormalized weights at one time index.

    states has one row per particle; log_weights may contain -inf for
    particles killed by the observation density, but never NaN.
    """

    states: np.ndarray
    log_weights: np.ndarray
    t: int

    @property
    def degenerate(self) -> bool:
        """True when every particle has zero weight."""
        return bool(np.all(np.isneginf(self.log_weights)))


def _checked_log_weights(log_weights) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=float)
    if np.isnan(lw).any():
        raise ValueError("log weights contain NaN")
    if not np.any(lw > -np.inf):
        raise ValueError("degenerate cloud: all log weights are -inf")
    return lw


def pf_ess(log_weights) -> float:
    """Effective sample size, 1 / sum of squared normalized weights.

    Computed as exp(2*lse(lw) - lse(2*lw)) so that heavily skewed
    weights do not underflow.  Always in [1, n].
    """
    lw = _checked_log_weights(log_weights)
    return float(np.exp(2.0 * log_sum_exp(lw) - log_sum_exp(2.0 * lw)))


def multinomial_resample(log_weights, rng: np.random.Generator) -> np.ndarray:
    """Draw len(log_weights) ancestor indices i.i.d. from the normalized
    weights, returned in draw order."""
    lw = _checked_log_weights(log_weights)
    cdf = np.cumsum(normalized_from_log(lw))
    cdf[-1] = 1.0  # round-off must not exclude the last index
    draws = rng.random(lw.shape[0])
    return np.searchsorted(cdf, draws, side="right").astype(np.int64)


def pf_step(
    cloud: ParticleCloud | None,
    y_t,
    theta,
    model: SSMDefinition,
    config: PFConfig,
    rng: np.random.Generator,
) -> ParticleCloud:
    """Advance the filter by one observation.

    Pass cloud=None to initialize: particles are drawn from the initial
    law and weighted by the observation density alone.  After the weight
    update, if ESS < resample_fraction * n_particles the cloud is
    resampled and every particle's unnormalized weight becomes the
    pre-resampling mean weight (in log domain, lse(lw) - ln n).

    A cloud whose weights are all -inf is returned as-is; the caller is
    expected to read it as zero likelihood.
    """
    theta = np.asarray(theta, dtype=float)
    if cloud is None:
        states = model.sample_initial(theta, config.n_particles, rng)
        log_prev = np.zeros(config.n_particles)
        t = 1
    else:
        states = model.sample_transition(cloud.states, theta, rng)
        log_prev = cloud.log_weights
        t = cloud.t + 1
    log_weights = log_prev + model.observation_log_density(y_t, states, theta)
    new = ParticleCloud(states=states, log_weights=log_weights, t=t)
    if new.degenerate:
        return new
    if pf_ess(log_weights) < config.resample_fraction * config.n_particles:
        mean_log = log_sum_exp(log_weights) - np.log(config.n_particles)
        idx = multinomial_resample(log_weights, rng)
        new = ParticleCloud(
            states=states[idx],
            log_weights=np.full(config.n_particles, mean_log),
            t=t,
        )
    return new


def run_pf(
    model: SSMDefinition,
    observations,
    theta,
    config: PFConfig,
    rng: np.random.Generator,
) -> float:
    """Marginal log-likelihood estimate log(1/n * sum of final weights).

    observations may be a Dataset or a plain observation sequence.
    Returns -inf as soon as every particle weight vanishes at some step;
    -inf is a valid value (zero likelihood), not an error.
    """
    ys = observations.y if isinstance(observations, Dataset) else np.asarray(observations)
    if len(ys) < 1:
        raise ValueError("need at least one observation")
    cloud: ParticleCloud | None = None
    for y_t in ys:
        cloud = pf_step(cloud, y_t, theta, model, config, rng)
        if cloud.degenerate:
            return float("-inf")
    return float(log_sum_exp(cloud.log_weights) - np.log(config.n_particles))


def filtering_estimate(cloud: ParticleCloud) -> np.ndarray:
    """Self-normalized estimate of the current state expectation.

    Exposed for diagnostics and tests; the outer samplers consume only
    the likelihood estimate.
    """
    weights = normalized_from_log(_checked_log_weights(cloud.log_weights))
    return weights @ np.asarray(cloud.states, dtype=float)
