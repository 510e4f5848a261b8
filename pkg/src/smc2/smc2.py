"""Distributed SMC sampler over model parameters with filter-estimated likelihoods.

The outer sampler maintains N parameter samples ("theta-samples"), each
weighted by an unbiased particle-filter estimate of its marginal likelihood.
All iterations target the same posterior; random-walk proposals move the
samples around and an L-kernel correction keeps the weights valid.  Two
L-kernels are supported:

  forward_symmetric         L = q with a symmetric q, so the kernel terms
                            cancel and the increment is the target ratio.
  approx_optimal_gaussian   a Gaussian fit to the joint (theta_{k-1}, theta_k)
                            population, conditioned on theta_k.

Every reduction over theta-samples goes through the fixed-shape summation
tree (numerics.tree_sum plus the butterfly collectives), so all reported
scalars are independent of the worker count.  Randomness is keyed by
(root_seed, purpose, iteration, global sample index) and never by rank.

Iteration estimates are recycled into one final estimate with weights
proportional to each iteration's effective sample size, which maximizes
the effective sample size of the combined estimator.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import rng as streams
from .comms import Communicator, GlobalSlice, GroupAborted
from .numerics import tree_sum
from .pf import PFConfig, run_pf
from .resample import parallel_redistribute, reset_weights, systematic_choice

LKERNELS = ("forward_symmetric", "approx_optimal_gaussian")

_LOG_2PI = np.log(2.0 * np.pi)


def _regularization(cov: np.ndarray) -> float:
    """Diagonal jitter scaled to the matrix, floored for zero-trace inputs."""
    d = cov.shape[0]
    return max(1e-8 * float(np.trace(cov)) / d, 1e-12)


def _tree_total(values: np.ndarray):
    """tree_sum with zero padding to the next power of two.

    Padding with exact zeros leaves every partial sum unchanged, so
    power-of-two populations (the only sizes the sampler runs) reduce
    through the unpadded canonical tree while odd-sized inputs, which
    appear in small worked examples, still get a well-defined total.
    """
    n = values.shape[0]
    target = 1 << max(n - 1, 0).bit_length()
    if target != n:
        pad = np.zeros((target - n,) + values.shape[1:])
        values = np.concatenate([values, pad], axis=0)
    return tree_sum(values)


@dataclass(frozen=True)
class SMC2Config:
    """Outer-sampler settings.

    n_samples must be a power of two so the summation tree and the
    redistribution collectives apply; it must also be divisible by the
    worker count at run time.  proposal_cov is validated symmetric
    positive definite here, at configuration time, because a bad matrix
    would otherwise surface as a Cholesky failure mid-run.
    """

    n_samples: int
    n_iterations: int
    proposal_cov: np.ndarray
    pf_config: PFConfig
    lkernel: str = "forward_symmetric"
    resample_fraction: float = 0.5
    weighted_lkernel_fit: bool = False

    def __post_init__(self) -> None:
        n = self.n_samples
        if n < 2 or (n & (n - 1)) != 0:
            raise ValueError(f"n_samples must be a power of two >= 2, got {n}")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be at least 1")
        if not 0.0 < self.resample_fraction <= 1.0:
            raise ValueError("resample_fraction must be in (0, 1]")
        if self.lkernel not in LKERNELS:
            raise ValueError(f"lkernel must be one of {LKERNELS}, got {self.lkernel!r}")
        cov = np.asarray(self.proposal_cov, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("proposal_cov must be a square matrix")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
            raise ValueError("proposal_cov must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("proposal_cov must be positive definite") from exc
        object.__setattr__(self, "proposal_cov", cov)
        object.__setattr__(self, "_proposal_chol", chol)

    @property
    def dim(self) -> int:
        return self.proposal_cov.shape[0]

    @property
    def proposal_chol(self) -> np.ndarray:
        return self._proposal_chol


@dataclass
class Population:
    """Per-rank block of the theta-sample population (structure of arrays).

    log_prior and log_lik are cached with each sample: after a resampling
    pass the copies keep the values of their ancestor, so the target is
    never re-evaluated for an unchanged theta.
    """

    theta: np.ndarray        # (n_local, D)
    log_prior: np.ndarray    # (n_local,)
    log_lik: np.ndarray      # (n_local,)
    log_weights: np.ndarray  # (n_local,)
    k: int

    @property
    def log_target(self) -> np.ndarray:
        return self.log_prior + self.log_lik


@dataclass(frozen=True)
class GaussianJointFit:
    """Moments of the joint (theta_prev, theta_curr) population Gaussian."""

    mean_prev: np.ndarray       # (D,)
    mean_curr: np.ndarray       # (D,)
    cov_prev_prev: np.ndarray   # (D, D)
    cov_prev_curr: np.ndarray   # (D, D); the curr/prev block is its transpose
    cov_curr_curr: np.ndarray   # (D, D)


@dataclass(frozen=True)
class IterationRecord:
    k: int
    ess: float
    l_k: float
    resampled: bool
    estimate: np.ndarray  # (D,)
    logz_increment: float


@dataclass(frozen=True)
class SMC2Result:
    recycled_estimate: np.ndarray
    final_estimate: np.ndarray
    recycling_coefficients: np.ndarray
    iterations: tuple[IterationRecord, ...]
    param_names: tuple[str, ...]
    elapsed_seconds: float


# ---------------------------------------------------------------------------
# Gaussian densities.


def gaussian_log_density(x, mean, cov) -> float:
    """log N(x; mean, cov), jittering the covariance only if Cholesky fails.

    The fallback is deliberately not applied up front: a well-conditioned
    covariance must produce the exact unperturbed density.
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        eps = _regularization(cov)
        try:
            chol = np.linalg.cholesky(cov + eps * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(
                f"covariance is not positive definite even after +{eps:g} I"
            ) from exc
    return _gaussian_log_density_chol(x, mean, chol)


def _gaussian_log_density_chol(x, mean, chol) -> float:
    d = chol.shape[0]
    alpha = solve_triangular(chol, x - mean, lower=True)
    log_det_half = float(np.sum(np.log(np.diag(chol))))
    return float(-0.5 * d * _LOG_2PI - log_det_half - 0.5 * np.dot(alpha, alpha))


# ---------------------------------------------------------------------------
# Single-sample operations.


def propose(theta_prev, config: SMC2Config, rng: np.random.Generator) -> np.ndarray:
    """Random-walk draw theta' = theta + L z with L the proposal Cholesky factor."""
    z = rng.standard_normal(config.dim)
    return np.asarray(theta_prev, dtype=float) + config.proposal_chol @ z


def evaluate_target(model, dataset, theta, pf_config: PFConfig,
                    rng: np.random.Generator) -> tuple[float, float]:
    """Return (log_prior, log_lik) for one theta.

    Out-of-support thetas short-circuit: the filter is never run and the
    likelihood slot is reported as -inf (it is unused, the target is
    already zero).
    """
    log_prior = float(model.log_prior(theta))
    if log_prior == float("-inf"):
        return log_prior, float("-inf")
    return log_prior, run_pf(model, dataset, theta, pf_config, rng)


# ---------------------------------------------------------------------------
# Population-level operations.  All take per-rank blocks plus the communicator.


def init_population(config: SMC2Config, model, dataset, comm: Communicator,
                    root_seed: int, loglik_fn=None) -> Population:
    """Draw theta-samples from the prior and weight them by their likelihood.

    With the prior as the initial proposal, prior and proposal densities
    cancel and the first log weight is exactly the log-likelihood estimate.
    """
    block = GlobalSlice.for_rank(config.n_samples, comm.size, comm.rank)
    n_local = block.local_items
    dim = config.dim
    theta = np.empty((n_local, dim))
    log_prior = np.empty(n_local)
    log_lik = np.empty(n_local)
    for j, g in enumerate(block.global_indices()):
        g = int(g)
        draw = np.asarray(
            model.sample_prior(streams.stream(root_seed, streams.PRIOR_INIT, k=1, i=g)),
            dtype=float,
        )
        if draw.shape != (dim,):
            raise ValueError(
                f"prior sample has shape {draw.shape}; proposal_cov implies ({dim},)"
            )
        lp = float(model.log_prior(draw))
        if not np.isfinite(lp):
            raise RuntimeError("prior sampler produced a sample outside its own support")
        theta[j] = draw
        log_prior[j] = lp
        pf_rng = streams.stream(root_seed, streams.PARTICLE_FILTER, k=1, i=g)
        if loglik_fn is not None:
            log_lik[j] = float(loglik_fn(draw, pf_rng))
        else:
            log_lik[j] = run_pf(model, dataset, draw, config.pf_config, pf_rng)
    return Population(theta=theta, log_prior=log_prior, log_lik=log_lik,
                      log_weights=log_lik.copy(), k=1)


def fit_gaussian_joint(comm: Communicator, theta_prev, theta,
                       weights=None) -> GaussianJointFit:
    """Fit a Gaussian to the pooled (theta_prev, theta) pairs across all ranks.

    Two reductions: one for the mean, one for the centered second moments.
    Centering before the outer products keeps the covariance accurate when
    the means are far from zero.  Unweighted by default (population 1/N
    normalization); pass normalized weights for the weighted variant.
    """
    theta_prev = np.asarray(theta_prev, dtype=float)
    theta = np.asarray(theta, dtype=float)
    n_local, dim = theta.shape
    n_total = n_local * comm.size
    if n_total < 2:
        raise ValueError("joint Gaussian fit needs at least two samples")
    z = np.concatenate([theta_prev, theta], axis=1)  # (n_local, 2D)
    if weights is None:
        scale = np.full(n_local, 1.0 / n_total)
    else:
        scale = np.asarray(weights, dtype=float)
    mean = comm.all_reduce_sum(_tree_total(scale[:, None] * z))
    dev = z - mean
    outer = scale[:, None, None] * dev[:, :, None] * dev[:, None, :]
    cov = comm.all_reduce_sum(_tree_total(outer.reshape(n_local, -1)))
    cov = cov.reshape(2 * dim, 2 * dim)
    return GaussianJointFit(
        mean_prev=mean[:dim],
        mean_curr=mean[dim:],
        cov_prev_prev=cov[:dim, :dim],
        cov_prev_curr=cov[:dim, dim:],
        cov_curr_curr=cov[dim:, dim:],
    )


def lkernel_log_density(theta_prev, theta_curr, fit: GaussianJointFit) -> float:
    """Gaussian L-kernel density log L(theta_prev | theta_curr).

    Conditions the fitted joint on theta_curr.  The curr/curr block is
    regularized before inversion; the conditional covariance is used as-is
    unless its own factorization fails, so a zero cross-covariance yields
    the unperturbed marginal density.
    """
    theta_prev = np.asarray(theta_prev, dtype=float)
    theta_curr = np.asarray(theta_curr, dtype=float)
    dim = fit.mean_prev.shape[0]
    s22 = fit.cov_curr_curr + _regularization(fit.cov_curr_curr) * np.eye(dim)
    try:
        l22 = np.linalg.cholesky(s22)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(
            "regularized curr/curr covariance is not positive definite"
        ) from exc
    mean_cond = fit.mean_prev + fit.cov_prev_curr @ cho_solve(
        (l22, True), theta_curr - fit.mean_curr
    )
    cov_cond = fit.cov_prev_prev - fit.cov_prev_curr @ cho_solve(
        (l22, True), fit.cov_prev_curr.T
    )
    return gaussian_log_density(theta_prev, mean_cond, cov_cond)


def weight_update(log_weights, log_target_prev, log_target_new,
                  log_l=None, log_q=None) -> np.ndarray:
    """Multiply weights by the target ratio, with optional L-kernel correction.

    forward_symmetric passes log_l = log_q = None (the terms cancel);
    the Gaussian kernel passes both per-sample arrays.  Dead samples
    (weight already zero) stay dead without touching their targets, and
    a zero new target kills the sample.  A live sample whose previous
    target is zero cannot occur (its weight would have been zero), so
    that state is reported as corruption rather than patched over.
    """
    log_weights = np.asarray(log_weights, dtype=float)
    log_target_prev = np.asarray(log_target_prev, dtype=float)
    log_target_new = np.asarray(log_target_new, dtype=float)
    new = np.full_like(log_weights, -np.inf)
    alive = np.isfinite(log_weights)
    if np.any(alive & np.isneginf(log_target_prev)):
        raise RuntimeError(
            "live sample with a zero previous target; population state is inconsistent"
        )
    live = alive & np.isfinite(log_target_new)
    incr = log_target_new[live] - log_target_prev[live]
    if (log_l is None) != (log_q is None):
        raise ValueError("log_l and log_q must be supplied together")
    if log_l is not None:
        log_l = np.asarray(log_l, dtype=float)
        log_q = np.asarray(log_q, dtype=float)
        incr = incr + log_l[live] - log_q[live]
    new[live] = log_weights[live] + incr
    return new


def normalize(comm: Communicator, log_weights) -> tuple[np.ndarray, float]:
    """Return (normalized weights, log of the unnormalized total).

    Max-shifted for stability; one max reduction plus one sum reduction.
    Raises if every weight in the population is zero.
    """
    log_weights = np.asarray(log_weights, dtype=float)
    m = comm.all_reduce_max(float(np.max(log_weights)))
    if m == float("-inf"):
        raise RuntimeError(
            "population degenerate: every theta-sample weight is zero"
        )
    shifted = np.exp(log_weights - m)
    total = float(comm.all_reduce_sum(_tree_total(shifted)))
    return shifted / total, m + float(np.log(total))


def ess(comm: Communicator, normalized) -> float:
    """Effective sample size 1 / sum of squared normalized weights."""
    normalized = np.asarray(normalized, dtype=float)
    denom = float(comm.all_reduce_sum(_tree_total(normalized * normalized)))
    return 1.0 / denom


def estimate(comm: Communicator, theta, normalized) -> np.ndarray:
    """Weighted posterior-mean estimate over the current population."""
    theta = np.asarray(theta, dtype=float)
    normalized = np.asarray(normalized, dtype=float)
    return comm.all_reduce_sum(_tree_total(normalized[:, None] * theta))


def recycling_weight(comm: Communicator, log_weights) -> float:
    """Effective-sample-size weight l_k of the current iteration.

    l_k = exp(2 logsum(w) - logsum(w^2)), computed from max-shifted values;
    the shift cancels in the combination.  A fully degenerate iteration
    gets l_k = 0 so it contributes nothing when recycled.
    """
    log_weights = np.asarray(log_weights, dtype=float)
    m = comm.all_reduce_max(float(np.max(log_weights)))
    if m == float("-inf"):
        return 0.0
    shifted = np.exp(log_weights - m)
    sums = comm.all_reduce_sum(
        np.array([float(_tree_total(shifted)), float(_tree_total(shifted * shifted))])
    )
    return float(np.exp(2.0 * np.log(sums[0]) - np.log(sums[1])))


def recycle(l_values, estimates) -> tuple[np.ndarray, np.ndarray]:
    """Combine per-iteration estimates with weights proportional to l_k.

    Returns (combined estimate, coefficients).  With a single iteration
    the combination is that iteration's estimate.
    """
    l_values = np.asarray(l_values, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    if l_values.ndim != 1 or estimates.shape[0] != l_values.shape[0]:
        raise ValueError("need one estimate per recycling weight")
    if np.any(l_values < 0.0):
        raise ValueError("recycling weights must be nonnegative")
    total = float(np.sum(l_values))
    if total == 0.0:
        raise RuntimeError("all recycling weights are zero; no iteration produced "
                           "a usable estimate")
    coeffs = l_values / total
    return coeffs @ estimates, coeffs


# ---------------------------------------------------------------------------
# The full sampler.


def run_smc2(config: SMC2Config, model, dataset, comm: Communicator,
             root_seed: int, loglik_fn=None) -> SMC2Result:
    """Run the outer sampler for n_iterations and recycle the estimates.

    loglik_fn, when given, replaces the particle filter with a direct
    log-likelihood function (theta, rng) -> float; used to validate the
    sampler against closed-form targets.

    Per-iteration diagnostics record the effective sample size before any
    resampling, the recycling weight, whether resampling fired, the
    current estimate, and the change in log total weight (against log N
    at the first iteration, so it starts as the first log mean weight).
    """
    t0 = time.perf_counter()
    n_total = config.n_samples
    dim = config.dim
    names = tuple(getattr(model, "param_names", ()) or
                  tuple(f"theta{j}" for j in range(dim)))
    if len(names) != dim:
        names = tuple(f"theta{j}" for j in range(dim))
    use_gaussian_kernel = config.lkernel == "approx_optimal_gaussian"

    try:
        pop = init_population(config, model, dataset, comm, root_seed, loglik_fn)
    except GroupAborted:
        raise
    except Exception as exc:
        raise RuntimeError(f"sampler initialization failed: {exc}") from exc

    block = GlobalSlice.for_rank(n_total, comm.size, comm.rank)
    global_idx = [int(g) for g in block.global_indices()]
    prev_log_total = float(np.log(n_total))
    prev_normalized = np.full(block.local_items, 1.0 / n_total)
    records: list[IterationRecord] = []
    l_values: list[float] = []
    estimates: list[np.ndarray] = []

    for k in range(1, config.n_iterations + 1):
        try:
            if k > 1:
                theta_old = pop.theta
                target_old = pop.log_target
                n_local = theta_old.shape[0]
                theta_new = np.empty_like(theta_old)
                lp_new = np.empty(n_local)
                ll_new = np.empty(n_local)
                for j, g in enumerate(global_idx):
                    theta_new[j] = propose(
                        theta_old[j], config,
                        streams.stream(root_seed, streams.PROPOSAL, k=k, i=g),
                    )
                    lp = float(model.log_prior(theta_new[j]))
                    lp_new[j] = lp
                    if lp == float("-inf"):
                        ll_new[j] = float("-inf")
                    elif loglik_fn is not None:
                        ll_new[j] = float(loglik_fn(
                            theta_new[j],
                            streams.stream(root_seed, streams.PARTICLE_FILTER, k=k, i=g),
                        ))
                    else:
                        ll_new[j] = run_pf(
                            model, dataset, theta_new[j], config.pf_config,
                            streams.stream(root_seed, streams.PARTICLE_FILTER, k=k, i=g),
                        )
                log_l = log_q = None
                if use_gaussian_kernel:
                    fit = fit_gaussian_joint(
                        comm, theta_old, theta_new,
                        weights=prev_normalized if config.weighted_lkernel_fit else None,
                    )
                    log_l = np.array([
                        lkernel_log_density(theta_old[j], theta_new[j], fit)
                        for j in range(n_local)
                    ])
                    log_q = np.array([
                        _gaussian_log_density_chol(
                            theta_new[j], theta_old[j], config.proposal_chol
                        )
                        for j in range(n_local)
                    ])
                pop = Population(
                    theta=theta_new, log_prior=lp_new, log_lik=ll_new,
                    log_weights=weight_update(
                        pop.log_weights, target_old, lp_new + ll_new, log_l, log_q
                    ),
                    k=k,
                )

            normalized, log_total = normalize(comm, pop.log_weights)
            l_k = recycling_weight(comm, pop.log_weights)
            est_k = estimate(comm, pop.theta, normalized)
            ess_k = ess(comm, normalized)
            logz_inc = log_total - prev_log_total
            prev_log_total = log_total

            resampled = ess_k < config.resample_fraction * n_total
            if resampled:
                # Same stream on every rank; the choice collective only
                # reads rank 0's value, the rest pass a zero contribution.
                u = streams.stream(root_seed, streams.RESAMPLE_UNIFORM, k=k).random()
                ncopies = systematic_choice(comm, normalized, u)
                payload = np.hstack([
                    pop.theta, pop.log_prior[:, None], pop.log_lik[:, None]
                ])
                payload = parallel_redistribute(comm, payload, ncopies)
                pop = Population(
                    theta=payload[:, :dim],
                    log_prior=payload[:, dim],
                    log_lik=payload[:, dim + 1],
                    log_weights=reset_weights(pop.log_weights, n_total, log_total),
                    k=k,
                )
                prev_normalized = np.full(block.local_items, 1.0 / n_total)
            else:
                prev_normalized = normalized
        except GroupAborted:
            raise
        except Exception as exc:
            raise RuntimeError(f"iteration {k}: {exc}") from exc

        records.append(IterationRecord(
            k=k, ess=ess_k, l_k=l_k, resampled=resampled,
            estimate=est_k, logz_increment=logz_inc,
        ))
        l_values.append(l_k)
        estimates.append(est_k)

    recycled, coeffs = recycle(l_values, np.array(estimates))
    return SMC2Result(
        recycled_estimate=recycled,
        final_estimate=estimates[-1],
        recycling_coefficients=coeffs,
        iterations=tuple(records),
        param_names=names,
        elapsed_seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Diagnostics output.


def diagnostics_header(result: SMC2Result) -> list[str]:
    return (["k", "ess", "l_k", "resampled"]
            + [f"estimate_{name}" for name in result.param_names]
            + ["logZ_increment"])


def diagnostics_rows(result: SMC2Result) -> list[list]:
    rows = []
    for rec in result.iterations:
        rows.append([rec.k, rec.ess, rec.l_k, int(rec.resampled)]
                    + [float(v) for v in rec.estimate]
                    + [rec.logz_increment])
    return rows


def write_diagnostics(path: str, result: SMC2Result) -> None:
    """Write the per-iteration diagnostics as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(diagnostics_header(result))
        writer.writerows(diagnostics_rows(result))
