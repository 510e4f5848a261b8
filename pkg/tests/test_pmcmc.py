"""Tests for the sequential particle-MCMC baseline."""

import csv

import numpy as np
import pytest
from scipy import stats

from smc2.pf import PFConfig
from smc2.pmcmc import Chain, mh_accept, run_pmcmc, write_chain
from smc2.ssm import SIRConfig, SIRModel, SSMDefinition, simulate_sir


class GaussianPriorModel(SSMDefinition):
    """Standard-normal prior on a scalar parameter; dynamics unused."""

    state_dim = 1
    param_dim = 1
    param_names = ("mu",)

    def log_prior(self, theta) -> float:
        th = float(np.asarray(theta, dtype=float)[0])
        return float(-0.5 * (np.log(2.0 * np.pi) + th * th))

    def sample_prior(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(size=1)


class UnitIntervalModel(SSMDefinition):
    state_dim = 1
    param_dim = 1
    param_names = ("p",)

    def log_prior(self, theta) -> float:
        th = float(np.asarray(theta, dtype=float)[0])
        return 0.0 if 0.0 <= th <= 1.0 else float("-inf")

    def sample_prior(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(size=1)


Y_OBS = 0.4
POST_MEAN = Y_OBS / 2.0
POST_SD = np.sqrt(0.5)


def conjugate_loglik(theta, rng) -> float:
    return float(stats.norm.logpdf(Y_OBS, loc=float(theta[0]), scale=1.0))


def effective_draws(x: np.ndarray) -> float:
    """Initial-positive-sequence estimate of the effective sample count."""
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    n = len(x)
    acf = np.correlate(x, x, mode="full")[n - 1:] / (np.arange(n, 0, -1) * x.var())
    tau = 1.0
    for t in range(1, n // 2):
        if acf[t] < 0.05:
            break
        tau += 2.0 * acf[t]
    return n / tau


class TestMHAccept:
    def test_equal_targets_always_accept(self):
        rng = np.random.default_rng(0)
        assert all(mh_accept(1.3, 1.3, 0.0, rng) for _ in range(50))

    def test_zero_new_target_always_rejects(self):
        rng = np.random.default_rng(1)
        assert not any(mh_accept(float("-inf"), 0.0, 0.0, rng)
                       for _ in range(50))

    def test_q_ratio_offsets_target_ratio(self):
        rng = np.random.default_rng(2)
        assert all(mh_accept(-np.log(2.0), 0.0, np.log(2.0), rng)
                   for _ in range(50))

    def test_non_finite_current_target_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            mh_accept(0.0, float("-inf"), 0.0, np.random.default_rng(3))

    def test_half_ratio_empirical_rate(self):
        """log ratio ln(1/2) accepts half the time."""
        rng = np.random.default_rng(4)
        n = 100_000
        hits = sum(mh_accept(np.log(0.5), 0.0, 0.0, rng) for _ in range(n))
        tol = 4.0 * np.sqrt(0.25 / n)
        assert abs(hits / n - 0.5) < tol

    def test_small_ratio_empirical_rate(self):
        rng = np.random.default_rng(5)
        n = 100_000
        p = 0.01
        hits = sum(mh_accept(np.log(p), 0.0, 0.0, rng) for _ in range(n))
        tol = 4.0 * np.sqrt(p * (1.0 - p) / n)
        assert abs(hits / n - p) < tol


class TestRunPMCMC:
    def test_rejects_short_chains(self):
        with pytest.raises(ValueError, match="at least 2"):
            run_pmcmc(GaussianPriorModel(), None, 1, [[0.25]],
                      PFConfig(n_particles=8), np.random.default_rng(0),
                      loglik_fn=conjugate_loglik)

    def test_rejects_indefinite_proposal(self):
        with pytest.raises(ValueError, match="positive definite"):
            run_pmcmc(GaussianPriorModel(), None, 10, [[-1.0]],
                      PFConfig(n_particles=8), np.random.default_rng(0),
                      loglik_fn=conjugate_loglik)

    def test_frozen_proposal_keeps_chain_at_start(self):
        result = run_pmcmc(GaussianPriorModel(), None, 50, [[1e-30]],
                           PFConfig(n_particles=8), np.random.default_rng(6),
                           loglik_fn=conjugate_loglik)
        draws = result.chain.draws
        assert np.ptp(draws[:, 0]) < 1e-12
        np.testing.assert_allclose(result.estimate, draws[0], atol=1e-12)

    def test_burn_in_arithmetic(self):
        result = run_pmcmc(GaussianPriorModel(), None, 5, [[0.25]],
                           PFConfig(n_particles=8), np.random.default_rng(7),
                           loglik_fn=conjugate_loglik)
        chain = result.chain
        assert chain.burn_in == 2
        assert chain.retained.shape == (3, 1)
        np.testing.assert_array_equal(result.estimate,
                                      chain.draws[2:].mean(axis=0))

    def test_current_state_likelihood_never_recomputed(self):
        """One filter run per in-support proposal plus one for the start."""
        calls = []

        def counting_loglik(theta, rng):
            calls.append(float(theta[0]))
            return conjugate_loglik(theta, rng)

        m = 300
        result = run_pmcmc(GaussianPriorModel(), None, m, [[0.25]],
                           PFConfig(n_particles=8), np.random.default_rng(8),
                           loglik_fn=counting_loglik)
        assert len(calls) == m
        assert 0 < result.chain.accept_count < m - 1

    def test_out_of_support_proposals_skip_the_filter(self):
        calls = []

        def counting_loglik(theta, rng):
            calls.append(float(theta[0]))
            return 0.0

        m = 200
        run_pmcmc(UnitIntervalModel(), None, m, [[4.0]],
                  PFConfig(n_particles=8), np.random.default_rng(9),
                  loglik_fn=counting_loglik)
        assert len(calls) < m
        assert all(0.0 <= c <= 1.0 for c in calls)

    def test_initialization_retries_until_finite(self):
        state = {"failures": 3}

        def flaky_loglik(theta, rng):
            if state["failures"] > 0:
                state["failures"] -= 1
                return float("-inf")
            return 0.0

        result = run_pmcmc(GaussianPriorModel(), None, 10, [[0.25]],
                           PFConfig(n_particles=8), np.random.default_rng(10),
                           loglik_fn=flaky_loglik)
        assert np.isfinite(result.chain.log_targets[0])

    def test_initialization_gives_up_after_cap(self):
        with pytest.raises(RuntimeError, match="after 50 prior draws"):
            run_pmcmc(GaussianPriorModel(), None, 10, [[0.25]],
                      PFConfig(n_particles=8), np.random.default_rng(11),
                      loglik_fn=lambda th, rng: float("-inf"))

    def test_deterministic_given_seed(self):
        runs = [run_pmcmc(GaussianPriorModel(), None, 200, [[0.25]],
                          PFConfig(n_particles=8), np.random.default_rng(12),
                          loglik_fn=conjugate_loglik) for _ in range(2)]
        np.testing.assert_array_equal(runs[0].chain.draws, runs[1].chain.draws)
        np.testing.assert_array_equal(runs[0].chain.accepted,
                                      runs[1].chain.accepted)

    def test_conjugate_posterior_recovery(self):
        """Retained-sample mean lands within 3 posterior sd per effective draw."""
        m = 4096
        result = run_pmcmc(GaussianPriorModel(), None, m, [[0.25]],
                           PFConfig(n_particles=8), np.random.default_rng(13),
                           loglik_fn=conjugate_loglik)
        assert 0.0 < result.acceptance_rate < 1.0
        retained = result.chain.retained[:, 0]
        m_eff = effective_draws(retained)
        assert m_eff > 50.0
        assert abs(result.estimate[0] - POST_MEAN) < 3.0 * POST_SD / np.sqrt(m_eff)

    def test_sir_chain_runs_and_stays_in_support(self):
        config = SIRConfig(n_pop=500, i0=2, n_steps=5)
        model = SIRModel(config)
        dataset = simulate_sir(config, (0.85, 0.2), seed=14)
        result = run_pmcmc(model, dataset, 40, 0.1 * np.eye(2),
                           PFConfig(n_particles=32), np.random.default_rng(15))
        assert np.all((result.chain.draws >= 0.0) & (result.chain.draws <= 1.0))
        assert np.all(np.isfinite(result.chain.log_targets))
        assert result.elapsed_seconds > 0.0
        assert result.param_names == ("beta", "gamma")

    def test_chain_dump_layout(self, tmp_path):
        config = SIRConfig(n_pop=500, i0=2, n_steps=5)
        model = SIRModel(config)
        dataset = simulate_sir(config, (0.85, 0.2), seed=16)
        result = run_pmcmc(model, dataset, 6, 0.1 * np.eye(2),
                           PFConfig(n_particles=32), np.random.default_rng(17))
        path = tmp_path / "chain.csv"
        write_chain(str(path), result)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["m", "beta", "gamma", "log_target", "accepted"]
        assert len(rows) == 1 + 6
        assert [r[0] for r in rows[1:]] == [str(m) for m in range(6)]
        for m, row in enumerate(rows[1:]):
            assert row[4] in ("0", "1")
            np.testing.assert_array_equal(
                [float(row[1]), float(row[2])], result.chain.draws[m])
            assert float(row[3]) == result.chain.log_targets[m]

    def test_accept_count_property(self):
        chain = Chain(draws=np.zeros((4, 1)), log_targets=np.zeros(4),
                      accepted=np.array([1, 0, 1, 1]), burn_in=2)
        assert chain.accept_count == 2
