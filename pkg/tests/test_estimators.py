import math

import numpy as np
import pytest

from ebprde.estimators import (SIGMA_FLOOR, EstimationError, FitResult, aggregate_stats, batched_fit, contrast_fit,
                               contrast_rows, known_fit, select_estimator)
from ebprde.lmm import CaseSpec, Dataset, Design, ModelTruth, build_case_design, simulate
from ebprde.priors import GaussianScalar
from ebprde.rng import seed_stream


def replicated_design(n, rng, d=1, k=2):
    rows = n * k
    return Design(u_past=rng.uniform(0.5, 2.0, rows), k_past=np.full(n, k), v_future=rng.uniform(0.5, 2.0, n),
                  k_future=np.ones(n, dtype=int), x_past=rng.standard_normal((rows, d)),
                  x_future=rng.standard_normal((n, d)))


def single_design(n, rng, d=1):
    return Design(u_past=rng.uniform(0.5, 2.0, n), k_past=np.ones(n, dtype=int), v_future=rng.uniform(0.5, 2.0, n),
                  k_future=np.ones(n, dtype=int), x_past=rng.standard_normal((n, d)),
                  x_future=rng.standard_normal((n, d)))


class TestAggregateStats:
    def test_single_observation(self):
        d = Design(u_past=np.array([2.0]), k_past=np.array([1]), v_future=np.array([1.0]), k_future=np.array([1]))
        stats = aggregate_stats(Dataset(np.array([1.0])), d, 0.0, 1.0)
        np.testing.assert_allclose(stats.z, [0.5])

    def test_exact_fit_gives_zero(self):
        rng = np.random.default_rng(0)
        d = replicated_design(20, rng)
        beta = np.array([1.7])
        stats = aggregate_stats(Dataset(d.x_past @ beta), d, beta, 1.3)
        np.testing.assert_allclose(stats.z, 0.0, atol=1e-14)

    def test_linearity(self):
        rng = np.random.default_rng(1)
        d = replicated_design(30, rng)
        beta = np.array([0.4])
        for _ in range(20):
            y1, y2 = rng.standard_normal((2, d.u_past.size))
            centered = d.x_past @ beta
            z = lambda y: aggregate_stats(Dataset(y), d, beta, 0.8).z  # noqa: E731
            np.testing.assert_allclose(z(y1 + y2 - centered), z(y1) + z(y2) - z(centered), atol=1e-12)

    def test_conditional_law(self):
        reps = 100_000
        u_rows = np.array([0.7, 1.4])
        n = reps
        d = Design(u_past=np.tile(u_rows, n), k_past=np.full(n, 2), v_future=np.ones(n), k_future=np.ones(n, int))
        gamma, sigma = 1.3, 0.8
        truth = ModelTruth(np.zeros(1), sigma, np.full(n, gamma), GaussianScalar(1.0))
        z = aggregate_stats(simulate(d, truth, seed_stream(2, "law")), d, 0.0, sigma).z
        var = 1.0 / (u_rows @ u_rows)
        assert abs(z.mean() - gamma / sigma) < 3 * math.sqrt(var / n)
        assert abs(z.var(ddof=1) - var) < 3 * var * math.sqrt(2 / (n - 1))

    def test_errors(self):
        d = Design(u_past=np.array([2.0]), k_past=np.array([1]), v_future=np.array([1.0]), k_future=np.array([1]))
        with pytest.raises(ValueError):
            aggregate_stats(Dataset(np.array([1.0])), d, 0.0, 0.0)
        with pytest.raises(ValueError):
            aggregate_stats(Dataset(np.array([1.0, 2.0])), d, 0.0, 1.0)


class TestContrastFit:
    def test_noise_free_recovers_beta(self):
        rng = np.random.default_rng(3)
        d = replicated_design(50, rng)
        beta = np.array([-0.6])
        gamma = rng.standard_normal(50)
        y = d.x_past @ beta + d.u_past * gamma[d.past_unit]
        fit = contrast_fit(Dataset(y), d)
        np.testing.assert_allclose(fit.beta_hat, beta, atol=1e-10)
        assert fit.sigma_hat == SIGMA_FLOOR
        assert fit.regime == "contrast" and fit.diagnostics["n_contrasts"] == 50

    def test_contrast_is_gamma_free(self):
        rng = np.random.default_rng(4)
        d = replicated_design(40, rng)
        y = rng.standard_normal(d.u_past.size)
        _, r1, _ = contrast_rows(Dataset(y), d)
        shift = rng.standard_normal(40)
        _, r2, _ = contrast_rows(Dataset(y + d.u_past * shift[d.past_unit]), d)
        np.testing.assert_allclose(r1, r2, atol=1e-12)

    def test_symmetric_design_is_singular(self):
        n = 10
        x = np.repeat(np.arange(1.0, n + 1), 2)[:, None]
        d = Design(u_past=np.ones(2 * n), k_past=np.full(n, 2), v_future=np.ones(n), k_future=np.ones(n, int),
                   x_past=x, x_future=np.ones((n, 1)))
        with pytest.raises(EstimationError, match="smallest eigenvalue"):
            contrast_fit(Dataset(np.zeros(2 * n)), d)

    def test_requires_replicates(self):
        rng = np.random.default_rng(5)
        d = single_design(10, rng)
        with pytest.raises(EstimationError):
            contrast_fit(Dataset(np.zeros(10)), d)

    def test_sigma_consistent(self):
        rng = np.random.default_rng(6)
        d = replicated_design(4000, rng)
        truth = ModelTruth(np.array([0.5]), 1.5, rng.standard_normal(4000), GaussianScalar(1.0))
        fit = contrast_fit(simulate(d, truth, seed_stream(6)), d)
        assert abs(fit.sigma_hat - 1.5) < 0.05

    def test_extra_replicates_ignored(self):
        rng = np.random.default_rng(7)
        d3 = replicated_design(30, rng, k=3)
        y = rng.standard_normal(d3.u_past.size)
        units, r, _ = contrast_rows(Dataset(y), d3)
        first = d3.past_offsets[units]
        u1, u2 = d3.u_past[first], d3.u_past[first + 1]
        np.testing.assert_allclose(r, (u2 * y[first] - u1 * y[first + 1]) / np.hypot(u1, u2))


class TestBatchedFit:
    def test_noiseless_limit(self):
        rng = np.random.default_rng(8)
        d = single_design(400, rng)
        truth = ModelTruth(np.array([2.5]), 1e-8, np.zeros(400), GaussianScalar(1.0))
        fit = batched_fit(simulate(d, truth, seed_stream(8)), d)
        np.testing.assert_allclose(fit.beta_hat, [2.5], atol=1e-6)
        assert fit.diagnostics == {"n_batches": 20, "batch_size": 20}

    def test_batch_size_too_large(self):
        rng = np.random.default_rng(9)
        d = single_design(10, rng)
        with pytest.raises(EstimationError):
            batched_fit(Dataset(np.zeros(10)), d, batch_size=11)
        with pytest.raises(EstimationError):
            batched_fit(Dataset(np.zeros(10)), d, batch_size=6)

    def test_seeded_shuffle_is_deterministic(self):
        rng = np.random.default_rng(10)
        d = single_design(100, rng)
        y = rng.standard_normal(100)
        a = batched_fit(Dataset(y), d, rng=seed_stream(1, "b"))
        b = batched_fit(Dataset(y), d, rng=seed_stream(1, "b"))
        np.testing.assert_array_equal(a.beta_hat, b.beta_hat)


class TestSelectEstimator:
    def test_case_e_uses_contrasts(self):
        d = build_case_design(CaseSpec("E", 400, with_fixed_effects=True), seed_stream(11))
        truth = ModelTruth(np.array([1.0]), 1.0, np.zeros(400), GaussianScalar(1.0))
        assert select_estimator(simulate(d, truth, seed_stream(11, "y")), d).regime == "contrast"

    def test_no_replicates_uses_batches(self):
        d = build_case_design(CaseSpec("A", 400, with_fixed_effects=True), seed_stream(12))
        truth = ModelTruth(np.array([1.0]), 1.0, np.zeros(400), GaussianScalar(1.0))
        assert select_estimator(simulate(d, truth, seed_stream(12, "y")), d).regime == "batched"

    def test_single_replicated_unit_uses_batches(self):
        rng = np.random.default_rng(13)
        n = 10_000
        k = np.ones(n, dtype=int)
        k[0] = 2
        d = Design(u_past=rng.uniform(0.5, 2, n + 1), k_past=k, v_future=np.ones(n), k_future=np.ones(n, int),
                   x_past=rng.standard_normal((n + 1, 1)), x_future=rng.standard_normal((n, 1)))
        truth = ModelTruth(np.array([1.0]), 1.0, np.zeros(n), GaussianScalar(1.0))
        assert select_estimator(simulate(d, truth, seed_stream(13)), d).regime == "batched"


class TestFitResult:
    def test_known_fit(self):
        fit = known_fit([0.2], 1.5)
        assert fit.regime == "known" and fit.sigma_hat == 1.5
        assert fit.to_dict()["beta_hat"] == [0.2]

    def test_validation(self):
        with pytest.raises(ValueError):
            FitResult(np.zeros(1), 0.0, "known")
        with pytest.raises(ValueError):
            FitResult(np.zeros(1), 1.0, "reml")
