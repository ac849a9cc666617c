import json
import math

import numpy as np
import pytest
from scipy import integrate

from ebprde.priors import (Discrete, GaussianScalar, GaussMix, ImproperPriorError, SpikeSlab, Uniform,
                           combined_sd, gh_convolve, hermite_nodes, log_marginal_m, log_marginal_m_tilde,
                           norm_logpdf, past_sd, posterior_predictive_logpdf, prior_from_json)

PRIORS = {
    "delta0": Discrete([1.0], [0.0]),
    "discrete": Discrete([0.2, 0.5, 0.3], [-1.0, 0.3, 2.0]),
    "gaussian": GaussianScalar(0.7),
    "gaussmix": GaussMix([0.7, 0.3], [0.25, 1.0]),
    "spikeslab": SpikeSlab(eta=0.3, a=2.0),
}


def random_grid(rng, size, sd=past_sd):
    """Inputs spread well into, but not absurdly far beyond, the marginal's tails."""
    u = rng.uniform(0.3, 3.0, size)
    v = rng.uniform(0.3, 3.0, size)
    sigma = rng.uniform(0.5, 2.0, size)
    gamma = rng.uniform(-3, 3, size)
    a = v * gamma / sigma + sd(u, v) * rng.uniform(-6, 6, size)
    return a, u, v, sigma


class TestNodeTables:
    def test_hermite_weights_and_moments(self):
        x, w = hermite_nodes(21)
        np.testing.assert_allclose(w.sum(), 1.0, rtol=1e-14)
        np.testing.assert_allclose(w @ x**2, 1.0, rtol=1e-12)
        np.testing.assert_allclose(w @ x**4, 3.0, rtol=1e-12)

    def test_tables_are_shared_and_read_only(self):
        x1, _ = hermite_nodes(31)
        x2, _ = hermite_nodes(31)
        assert x1 is x2
        with pytest.raises(ValueError):
            x1[0] = 0.0


class TestClosedFormExamples:
    def test_delta_zero_past_marginal(self):
        np.testing.assert_allclose(log_marginal_m(PRIORS["delta0"], 0.0, 1.0, 1.0, 1.0), -0.918939, atol=1e-6)

    def test_gaussian_past_marginal(self):
        val = log_marginal_m(GaussianScalar(1.0), 0.0, 1.0, 1.0, 1.0)
        np.testing.assert_allclose(val, -0.5 * math.log(4 * math.pi), rtol=1e-14)
        np.testing.assert_allclose(val, -1.265512, atol=1e-6)

    def test_delta_zero_combined_marginal(self):
        np.testing.assert_allclose(log_marginal_m_tilde(PRIORS["delta0"], 0.0, 1.0, 1.0, 1.0), -0.572365, atol=1e-6)

    def test_combined_marginal_degenerate_limit(self):
        v, u, sigma, gamma = 1.0, 1e3, 1.0, 0.4
        sd = combined_sd(u, v)
        point = Discrete([1.0], [gamma])
        np.testing.assert_allclose(math.exp(log_marginal_m_tilde(point, v * gamma / sigma, u, v, sigma)),
                                   1 / (math.sqrt(2 * math.pi) * sd), rtol=1e-3)

    def test_scale_conventions(self):
        np.testing.assert_allclose(past_sd(2.0, 3.0), 1.5)
        np.testing.assert_allclose(combined_sd(3.0, 4.0), 0.8)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ImproperPriorError):
            log_marginal_m(Uniform(), 0.0, 1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            log_marginal_m(PRIORS["gaussian"], 0.0, -1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            log_marginal_m_tilde(PRIORS["gaussian"], 0.0, 1.0, 1.0, 0.0)


class TestQuadratureOracle:
    @pytest.mark.parametrize("name", ["discrete", "gaussian", "gaussmix", "spikeslab"])
    def test_closed_forms_match_quadrature(self, name):
        prior = PRIORS[name]
        rng = np.random.default_rng(11)
        for sd_fn in (past_sd, combined_sd):
            a, u, v, sigma = random_grid(rng, 1000, sd_fn)
            sd = sd_fn(u, v)
            closed = prior.log_conv(a, v / sigma, sd)
            quad = gh_convolve(prior, a, v / sigma, sd, nodes=61)
            np.testing.assert_allclose(closed, quad, rtol=0, atol=1e-8)

    def test_gaussian_on_dense_a_grid(self):
        a = np.linspace(-6, 6, 241)
        prior = GaussianScalar(1.3)
        np.testing.assert_allclose(prior.log_conv(a, 0.8, 0.6), gh_convolve(prior, a, 0.8, 0.6, 61),
                                   rtol=0, atol=1e-10)

    def test_delta_independent_of_nodes(self):
        a = np.linspace(-3, 3, 13)
        for nodes in (3, 11, 61):
            np.testing.assert_allclose(gh_convolve(PRIORS["delta0"], a, 1.0, 0.7, nodes), norm_logpdf(a, 0.0, 0.7),
                                       rtol=0, atol=1e-14)

    def test_spikeslab_self_convergence(self):
        rng = np.random.default_rng(5)
        a, u, v, sigma = random_grid(rng, 500)
        prior = PRIORS["spikeslab"]
        lo = gh_convolve(prior, a, v / sigma, past_sd(u, v), 31)
        hi = gh_convolve(prior, a, v / sigma, past_sd(u, v), 61)
        assert np.max(np.abs(lo - hi)) < 1e-9

    def test_quadrature_argument_checks(self):
        with pytest.raises(ValueError):
            gh_convolve(PRIORS["gaussian"], 0.0, 1.0, 1.0, nodes=2)
        with pytest.raises(ValueError):
            gh_convolve(PRIORS["gaussian"], 0.0, 1.0, 0.0)

    def test_laplace_tail_is_stable(self):
        prior = SpikeSlab(eta=0.5, a=10.0)
        vals = prior.log_conv(np.array([-60.0, 0.0, 60.0]), 1.0, 0.05)
        assert np.all(np.isfinite(vals))
        np.testing.assert_allclose(vals[0], vals[2], rtol=1e-12)


class TestMarginalProperties:
    @pytest.mark.parametrize("name", sorted(PRIORS))
    def test_normalization(self, name):
        prior = PRIORS[name]
        u, v, sigma = 1.3, 0.9, 1.1
        sd = past_sd(u, v)
        spread = math.sqrt(sd**2 + (v / sigma) ** 2 * 4.0) + 2.0 * v / sigma
        lo, hi = -10 * spread, 10 * spread

        def f(a):
            return math.exp(float(log_marginal_m(prior, a, u, v, sigma)))

        total, _ = integrate.quad(f, lo, hi, points=[0.0], limit=400, epsabs=1e-12)
        np.testing.assert_allclose(total, 1.0, atol=1e-6)

    @pytest.mark.parametrize("name", sorted(PRIORS))
    def test_upper_bounds(self, name):
        prior = PRIORS[name]
        rng = np.random.default_rng(3)
        a, u, v, sigma = random_grid(rng, 1000)
        assert np.all(log_marginal_m(prior, a, u, v, sigma) <= -0.5 * np.log(2 * np.pi * (v / u) ** 2) + 1e-9)
        assert np.all(log_marginal_m_tilde(prior, a, u, v, sigma)
                      <= -0.5 * np.log(2 * np.pi * v**2 / (u**2 + v**2)) + 1e-9)

    @pytest.mark.parametrize("name", ["discrete", "gaussmix"])
    def test_marginal_linear_in_weights(self, name):
        prior = PRIORS[name]
        rng = np.random.default_rng(8)
        a, u, v, sigma = random_grid(rng, 200)
        p1 = rng.dirichlet(np.ones(prior.n_components))
        p2 = rng.dirichlet(np.ones(prior.n_components))

        def m(p):
            return np.exp(log_marginal_m(prior.with_weights(p), a, u, v, sigma))

        np.testing.assert_allclose(m((p1 + p2) / 2), (m(p1) + m(p2)) / 2, rtol=1e-12)


class TestPosteriorPredictive:
    def test_flat_prior_example(self):
        val = posterior_predictive_logpdf(Uniform(), 0.0, 1.0, 1.0, 1.0, 0.0)
        np.testing.assert_allclose(val, -1.265512, atol=1e-6)

    def test_flat_prior_is_gaussian(self):
        y = np.linspace(-4, 4, 9)
        z, u, v, sigma, off = 0.4, 1.5, 0.8, 1.3, 0.2
        expect = norm_logpdf(y, off + v * sigma * z, sigma * math.sqrt(1 + v**2 / u**2))
        np.testing.assert_allclose(posterior_predictive_logpdf(Uniform(), z, u, v, sigma, y, off), expect,
                                   rtol=1e-13)

    def test_point_mass_ignores_data(self):
        y = np.linspace(-3, 3, 7)
        prior = Discrete([1.0], [0.8])
        for z in (-2.0, 0.0, 5.0):
            np.testing.assert_allclose(posterior_predictive_logpdf(prior, z, 1.2, 0.7, 1.0, y, 0.5),
                                       norm_logpdf(y, 0.5 + 0.7 * 0.8, 1.0), rtol=1e-10, atol=1e-10)

    def test_gaussian_prior_is_conjugate(self):
        tau, z, u, v, sigma = 0.8, 1.1, 1.4, 0.9, 1.0
        prec = u**2 + sigma**2 / tau
        post_mean = u**2 * sigma * z / prec
        post_var = sigma**2 / prec
        y = np.linspace(-4, 4, 11)
        expect = norm_logpdf(y, v * post_mean, math.sqrt(sigma**2 + v**2 * post_var))
        np.testing.assert_allclose(posterior_predictive_logpdf(GaussianScalar(tau), z, u, v, sigma, y), expect,
                                   rtol=1e-12)

    @pytest.mark.parametrize("name", ["gaussmix", "spikeslab", "discrete"])
    def test_integrates_to_one(self, name):
        prior = PRIORS[name]
        z, u, v, sigma = 0.7, 1.2, 1.5, 1.0
        x, w = np.polynomial.legendre.leggauss(201)
        y = 12.0 * x
        dens = np.exp(posterior_predictive_logpdf(prior, z, u, v, sigma, y))
        np.testing.assert_allclose(12.0 * (w @ dens), 1.0, atol=1e-6)


class TestValidationAndSerialization:
    def test_weights_must_be_simplex(self):
        with pytest.raises(ValueError):
            GaussMix([0.6, 0.6], [0.25, 1.0])
        with pytest.raises(ValueError):
            Discrete([1.2, -0.2], [0.0, 1.0])

    def test_spikeslab_box(self):
        with pytest.raises(ValueError):
            SpikeSlab(eta=0.001, a=1.0)
        with pytest.raises(ValueError):
            SpikeSlab(eta=0.5, a=20.0)

    @pytest.mark.parametrize("name", sorted(PRIORS))
    def test_json_round_trip(self, name):
        prior = PRIORS[name]
        text = prior.to_json()
        assert json.loads(text)["kind"]
        back = prior_from_json(text)
        a = np.linspace(-2, 2, 5)
        np.testing.assert_array_equal(back.log_conv(a, 1.0, 0.8), prior.log_conv(a, 1.0, 0.8))

    def test_uniform_round_trip_and_sampling(self):
        assert not prior_from_json(Uniform().to_json()).proper
        with pytest.raises(ValueError):
            Uniform().sample(np.random.default_rng(0), 3)
