import math

import numpy as np
import pytest

from ebprde.baselines import naive_plugin_density, prde_density
from ebprde.estimators import SuffStats, aggregate_stats, known_fit
from ebprde.fission import a_n
from ebprde.lmm import CaseSpec, Design, ModelTruth, build_case_design, draw_truth, simulate
from ebprde.oracle import (OracleContext, bayes_risk, gaussian_closed_form, kl_loss_prde, kl_loss_terms,
                           oracle_select, risk_of_method, true_risk_decomposed, true_risk_terms)
from ebprde.priors import Discrete, GaussianScalar, GaussMix, SpikeSlab, Uniform, norm_logpdf
from ebprde.rng import seed_stream
from ebprde.select import ClassSpec


def one_unit(u2, v2):
    return Design(u_past=np.array([math.sqrt(u2)]), k_past=np.array([1]), v_future=np.array([math.sqrt(v2)]),
                  k_future=np.array([1]))


def case_truth(case, n, seed, g0=GaussMix([0.7, 0.3], [0.25, 1.0]), sigma=1.0):
    d = build_case_design(CaseSpec(case, n), seed_stream(seed, "design"))
    return d, draw_truth(g0, n, [0.0], sigma, seed_stream(seed, "truth"))


def true_density(truth, design):
    mean = (design.v_future * truth.gamma[design.future_unit])[:, None]
    return lambda y: norm_logpdf(y, mean, truth.sigma)


class TestTrueRisk:
    def test_uniform_gives_a_n(self):
        d, truth = case_truth("C", 300, 1)
        rb = true_risk_decomposed(truth, d, Uniform())
        assert rb.total == a_n(d) and rb.r1_hat == 0.0 and rb.r2_hat == 0.0

    def test_gaussian_closed_form(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            tau, gamma = rng.uniform(0.1, 3.0), rng.normal(0, 1.5)
            u2, v2 = rng.uniform(0.2, 4.0), rng.uniform(0.2, 4.0)
            d = one_unit(u2, v2)
            truth = ModelTruth(np.zeros(1), 1.0, np.array([gamma]), GaussianScalar(1.0))
            rb = true_risk_decomposed(truth, d, GaussianScalar(tau))
            np.testing.assert_allclose(rb.total - rb.a_n, gaussian_closed_form(tau, gamma, u2, v2), atol=1e-6)

    def test_gaussian_closed_form_with_sigma(self):
        d = one_unit(1.7, 0.6)
        truth = ModelTruth(np.zeros(1), 1.8, np.array([0.9]), GaussianScalar(1.0))
        rb = true_risk_decomposed(truth, d, GaussianScalar(0.8))
        np.testing.assert_allclose(rb.total - rb.a_n, gaussian_closed_form(0.8, 0.9, 1.7, 0.6, sigma=1.8), atol=1e-9)

    @staticmethod
    def _node_gap(prior):
        d, truth = case_truth("A", 200, 3)
        lo = true_risk_decomposed(truth, d, prior, nodes=41).total
        hi = true_risk_decomposed(truth, d, prior, nodes=81).total
        return abs(lo - hi)

    @pytest.mark.parametrize("prior", [GaussMix([0.7, 0.3], [0.25, 1.0]), SpikeSlab(0.3, 2.0)])
    def test_node_self_convergence(self, prior):
        assert self._node_gap(prior) < 1e-8

    @pytest.mark.xfail(strict=True, reason="separated atoms make log m nearly kinked; 41 nodes leave ~2e-6, "
                                           "see decisions ledger")
    def test_node_self_convergence_discrete(self):
        assert self._node_gap(Discrete([0.5, 0.5], [-1.0, 1.0])) < 1e-8

    def test_coordinate_restriction_averages_subset(self):
        d, truth = case_truth("B", 100, 4)
        prior = GaussMix([0.5, 0.5], [0.25, 1.0])
        coords = np.arange(0, 100, 3)
        a, r1, r2 = true_risk_terms(truth, d, prior)
        rb = true_risk_decomposed(truth, d, prior, coords=coords)
        np.testing.assert_allclose(rb.total, np.mean(a[coords] + r1[coords] - r2[coords]), rtol=1e-12)


class TestKlLoss:
    def test_true_density_is_zero(self):
        d, truth = case_truth("E", 200, 5)
        assert abs(kl_loss_prde(true_density(truth, d), truth, d)) < 1e-10

    def test_fixed_plugin_is_squared_error(self):
        d, truth = case_truth("A", 100, 6, sigma=1.3)
        gamma_hat = np.linspace(-1, 1, 100)
        stats = SuffStats(gamma_hat / 1.3, d.u_agg, np.zeros(0), 1.3)
        loss = kl_loss_prde(naive_plugin_density(stats, known_fit(np.zeros(0), 1.3), d), truth, d)
        expect = np.mean(d.v_future**2 * (truth.gamma - gamma_hat) ** 2 / (2 * 1.3**2))
        np.testing.assert_allclose(loss, expect, rtol=1e-10)

    def test_uniform_prde_two_gaussian_formula(self):
        d, truth = case_truth("B", 80, 7, sigma=0.9)
        data = simulate(d, truth, seed_stream(7, "data"))
        fit = known_fit(np.zeros(0), 0.9)
        stats = aggregate_stats(data, d, fit.beta_hat, 0.9)
        loss = kl_loss_terms(prde_density(Uniform(), stats, fit, d), truth, d)
        v, u, s = d.v_future, d.u_agg, 0.9
        m = v * truth.gamma
        mu = v * s * stats.z
        s2 = s**2 * (1 + v**2 / u**2)
        expect = 0.5 * np.log(s2 / s**2) + (s**2 + (m - mu) ** 2) / (2 * s2) - 0.5
        np.testing.assert_allclose(loss, expect, atol=1e-8)

    def test_non_finite_rejected(self):
        d, truth = case_truth("A", 10, 8)
        with pytest.raises(FloatingPointError):
            kl_loss_prde(lambda y: np.full_like(y, -np.inf), truth, d)


class TestRiskOfMethod:
    def setup_method(self):
        self.design = build_case_design(CaseSpec("A", 200), seed_stream(9, "design"))
        g0 = GaussMix([0.7, 0.3], [0.25, 1.0])
        self.family = lambda rng: draw_truth(g0, 200, [0.0], 1.0, rng)

    def test_oracle_method_has_zero_risk(self):
        rep = risk_of_method(lambda data, d, truth, rng: true_density(truth, d), self.family, self.design, 5, seed=1)
        assert abs(rep.mean) < 1e-10 and rep.se < 1e-10 and rep.failures == 0

    def test_uniform_prde_risk_is_a_n(self):
        def method(data, d, truth, rng):
            fit = known_fit(np.zeros(0), 1.0)
            return prde_density(Uniform(), aggregate_stats(data, d, fit.beta_hat, 1.0), fit, d)

        rep = risk_of_method(method, self.family, self.design, 50, seed=2)
        assert abs(rep.mean - a_n(self.design)) < 3 * rep.se

    def test_failures_are_counted(self):
        calls = iter(range(10))

        def method(data, d, truth, rng):
            if next(calls) % 2:
                raise ValueError("boom")
            return true_density(truth, d)

        rep = risk_of_method(method, self.family, self.design, 4, seed=3)
        assert rep.failures == 2 and rep.reps == 2

    def test_reproducible(self):
        def method(data, d, truth, rng):
            fit = known_fit(np.zeros(0), 1.0)
            return naive_plugin_density(aggregate_stats(data, d, fit.beta_hat, 1.0), fit, d)

        a = risk_of_method(method, self.family, self.design, 3, seed=4)
        b = risk_of_method(method, self.family, self.design, 3, seed=4)
        np.testing.assert_array_equal(a.losses, b.losses)


class TestBayesRisk:
    def test_point_mass_is_exact(self):
        d = build_case_design(CaseSpec("D", 100), seed_stream(10))
        g0 = Discrete([1.0], [0.0])
        m, se = bayes_risk(g0, d, 3)
        truth = ModelTruth(np.zeros(1), 1.0, np.zeros(100), g0)
        assert se == 0.0
        np.testing.assert_allclose(m, true_risk_decomposed(truth, d, g0).total, rtol=1e-14)

    def test_gaussian_expectation(self):
        # E[gamma^2] = tau cancels the quadratic term, leaving a_n plus the log part
        d = build_case_design(CaseSpec("A", 100), seed_stream(11))
        u2, v2 = d.u2[d.future_unit], d.v_future**2
        expect = a_n(d) + np.mean(gaussian_closed_form(1.0, 1.0, u2, v2))
        m, se = bayes_risk(GaussianScalar(1.0), d, 1000, seed=11)
        assert abs(m - expect) < 1e-3

    def test_quadrupling_reps_halves_se(self):
        d = build_case_design(CaseSpec("B", 100), seed_stream(12))
        _, se1 = bayes_risk(GaussianScalar(1.0), d, 200, seed=12)
        _, se4 = bayes_risk(GaussianScalar(1.0), d, 800, seed=13)
        assert abs(se1 / se4 / 2 - 1) < 0.2

    def test_improper_rejected(self):
        with pytest.raises(ValueError):
            bayes_risk(Uniform(), one_unit(1.0, 1.0), 2)


class TestOracleSelect:
    def test_singleton_class(self):
        d, truth = case_truth("A", 100, 14)
        res = oracle_select(ClassSpec("gaussian", grid=(0.7,)), truth, d)
        assert isinstance(res.g_hat, GaussianScalar) and res.g_hat.tau == 0.7

    def test_argmin_over_vertices(self):
        d, truth = case_truth("B", 300, 15)
        res = oracle_select(ClassSpec.gaussmix((0.1, 0.5, 2.0)), truth, d)
        best = res.risk_at_opt.total
        for nu in (0.1, 0.5, 2.0):
            assert best <= true_risk_decomposed(truth, d, GaussMix([1.0], [nu])).total + 1e-12

    def test_context_objective_matches_risk(self):
        d, truth = case_truth("C", 150, 16)
        prior = GaussMix([0.4, 0.6], [0.25, 1.0])
        ctx = OracleContext(truth, d)
        np.testing.assert_allclose(ctx.objective(prior).value(prior.weights), ctx.risk(prior).total, rtol=1e-12)

    def test_recovers_gaussian_scale(self):
        grid = tuple(np.geomspace(0.25, 4.0, 41).tolist())
        d = build_case_design(CaseSpec("A", 2000), seed_stream(17, "design"))
        hits = 0
        for r in range(50):
            truth = draw_truth(GaussianScalar(1.0), 2000, [0.0], 1.0, seed_stream(17, "truth", r))
            tau = oracle_select(ClassSpec("gaussian", grid=grid), truth, d).g_hat.tau
            hits += abs(tau - 1.0) <= 0.15
        assert hits >= 40
