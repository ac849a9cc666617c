"""Empirical-Bayes predictive densities for linear mixed models under covariate shift."""

from .baselines import EmFit, gmodel_em, gmodel_plugin_density, naive_plugin_density, prde_density
from .estimators import (FitResult, SuffStats, aggregate_stats, batched_fit, contrast_fit, known_fit,
                         select_estimator)
from .fission import (FissionPlan, RiskBreakdown, a_n, build_fission_plan, diagnostics_curve, r1_hat, r2_hat,
                      rb_surrogate_term, risk_hat)
from .lmm import CaseSpec, Dataset, Design, ModelTruth, build_case_design, draw_truth, simulate
from .oracle import (bayes_risk, gaussian_closed_form, kl_loss_prde, oracle_select, risk_of_method,
                     true_risk_decomposed)
from .priors import (Discrete, GaussianScalar, GaussMix, SpikeSlab, Uniform, gh_convolve, log_marginal_m,
                     log_marginal_m_tilde, posterior_predictive_logpdf)
from .rng import seed_stream
from .select import ClassSpec, SelectionResult, fit_mixture_weights, fit_spike_slab, select

__all__ = [
    "EmFit", "gmodel_em", "gmodel_plugin_density", "naive_plugin_density", "prde_density",
    "FitResult", "SuffStats", "aggregate_stats", "batched_fit", "contrast_fit", "known_fit", "select_estimator",
    "FissionPlan", "RiskBreakdown", "a_n", "build_fission_plan", "diagnostics_curve", "r1_hat", "r2_hat",
    "rb_surrogate_term", "risk_hat",
    "CaseSpec", "Dataset", "Design", "ModelTruth", "build_case_design", "draw_truth", "simulate",
    "bayes_risk", "gaussian_closed_form", "kl_loss_prde", "oracle_select", "risk_of_method", "true_risk_decomposed",
    "Discrete", "GaussianScalar", "GaussMix", "SpikeSlab", "Uniform", "gh_convolve", "log_marginal_m",
    "log_marginal_m_tilde", "posterior_predictive_logpdf",
    "seed_stream",
    "ClassSpec", "SelectionResult", "fit_mixture_weights", "fit_spike_slab", "select",
]
__version__ = "0.1.0"
