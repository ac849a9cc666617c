"""Predictive densities: the empirical-Bayes prde and the two plug-in competitors.

A prde is represented as a callback ``density(y)`` taking an array of future
responses with one row per future coordinate (any number of columns) and
returning log-densities of the same shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .estimators import FitResult, SuffStats
from .lmm import Design
from .priors import GaussMix, Prior, Uniform, _check_simplex, norm_logpdf, posterior_predictive_logpdf

DensityFn = Callable[[np.ndarray], np.ndarray]


class EmError(ValueError):
    pass


def _future_offset(design: Design, fit: FitResult) -> np.ndarray:
    if design.d == 0:
        return np.zeros(design.kappa)
    return design.x_future @ fit.beta_hat


def prde_density(prior: Prior, stats: SuffStats, fit: FitResult, design: Design,
                 shrink: np.ndarray | None = None) -> DensityFn:
    """Bayes predictive under ``prior`` with plug-in (beta, sigma).

    Coordinates where ``shrink`` is False get the flat-prior predictive
    N(x~'beta + v sigma z, sigma^2 (1 + v^2/u^2)) instead.
    """
    unit = design.future_unit
    z = stats.z[unit][:, None]
    u = stats.u_agg[unit][:, None]
    v = design.v_future[:, None]
    offset = _future_offset(design, fit)[:, None]
    sigma = fit.sigma_hat
    mask = None if shrink is None else np.asarray(shrink, bool)[:, None]

    def density(y):
        y = np.asarray(y, dtype=float)
        if mask is None or not prior.proper:
            return posterior_predictive_logpdf(prior, z, u, v, sigma, y, offset)
        flat = posterior_predictive_logpdf(Uniform(), z, u, v, sigma, y, offset)
        rows = mask[:, 0]
        out = flat.copy()
        if rows.any():
            out[rows] = posterior_predictive_logpdf(prior, z[rows], u[rows], v[rows], sigma, y[rows], offset[rows])
        return out

    return density


def naive_plugin_density(stats: SuffStats, fit: FitResult, design: Design) -> DensityFn:
    """Plug in gamma^_i = sigma^ Z_i and predict with N(x~'beta^ + v gamma^_i, sigma^)."""
    unit = design.future_unit
    gamma_hat = fit.sigma_hat * stats.z[unit]
    mean = (_future_offset(design, fit) + design.v_future * gamma_hat)[:, None]
    sigma = fit.sigma_hat

    def density(y):
        return norm_logpdf(np.asarray(y, dtype=float), mean, sigma)

    return density


@dataclass
class EmFit:
    weights: np.ndarray
    variance_grid: np.ndarray
    loglik: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def __post_init__(self):
        self.weights = _check_simplex(self.weights, "EmFit")

    def prior(self) -> GaussMix:
        return GaussMix(self.weights, self.variance_grid)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "variance_grid": self.variance_grid.tolist(),
                "loglik": [float(x) for x in self.loglik], "iterations": self.iterations,
                "converged": self.converged}


def gmodel_em(gamma_tilde, tau2, variance_grid=(0.25, 1.0), tol: float = 1e-8, max_iter: int = 500) -> EmFit:
    """EM for the weights of sum_l pi_l N(0, nu_l) from gamma~_i ~ N(gamma_i, tau_i^2)."""
    grid = np.asarray(variance_grid, dtype=float).ravel()
    if grid.size == 0:
        raise EmError("empty variance grid")
    x = np.asarray(gamma_tilde, dtype=float).ravel()
    t2 = np.broadcast_to(np.asarray(tau2, dtype=float), x.shape)
    if np.any(~(t2 > 0)):
        raise EmError("tau2 must be positive")
    logc = norm_logpdf(x[:, None], 0.0, np.sqrt(grid[None, :] + t2[:, None]))
    pi = np.full(grid.size, 1.0 / grid.size)

    def loglik(p):
        with np.errstate(divide="ignore"):
            return float(np.sum(logsumexp(logc + np.log(p), axis=1)))

    trace = [loglik(pi)]
    if not math.isfinite(trace[0]):
        raise EmError("non-finite marginal likelihood")
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        with np.errstate(divide="ignore"):
            joint = logc + np.log(pi)
        resp = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
        pi = resp.mean(axis=0)
        pi = pi / pi.sum()
        ll = loglik(pi)
        if math.isnan(ll):
            raise EmError("marginal likelihood became NaN")
        trace.append(ll)
        if abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
    return EmFit(pi, grid, trace, it, converged)


def gmodel_fit(stats: SuffStats, fit: FitResult, variance_grid=(0.25, 1.0), **kw) -> EmFit:
    gamma_tilde = fit.sigma_hat * stats.z
    tau2 = fit.sigma_hat**2 / stats.u_agg**2
    return gmodel_em(gamma_tilde, tau2, variance_grid, **kw)


def gmodel_plugin_density(emfit: EmFit, stats: SuffStats, fit: FitResult, design: Design) -> DensityFn:
    return prde_density(emfit.prior(), stats, fit, design)
