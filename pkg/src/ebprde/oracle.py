"""Ground-truth risk evaluation by quadrature, Bayes benchmarks and oracle selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fission import FissionPlan, RiskBreakdown, a_n
from .lmm import Dataset, Design, ModelTruth, simulate
from .priors import (Discrete, GaussianScalar, GaussMix, Prior, combined_sd, hermite_nodes,
                     norm_logpdf, past_sd)
from .rng import seed_stream
from .select import ClassSpec, MixtureObjective, SelectionResult, _components, optimize

DEFAULT_NODES = 61


def _coord_arrays(truth: ModelTruth, design: Design):
    unit = design.future_unit
    v = design.v_future
    u = design.u_agg[unit]
    mean = v * truth.gamma[unit] / truth.sigma
    return u, v, mean


def risk_points(truth: ModelTruth, design: Design, nodes: int = DEFAULT_NODES):
    """Quadrature points of v Z_i | gamma_i and W~_c | gamma_i, shape (kappa, nodes)."""
    x, w = hermite_nodes(nodes)
    u, v, mean = _coord_arrays(truth, design)
    past_pts = mean[:, None] + past_sd(u, v)[:, None] * x
    comb_pts = mean[:, None] + combined_sd(u, v)[:, None] * x
    return past_pts, comb_pts, w, u, v


def true_risk_terms(truth: ModelTruth, design: Design, prior: Prior, nodes: int = DEFAULT_NODES):
    """Per-coordinate (a_c, R1_c, R2_c) at the true (beta, sigma, gamma)."""
    u, v, _ = _coord_arrays(truth, design)
    a_terms = 0.5 * np.log1p(v * v / (u * u))
    if not prior.proper:
        zero = np.zeros_like(a_terms)
        return a_terms, zero, zero
    past_pts, comb_pts, w, u, v = risk_points(truth, design, nodes)
    scale = (v / truth.sigma)[:, None]
    r1 = prior.log_conv(past_pts, scale, past_sd(u, v)[:, None]) @ w
    r2 = prior.log_conv(comb_pts, scale, combined_sd(u, v)[:, None]) @ w
    return a_terms, r1, r2


def true_risk_decomposed(truth: ModelTruth, design: Design, prior: Prior, nodes: int = DEFAULT_NODES,
                         coords: np.ndarray | None = None) -> RiskBreakdown:
    """a_n + R_1 - R_2, optionally restricted to (and averaged over) ``coords``."""
    a, r1, r2 = true_risk_terms(truth, design, prior, nodes)
    if coords is not None:
        a, r1, r2 = a[coords], r1[coords], r2[coords]
    k = a.size
    mean = (lambda t: math.fsum(t) / k if k else 0.0)
    return RiskBreakdown.from_parts(mean(a), mean(r1), mean(r2), 0, coords is not None, 0.0, 0.0)


def gaussian_closed_form(tau, gamma, u2, v2, sigma=1.0):
    """R_1 - R_2 per coordinate for the prior N(0, tau).

    -1/2 log[(tau' + u^-2)(u^2 + v^2) / (tau'(u^2 + v^2) + 1)]
        + 1/2 v^2 (gamma'^2 - tau') / ((tau' u^2 + 1)(tau'(u^2 + v^2) + 1))

    with tau' = tau / sigma^2 and gamma' = gamma / sigma.
    """
    tau = np.asarray(tau, float) / sigma**2
    g = np.asarray(gamma, float) / sigma
    u2 = np.asarray(u2, float)
    v2 = np.asarray(v2, float)
    s = u2 + v2
    logpart = -0.5 * np.log((tau + 1.0 / u2) * s / (tau * s + 1.0))
    quad = 0.5 * v2 * (g * g - tau) / ((tau * u2 + 1.0) * (tau * s + 1.0))
    return logpart + quad


def kl_loss_terms(density: Callable, truth: ModelTruth, design: Design, nodes: int = DEFAULT_NODES) -> np.ndarray:
    """Per-coordinate KL(true future density || prde), by Gauss-Hermite in y~."""
    x, w = hermite_nodes(nodes)
    unit = design.future_unit
    beta = truth.beta if design.d else np.zeros(0)
    mean = design.x_future @ beta + design.v_future * truth.gamma[unit]
    y = mean[:, None] + truth.sigma * x
    logq = density(y)
    if not np.all(np.isfinite(logq)):
        raise FloatingPointError("prde returned non-finite log-density on the quadrature range")
    logp = norm_logpdf(y, mean[:, None], truth.sigma)
    return (logp - logq) @ w


def kl_loss_prde(density: Callable, truth: ModelTruth, design: Design, nodes: int = DEFAULT_NODES) -> float:
    terms = kl_loss_terms(density, truth, design, nodes)
    return math.fsum(terms) / terms.size


# ---------------------------------------------------------------------------
# Monte Carlo risk
# ---------------------------------------------------------------------------

@dataclass
class RiskReport:
    mean: float
    se: float
    reps: int
    failures: int = 0
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bayes: float | None = None

    @property
    def excess(self) -> float | None:
        return None if self.bayes is None else self.mean - self.bayes


def mean_se(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        return float("nan"), float("nan")
    se = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0
    return math.fsum(a) / a.size, se


def risk_of_method(method: Callable[[Dataset, Design, ModelTruth, np.random.Generator], Callable],
                   truth_family: Callable[[np.random.Generator], ModelTruth], design: Design, reps: int,
                   seed: int, nodes: int = DEFAULT_NODES, label: str = "method") -> RiskReport:
    """Average KL loss of ``method`` over simulated datasets.

    ``method(dataset, design, truth, rng)`` returns a prde callback; the truth is
    passed only so oracle-type methods can be expressed, regular methods must
    ignore it.  Failing replications are counted and excluded.
    """
    if reps < 2:
        raise ValueError("need at least two replications")
    losses, failures = [], 0
    for r in range(reps):
        truth = truth_family(seed_stream(seed, label, "truth", r))
        data = simulate(design, truth, seed_stream(seed, label, "data", r))
        try:
            density = method(data, design, truth, seed_stream(seed, label, "method", r))
            losses.append(kl_loss_prde(density, truth, design, nodes))
        except (ValueError, FloatingPointError, ArithmeticError):
            failures += 1
    m, se = mean_se(losses)
    return RiskReport(m, se, len(losses), failures, np.asarray(losses))


def bayes_risk(g0: Prior, design: Design, reps: int, nodes: int = DEFAULT_NODES, seed: int = 0,
               sigma: float = 1.0, beta=None) -> tuple[float, float]:
    """Mean and MC SE over gamma ~ g0 of the true risk of the Bayes prde under g0."""
    if not g0.proper:
        raise ValueError("Bayes risk needs a proper g0")
    beta = np.zeros(max(design.d, 1)) if beta is None else beta
    vals = []
    for r in range(reps):
        gamma = g0.sample(seed_stream(seed, "bayes_risk", r), design.n)
        truth = ModelTruth(beta, sigma, gamma, g0)
        vals.append(true_risk_decomposed(truth, design, g0, nodes).total)
    return mean_se(vals)


# ---------------------------------------------------------------------------
# g0-averaged targets
# ---------------------------------------------------------------------------

def _expected_log_conv(prior: Prior, g0: Prior, scale, sd_point, sd_eval, nodes: int):
    """E log conv_prior(A) where A = scale * gamma + sd_point * N(0,1), gamma ~ g0."""
    x, w = hermite_nodes(nodes)
    scale = np.asarray(scale, float)[..., None]
    sd_point = np.asarray(sd_point, float)[..., None]
    sd_eval = np.asarray(sd_eval, float)[..., None]

    def at(mean, sd):
        return prior.log_conv(mean + sd * x, scale, sd_eval) @ w

    if isinstance(g0, GaussianScalar):
        return at(0.0, np.sqrt(scale**2 * g0.tau + sd_point**2))
    if isinstance(g0, GaussMix):
        return sum(wl * at(0.0, np.sqrt(scale**2 * nu + sd_point**2))
                   for wl, nu in zip(g0.weights, g0.variances) if wl > 0)
    if isinstance(g0, Discrete):
        return sum(wl * at(scale * t, sd_point) for wl, t in zip(g0.weights, g0.support) if wl > 0)
    raise TypeError(f"g0-averaged targets are not implemented for {type(g0).__name__}")


def expected_r2_target(prior: Prior, g0: Prior, plan: FissionPlan, design: Design, sigma: float,
                       nodes: int = DEFAULT_NODES, normalizer: int | None = None) -> float:
    """kappa^-1 sum over the improved set of E_{gamma ~ g0} E log m~_g(W~_c | gamma).

    The fission estimator of R_2 is unbiased for this exchangeable target.
    """
    coords = plan.improved_coords
    if coords.size == 0:
        return 0.0
    unit = design.future_unit[coords]
    v = design.v_future[coords]
    u = design.u_agg[unit]
    sd = combined_sd(u, v)
    vals = _expected_log_conv(prior, g0, v / sigma, sd, sd, nodes)
    norm = plan.kappa if normalizer is None else normalizer
    return math.fsum(vals) / norm


def expected_r1_target(prior: Prior, g0: Prior, design: Design, sigma: float, nodes: int = DEFAULT_NODES) -> float:
    unit = design.future_unit
    v = design.v_future
    u = design.u_agg[unit]
    sd = past_sd(u, v)
    vals = _expected_log_conv(prior, g0, v / sigma, sd, sd, nodes)
    return math.fsum(vals) / vals.size


# ---------------------------------------------------------------------------
# Oracle selection
# ---------------------------------------------------------------------------

class OracleContext:
    """True-risk objective with the same interface as the estimated-risk context."""

    def __init__(self, truth: ModelTruth, design: Design, nodes: int = DEFAULT_NODES,
                 coords: np.ndarray | None = None):
        self.truth = truth
        self.design = design
        past_pts, comb_pts, w, u, v = risk_points(truth, design, nodes)
        if coords is not None:
            past_pts, comb_pts, u, v = past_pts[coords], comb_pts[coords], u[coords], v[coords]
        self.coords = coords
        k = u.size
        self.k = k
        self.points = (past_pts, comb_pts)
        self.scale = (v / truth.sigma)[:, None]
        self.sds = (past_sd(u, v)[:, None], combined_sd(u, v)[:, None])
        self.row_weights = np.tile(w / k, k)

    def uniform_value(self, h: int = 1, scarce_mode=None) -> float:
        return a_n(self.design, self.coords)

    def objective(self, prior: Prior, h: int = 1, scarce_mode=None) -> MixtureObjective:
        comp = _components(prior)
        c1 = comp.component_log_conv(self.points[0], self.scale, self.sds[0])
        c2 = comp.component_log_conv(self.points[1], self.scale, self.sds[1])
        L = c1.shape[-1]
        return MixtureObjective.from_log_components(c1.reshape(-1, L), self.row_weights, c2.reshape(-1, L),
                                                    self.row_weights, const=self.uniform_value())

    def risk(self, prior: Prior, h: int = 1, scarce_mode=None) -> RiskBreakdown:
        return true_risk_decomposed(self.truth, self.design, prior, coords=self.coords)


def oracle_select(spec: ClassSpec, truth: ModelTruth, design: Design, nodes: int = DEFAULT_NODES,
                  coords: np.ndarray | None = None) -> SelectionResult:
    ctx = OracleContext(truth, design, nodes, coords)
    res = optimize(spec, ctx)
    res.risk_at_opt = ctx.risk(res.g_hat)
    return res
