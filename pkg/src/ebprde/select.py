"""Empirical-Bayes prior selection by minimizing an estimated (or oracle) risk.

Risk objectives for mixture classes have the form

    F(pi) = const + sum_r w+_r log(E+_r . pi) - sum_r w-_r log(E-_r . pi),

because both marginals are linear in the mixture weights.  The component
matrices E are computed once and the optimizer only multiplies by pi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimators import FitResult, SuffStats, aggregate_stats
from .fission import (DEFAULT_RB_NODES, FissionPlan, RiskBreakdown, a_n, build_fission_plan, default_scarce,
                      h_from_policy, risk_hat, surrogate_points)
from .lmm import Dataset, Design
from .priors import (A_BOX, ETA_BOX, Discrete, GaussianScalar, GaussMix, Prior, SpikeSlab, Uniform,
                     combined_sd, past_sd, prior_from_dict)


class SelectionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Objective and optimizers
# ---------------------------------------------------------------------------

def _stabilize(log_comp: np.ndarray, weights: np.ndarray):
    """Row-max shifted exponentials stored component-major, plus the shift's weighted sum."""
    top = log_comp.max(axis=1, keepdims=True)
    e = np.exp(log_comp - top).T.copy()
    return e, float(weights @ top[:, 0])


@dataclass(eq=False)
class MixtureObjective:
    """F(pi) = base + [c+ + w+ . log(pi E+)] - [c- + w- . log(pi E-)].

    ``E+`` and ``E-`` are (L, rows) arrays of row-max shifted component
    values, ``c+`` and ``c-`` the weighted sums of the shifts.
    """

    e_plus: np.ndarray
    w_plus: np.ndarray
    e_minus: np.ndarray
    w_minus: np.ndarray
    base: float
    c_plus: float = 0.0
    c_minus: float = 0.0

    @classmethod
    def from_log_components(cls, log_plus, w_plus, log_minus, w_minus, const=0.0) -> "MixtureObjective":
        log_plus = np.atleast_2d(log_plus)
        L = log_plus.shape[1]
        log_minus = np.asarray(log_minus).reshape(-1, L)
        w_plus = np.asarray(w_plus, float)
        w_minus = np.asarray(w_minus, float)
        e_p, c_p = _stabilize(log_plus, w_plus)
        e_m, c_m = _stabilize(log_minus, w_minus) if log_minus.size else (np.zeros((L, 0)), 0.0)
        return cls(e_p, w_plus, e_m, w_minus, float(const), c_p, c_m)

    @property
    def n_components(self) -> int:
        return int(self.e_plus.shape[0])

    @property
    def const(self) -> float:
        return self.base + self.c_plus - self.c_minus

    def parts(self, pi) -> tuple[float, float, float]:
        """(base, plus term, minus term) at ``pi``."""
        pi = np.asarray(pi, float)
        with np.errstate(divide="ignore"):
            plus = self.c_plus + self.w_plus @ np.log(pi @ self.e_plus)
            minus = self.c_minus + (self.w_minus @ np.log(pi @ self.e_minus) if self.w_minus.size else 0.0)
        return self.base, float(plus), float(minus)

    def value(self, pi) -> float:
        base, plus, minus = self.parts(pi)
        return base + plus - minus

    def value_and_grad(self, pi):
        pi = np.asarray(pi, float)
        mp = pi @ self.e_plus
        val = self.const + self.w_plus @ np.log(mp)
        grad = self.e_plus @ (self.w_plus / mp)
        if self.w_minus.size:
            mm = pi @ self.e_minus
            val -= self.w_minus @ np.log(mm)
            grad -= self.e_minus @ (self.w_minus / mm)
        return float(val), grad


@dataclass
class SelectionResult:
    g_hat: Prior
    risk_at_opt: RiskBreakdown | None
    trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = True
    objective: float = float("nan")

    def to_dict(self) -> dict:
        return {"g_hat": self.g_hat.to_dict(),
                "risk_at_opt": None if self.risk_at_opt is None else self.risk_at_opt.to_dict(),
                "trace": [float(t) for t in self.trace], "iterations": self.iterations,
                "converged": self.converged, "objective": self.objective}


def _renormalize(p):
    p = np.maximum(p, 0.0)
    return p / p.sum()


def fit_mixture_weights(template: GaussMix | Discrete, objective: MixtureObjective, init_weights=None,
                        max_iter: int = 500, tol: float = 1e-9) -> SelectionResult:
    """Exponentiated-gradient descent on the simplex with backtracking from step 1.

    The gradient is centered and scaled to unit sup-norm before the
    multiplicative update, so a unit step moves any log-weight ratio by at
    most one regardless of the objective's scale.
    """
    L = template.n_components
    if L == 0:
        raise SelectionError("empty mixture class")
    if objective.n_components != L:
        raise SelectionError("objective and template disagree on the number of components")
    pi = np.full(L, 1.0 / L) if init_weights is None else _renormalize(np.asarray(init_weights, float))
    val, grad = objective.value_and_grad(pi)
    if not math.isfinite(val):
        raise SelectionError("objective is not finite at the initial weights")
    trace = [val]
    converged = L == 1
    it = 0
    while not converged and it < max_iter:
        it += 1
        step = 1.0
        g = grad - grad.min()
        if g.max() > 0:
            g = g / g.max()
        while True:
            cand = _renormalize(pi * np.exp(-step * g))
            cval = objective.value(cand)
            if math.isnan(cval):
                raise SelectionError("objective became NaN")
            if cval <= val:
                break
            step *= 0.5
            if step < 1e-12:
                cand, cval = pi, val
                break
        decrease = val - cval
        pi = cand
        val, grad = objective.value_and_grad(pi)
        trace.append(val)
        if decrease < tol:
            converged = True
    return SelectionResult(template.with_weights(pi), None, trace, it, converged, val)


def fit_spike_slab(grid_eta, grid_a, context: "RiskContext", h: int = 1, scarce_mode: bool | None = None
                   ) -> SelectionResult:
    """Exhaustive grid search; ties go to smaller eta, then smaller a."""
    grid_eta = np.sort(np.asarray(grid_eta, float))
    grid_a = np.sort(np.asarray(grid_a, float))
    if grid_eta.size == 0 or grid_a.size == 0:
        raise SelectionError("empty spike-and-slab grid")
    best = None
    for a in grid_a:
        obj = context.objective(SpikeSlab(eta=0.5, a=float(a)), h, scarce_mode)
        for eta in grid_eta:
            val = obj.value(np.array([1.0 - eta, eta]))
            key = (val, eta, a)
            if best is None or key < best:
                best = key
    val, eta, a = best
    return SelectionResult(SpikeSlab(eta=float(eta), a=float(a)), None, [val], 1, True, val)


def fit_candidates(candidates, context: "RiskContext", h: int = 1, scarce_mode: bool | None = None
                   ) -> SelectionResult:
    """Argmin over an explicit list of priors (first one wins ties)."""
    if not candidates:
        raise SelectionError("empty candidate list")
    vals = [context.objective(p, h, scarce_mode).value(np.ones(1)) if p.proper
            else context.uniform_value(h, scarce_mode) for p in candidates]
    k = int(np.argmin(vals))
    return SelectionResult(candidates[k], None, [vals[k]], 1, True, vals[k])


# ---------------------------------------------------------------------------
# Estimated-risk context
# ---------------------------------------------------------------------------

class _SingleComponent:
    """Adapter giving a non-mixture prior a one-column component matrix."""

    def __init__(self, prior: Prior):
        self.prior = prior

    def component_log_conv(self, a, scale, sd):
        return self.prior.log_conv(a, scale, sd)[..., None]


def _components(prior: Prior):
    return prior if hasattr(prior, "component_log_conv") else _SingleComponent(prior)


class RiskContext:
    """Cached evaluation points of the estimated risk for one (design, stats, sigma).

    The reuse pairs are enumerated once at h = 1; objectives for larger h or
    scarce mode are row subsets of the same cache.
    """

    def __init__(self, design: Design, stats: SuffStats, sigma_hat: float | None = None,
                 nodes: int = DEFAULT_RB_NODES, legacy_sigma_noise: bool = False, plan: FissionPlan | None = None):
        self.design = design
        self.stats = stats
        self.sigma = stats.sigma_used if sigma_hat is None else float(sigma_hat)
        self.nodes = nodes
        self.legacy = legacy_sigma_noise
        self.plan = (plan.with_h(1) if plan is not None else build_fission_plan(design, 1))
        unit = design.future_unit
        v = design.v_future
        u = stats.u_agg[unit]
        self.r1_points = v * stats.z[unit]
        self.r1_scale = v / self.sigma
        self.r1_sd = past_sd(u, v)
        cs, pts = [], []
        for c, j, d in self.plan.pair_chunks():
            p, w = surrogate_points(stats.z[j], v[c], d, self.sigma, nodes, legacy_sigma_noise)
            cs.append(c)
            pts.append(p)
        self.gh_weights = w if pts else np.zeros(nodes)
        self.pair_coord = np.concatenate(cs) if cs else np.zeros(0, dtype=np.int64)
        self.r2_points = np.concatenate(pts) if pts else np.zeros((0, nodes))
        self.r2_scale = (v / self.sigma)[self.pair_coord]
        self.r2_sd = combined_sd(u, v)[self.pair_coord]
        self._cache: dict = {}

    def plan_for(self, h: int) -> FissionPlan:
        return self.plan if h == 1 else self.plan.with_h(h)

    def scarce_default(self) -> bool:
        return default_scarce(self.design)

    def _log_components(self, prior: Prior):
        key = (type(prior).__name__, tuple(np.ravel(list(_shape_key(prior)))))
        if key not in self._cache:
            comp = _components(prior)
            c1 = comp.component_log_conv(self.r1_points, self.r1_scale, self.r1_sd)
            c2 = comp.component_log_conv(self.r2_points, self.r2_scale[:, None], self.r2_sd[:, None])
            self._cache = {key: (c1, c2)}
        return self._cache[key]

    def _weights(self, h: int, scarce_mode: bool | None):
        if scarce_mode is None:
            scarce_mode = self.scarce_default()
        plan = self.plan_for(h)
        kappa = plan.kappa
        coords = plan.improved_coords if scarce_mode else np.arange(kappa)
        if coords.size == 0:
            raise SelectionError("scarce-mode objective needs a nonempty improved set")
        norm = coords.size
        w1 = np.zeros(kappa)
        w1[coords] = 1.0 / norm
        r2_norm = norm if scarce_mode else kappa
        keep = plan.improved[self.pair_coord]
        w2 = np.where(keep, 1.0 / (plan.sizes[self.pair_coord] * r2_norm), 0.0)
        return plan, coords if scarce_mode else None, w1, w2, scarce_mode

    def objective(self, prior: Prior, h: int = 1, scarce_mode: bool | None = None) -> MixtureObjective:
        """Objective in the weights of ``prior``'s components (fixed shape parameters)."""
        plan, coords, w1, w2, scarce_mode = self._weights(h, scarce_mode)
        c1, c2 = self._log_components(prior)
        rows1 = w1 > 0
        rows2 = w2 > 0
        L = c1.shape[-1]
        log_minus = c2[rows2].reshape(-1, L)
        w_minus = (w2[rows2][:, None] * self.gh_weights[None, :]).ravel()
        return MixtureObjective.from_log_components(c1[rows1], w1[rows1], log_minus, w_minus,
                                                    const=a_n(self.design, coords))

    def uniform_value(self, h: int = 1, scarce_mode: bool | None = None) -> float:
        plan, coords, *_ = self._weights(h, scarce_mode)
        return a_n(self.design, coords)

    def risk(self, prior: Prior, h: int = 1, scarce_mode: bool | None = None) -> RiskBreakdown:
        """Estimated risk of ``prior``; mixture priors reuse the cached component values."""
        if scarce_mode is None:
            scarce_mode = self.scarce_default()
        plan = self.plan_for(h)
        if not prior.proper or not hasattr(prior, "component_log_conv"):
            return risk_hat(prior, self.stats, plan, self.design, self.sigma, scarce_mode, self.nodes, self.legacy)
        base, plus, minus = self.objective(prior, h, scarce_mode).parts(prior.weights)
        return RiskBreakdown.from_parts(base, plus, minus, plan.h, scarce_mode, plan.D_n, plan.IF_n)


def _shape_key(prior: Prior):
    if isinstance(prior, GaussMix):
        return prior.variances
    if isinstance(prior, Discrete):
        return prior.support
    if isinstance(prior, SpikeSlab):
        return [prior.a]
    if isinstance(prior, GaussianScalar):
        return [prior.tau]
    return []


# ---------------------------------------------------------------------------
# Class definitions and the top-level selector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassSpec:
    """Candidate prior class.

    kind: "uniform", "gaussmix" (grid = variances), "discrete" (grid = support),
    "spikeslab" (grid_eta, grid_a) or "gaussian" (grid = candidate taus).
    """

    kind: str
    grid: tuple = ()
    grid_eta: tuple = ()
    grid_a: tuple = ()
    max_iter: int = 500
    tol: float = 1e-9

    def __post_init__(self):
        if self.kind not in ("uniform", "gaussmix", "discrete", "spikeslab", "gaussian"):
            raise SelectionError(f"unknown class kind {self.kind!r}")
        if self.kind in ("gaussmix", "discrete", "gaussian") and len(self.grid) == 0:
            raise SelectionError(f"class {self.kind!r} needs a nonempty grid")

    @classmethod
    def gaussmix(cls, variances=(0.25, 1.0), **kw) -> "ClassSpec":
        return cls("gaussmix", grid=tuple(float(v) for v in variances), **kw)

    @classmethod
    def spikeslab(cls, n_eta: int = 15, n_a: int = 15) -> "ClassSpec":
        eta = np.geomspace(*ETA_BOX, n_eta)
        a = np.geomspace(*A_BOX, n_a)
        return cls("spikeslab", grid_eta=tuple(eta.tolist()), grid_a=tuple(a.tolist()))

    def template(self) -> Prior:
        L = len(self.grid)
        if self.kind == "gaussmix":
            return GaussMix(np.full(L, 1.0 / L), np.array(self.grid))
        if self.kind == "discrete":
            return Discrete(np.full(L, 1.0 / L), np.array(self.grid))
        raise SelectionError(f"class {self.kind!r} has no mixture template")


def optimize(spec: ClassSpec, context, h: int = 1, scarce_mode: bool | None = None) -> SelectionResult:
    """Minimize ``context.objective`` over the class (works for estimated and oracle contexts)."""
    if spec.kind == "uniform":
        val = context.uniform_value(h, scarce_mode)
        return SelectionResult(Uniform(), None, [val], 0, True, val)
    if spec.kind in ("gaussmix", "discrete"):
        template = spec.template()
        obj = context.objective(template, h, scarce_mode)
        return fit_mixture_weights(template, obj, max_iter=spec.max_iter, tol=spec.tol)
    if spec.kind == "spikeslab":
        return fit_spike_slab(spec.grid_eta, spec.grid_a, context, h, scarce_mode)
    return fit_candidates([GaussianScalar(float(t)) for t in spec.grid], context, h, scarce_mode)


def select(spec: ClassSpec, dataset: Dataset, design: Design, fit: FitResult, h_policy="1",
           scarce_mode: bool | None = None, nodes: int = DEFAULT_RB_NODES, context: RiskContext | None = None
           ) -> SelectionResult:
    """Fit the empirical-Bayes prior and report its estimated risk."""
    if context is None:
        stats = aggregate_stats(dataset, design, fit.beta_hat, fit.sigma_hat)
        context = RiskContext(design, stats, fit.sigma_hat, nodes)
    h = h_from_policy(h_policy, design.n)
    if scarce_mode is None:
        scarce_mode = context.scarce_default()
    plan = context.plan_for(h)
    if scarce_mode and plan.n_improved == 0:
        # nothing can be reused: every coordinate keeps the flat-prior predictive
        risk = RiskBreakdown.from_parts(a_n(design), 0.0, 0.0, h, True, plan.D_n, plan.IF_n)
        return SelectionResult(Uniform(), risk, [risk.total], 0, True, risk.total)
    res = optimize(spec, context, h, scarce_mode)
    res.risk_at_opt = context.risk(res.g_hat, h, scarce_mode)
    return res


def selection_from_dict(data: dict) -> SelectionResult:
    risk = data.get("risk_at_opt")
    return SelectionResult(prior_from_dict(data["g_hat"]), None if risk is None else RiskBreakdown(**risk),
                           list(data["trace"]), int(data["iterations"]), bool(data["converged"]),
                           float(data["objective"]))
