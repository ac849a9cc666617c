"""Sample-reuse (fission) risk estimation.

For a future coordinate c = (i, k) with weight v, the unobservable statistic

    W~_c = (u_i^2 Z_i + v^2 Z~_c) / (u_i^2 + v^2) * v,   W~_c | gamma_i ~ N(v gamma_i / sigma, v^2 / (u_i^2 + v^2))

is replaced by surrogates built from other units j whose past precision is
large enough, u_j^2 >= u_i^2 + v^2:

    W^_cj = v Z_j + sqrt(d_cj) zeta,   d_cj = v^2 (1 / (u_i^2 + v^2) - 1 / u_j^2) >= 0,

which has exactly the variance of W~_c.  The noise is integrated out with
Gauss-Hermite quadrature instead of being sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .estimators import SuffStats
from .lmm import CaseSpec, Design, build_case_design
from .priors import Prior, combined_sd, hermite_nodes, past_sd
from .rng import seed_stream

DEFAULT_RB_NODES = 21
PAIR_CHUNK = 1 << 17
H_POLICIES = ("1", "log", "n^0.25", "n^0.5")


class PlanError(ValueError):
    pass


def h_from_policy(policy: str | int, n: int) -> int:
    """Quantize a threshold policy: h_n = max(1, floor(policy(n)))."""
    if isinstance(policy, (int, np.integer)):
        raw = float(policy)
    elif policy == "log":
        raw = math.log(n)
    elif policy == "n^0.25":
        raw = n**0.25
    elif policy == "n^0.5":
        raw = math.sqrt(n)
    else:
        try:
            raw = float(int(policy))
        except ValueError:
            raise PlanError(f"unknown h policy {policy!r}; use an integer or one of {H_POLICIES}") from None
    return max(1, int(math.floor(raw + 1e-12)))


def default_scarce(design: Design) -> bool:
    n = design.n
    return n * design.eta < math.sqrt(n)


def a_n(design: Design, coords: np.ndarray | None = None) -> float:
    """(2 kappa)^-1 sum_c log(1 + v_c^2 / u_i^2), optionally over a coordinate subset."""
    ratio = design.v_future**2 / design.u2[design.future_unit]
    terms = 0.5 * np.log1p(ratio)
    if coords is not None:
        terms = terms[coords]
    if terms.size == 0:
        return 0.0
    return math.fsum(terms) / terms.size


@dataclass(frozen=True, eq=False)
class FissionPlan:
    """Reuse sets in compressed form.

    Units are sorted by u_j^2; S_c is the tail ``order[start[c]:]`` of that
    ordering, so only the start offset per coordinate is stored.
    """

    h: int
    coord_unit: np.ndarray
    v2: np.ndarray
    u2: np.ndarray
    order: np.ndarray
    start: np.ndarray
    sizes: np.ndarray
    improved: np.ndarray
    D_n: float
    IF_n: float

    @property
    def kappa(self) -> int:
        return int(self.coord_unit.size)

    @property
    def n_improved(self) -> int:
        return int(self.improved.sum())

    @property
    def improved_coords(self) -> np.ndarray:
        return np.flatnonzero(self.improved)

    @property
    def n_pairs(self) -> int:
        return int(self.sizes[self.improved].sum())

    def threshold(self, c) -> np.ndarray:
        return self.u2[self.coord_unit[c]] + self.v2[c]

    def members(self, c: int) -> np.ndarray:
        return self.order[self.start[c]:]

    def coefficients(self, c: int) -> np.ndarray:
        return self.v2[c] * (1.0 / self.threshold(c) - 1.0 / self.u2[self.members(c)])

    def with_h(self, h: int) -> "FissionPlan":
        if h < 1:
            raise PlanError("h must be at least 1")
        improved, D, IF = _diagnostics(self.sizes, h)
        return FissionPlan(h, self.coord_unit, self.v2, self.u2, self.order, self.start, self.sizes,
                           improved, D, IF)

    def pair_chunks(self, coords: np.ndarray | None = None, max_pairs: int = PAIR_CHUNK
                    ) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Yield (coordinate, reused unit j, d_cj) triples for the given coordinates.

        Defaults to the improved set.  Chunks hold at most ``max_pairs`` pairs
        unless a single coordinate alone is larger.
        """
        coords = self.improved_coords if coords is None else np.asarray(coords)
        sizes = self.sizes[coords]
        csum = np.cumsum(sizes)
        lo = 0
        while lo < coords.size:
            base = csum[lo - 1] if lo else 0
            hi = int(np.searchsorted(csum, base + max_pairs, side="right"))
            hi = max(hi, lo + 1)
            cs, sz = coords[lo:hi], sizes[lo:hi]
            c_rep = np.repeat(cs, sz)
            first = np.repeat(np.cumsum(sz) - sz, sz)
            pos = np.repeat(self.start[cs], sz) + (np.arange(c_rep.size) - first)
            j = self.order[pos]
            d = self.v2[c_rep] * (1.0 / self.threshold(c_rep) - 1.0 / self.u2[j])
            yield c_rep, j, d
            lo = hi

    def summary(self) -> dict:
        edges = [0, 1, 2, 10, 100, 1000, 10000]
        counts = np.histogram(self.sizes, bins=edges + [np.inf])[0]
        hist = {f"[{lo},{hi})": int(c) for lo, hi, c in zip(edges, edges[1:] + ["inf"], counts)}
        return {"h": self.h, "kappa": self.kappa, "n_improved": self.n_improved, "D_n": self.D_n,
                "IF_n": self.IF_n, "set_size_histogram": hist}


def _diagnostics(sizes: np.ndarray, h: int):
    improved = sizes >= h
    kappa = sizes.size
    D = math.fsum(1.0 / sizes[improved]) / kappa if kappa else 0.0
    IF = improved.sum() / kappa if kappa else 0.0
    return improved, D, float(IF)


def build_fission_plan(design: Design, h: int = 1) -> FissionPlan:
    if h < 1:
        raise PlanError("h must be at least 1")
    u2 = design.u2
    order = np.argsort(u2, kind="stable")
    sorted_u2 = u2[order]
    coord_unit = design.future_unit
    v2 = design.v_future**2
    start = np.searchsorted(sorted_u2, u2[coord_unit] + v2, side="left")
    sizes = design.n - start
    improved, D, IF = _diagnostics(sizes, h)
    return FissionPlan(int(h), coord_unit, v2, u2, order, start, sizes, improved, D, IF)


# ---------------------------------------------------------------------------
# Estimated risk components
# ---------------------------------------------------------------------------

def _sigma(stats: SuffStats, sigma_hat):
    return stats.sigma_used if sigma_hat is None else float(sigma_hat)


def r1_terms(prior: Prior, stats: SuffStats, design: Design, sigma_hat=None) -> np.ndarray:
    """Per-coordinate log m_g(v Z_i; u_i, v, sigma)."""
    sigma = _sigma(stats, sigma_hat)
    unit = design.future_unit
    v = design.v_future
    u = stats.u_agg[unit]
    return prior.log_conv(v * stats.z[unit], v / sigma, past_sd(u, v))


def r1_hat(prior: Prior, stats: SuffStats, design: Design, sigma_hat=None, coords=None) -> float:
    if not prior.proper:
        return 0.0
    terms = r1_terms(prior, stats, design, sigma_hat)
    if coords is not None:
        terms = terms[coords]
    return math.fsum(terms) / terms.size if terms.size else 0.0


def surrogate_points(z_j, v, d, sigma_hat, nodes: int = DEFAULT_RB_NODES, legacy_sigma_noise: bool = False):
    """Gauss-Hermite evaluation points of W^ = v z_j + sqrt(d) zeta, shape (..., nodes)."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("fission noise coefficient must be nonnegative")
    x, w = hermite_nodes(nodes)
    noise = np.sqrt(d)
    if legacy_sigma_noise:
        noise = noise * sigma_hat
    pts = (np.asarray(v) * np.asarray(z_j))[..., None] + noise[..., None] * x
    return pts, w


def rb_surrogate_term(prior: Prior, z_j, u_i, v, sigma_hat, d, nodes: int = DEFAULT_RB_NODES,
                      legacy_sigma_noise: bool = False):
    """E_zeta log m~_g(v z_j + sqrt(d) zeta; u_i, v, sigma_hat), zeta ~ N(0, 1)."""
    pts, w = surrogate_points(z_j, v, d, sigma_hat, nodes, legacy_sigma_noise)
    u_i, v = np.asarray(u_i, float), np.asarray(v, float)
    vals = prior.log_conv(pts, (v / sigma_hat)[..., None], combined_sd(u_i, v)[..., None])
    return vals @ w


def r2_terms(prior: Prior, stats: SuffStats, plan: FissionPlan, design: Design, sigma_hat=None,
             nodes: int = DEFAULT_RB_NODES, legacy_sigma_noise: bool = False) -> np.ndarray:
    """Per-coordinate r^_c = |S_c|^-1 sum_j E_zeta log m~; zero outside the improved set."""
    sigma = _sigma(stats, sigma_hat)
    out = np.zeros(plan.kappa)
    v = design.v_future
    for c, j, d in plan.pair_chunks():
        vals = rb_surrogate_term(prior, stats.z[j], stats.u_agg[plan.coord_unit[c]], v[c], sigma, d,
                                 nodes, legacy_sigma_noise)
        out += np.bincount(c, weights=vals, minlength=plan.kappa)
    sizes = np.maximum(plan.sizes, 1)
    return np.where(plan.improved, out / sizes, 0.0)


def r2_hat(prior: Prior, stats: SuffStats, plan: FissionPlan, design: Design, sigma_hat=None,
           nodes: int = DEFAULT_RB_NODES, legacy_sigma_noise: bool = False, normalizer: int | None = None) -> float:
    if not prior.proper or plan.n_improved == 0:
        return 0.0
    terms = r2_terms(prior, stats, plan, design, sigma_hat, nodes, legacy_sigma_noise)
    norm = plan.kappa if normalizer is None else normalizer
    return math.fsum(terms[plan.improved]) / norm


@dataclass(frozen=True)
class RiskBreakdown:
    a_n: float
    r1_hat: float
    r2_hat: float
    total: float
    h_used: int
    scarce_mode: bool
    D_n: float
    IF_n: float

    @classmethod
    def from_parts(cls, a, r1, r2, h, scarce, D, IF) -> "RiskBreakdown":
        return cls(float(a), float(r1), float(r2), float(a + r1 - r2), int(h), bool(scarce), float(D), float(IF))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def risk_hat(prior: Prior, stats: SuffStats, plan: FissionPlan, design: Design, sigma_hat=None,
             scarce_mode: bool | None = None, nodes: int = DEFAULT_RB_NODES,
             legacy_sigma_noise: bool = False) -> RiskBreakdown:
    """Estimated predictive KL risk a_n + R^_1 - R^_2.

    In scarce mode every term is restricted to the improved set and averaged
    over it, estimating the risk of the prde that shrinks only there.
    """
    if scarce_mode is None:
        scarce_mode = default_scarce(design)
    coords = plan.improved_coords if scarce_mode else None
    if scarce_mode and coords.size == 0:
        raise PlanError("scarce-mode risk needs a nonempty improved set")
    a = a_n(design, coords)
    r1 = r1_hat(prior, stats, design, sigma_hat, coords)
    norm = coords.size if scarce_mode else plan.kappa
    r2 = r2_hat(prior, stats, plan, design, sigma_hat, nodes, legacy_sigma_noise, normalizer=norm)
    return RiskBreakdown.from_parts(a, r1, r2, plan.h, scarce_mode, plan.D_n, plan.IF_n)


# ---------------------------------------------------------------------------
# Diagnostic curves
# ---------------------------------------------------------------------------

def diagnostics_curve(design_family: str | Callable[[int, np.random.Generator], Design], n_grid, h_policy="1",
                      reps: int = 20, seed: int = 0) -> list[dict]:
    """Mean D_n(h_n) and IF_n(h_n) per n, over ``reps`` freshly drawn designs."""
    if isinstance(design_family, str):
        case_id = design_family

        def design_family(n, rng):
            return build_case_design(CaseSpec(case_id, n), rng)
        label = case_id
    else:
        label = getattr(design_family, "__name__", "custom")
    rows = []
    for n in n_grid:
        h = h_from_policy(h_policy, n)
        D = np.empty(reps)
        IF = np.empty(reps)
        for r in range(reps):
            design = design_family(n, seed_stream(seed, "design", label, n, r))
            plan = build_fission_plan(design, h)
            D[r], IF[r] = plan.D_n, plan.IF_n
        se = (lambda a: float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0)
        rows.append({"n": int(n), "h": h, "D_n": float(D.mean()), "D_n_se": se(D),
                     "IF_n": float(IF.mean()), "IF_n_se": se(IF), "reps": reps})
    return rows
