"""Mixed-model domain types, simulation, and the A-F covariate regimes.

Layout convention: past observations are stored flat in unit-major order
(unit 0's replicates first, then unit 1's, ...) together with the per-unit
replicate counts ``k_past``.  Future observations use the same scheme with
``k_future``.  A "coordinate" is one future observation (i, k); there are
``kappa = sum(k_future)`` of them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy.special import ndtr

from .priors import Prior, Uniform, prior_from_dict

CASE_IDS = ("A", "B", "C", "D", "E", "F")
REJECTION_CAP = 10**6


class DesignError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Design:
    u_past: np.ndarray
    k_past: np.ndarray
    v_future: np.ndarray
    k_future: np.ndarray
    x_past: np.ndarray | None = None
    x_future: np.ndarray | None = None
    u_agg: np.ndarray = field(init=False)
    u2_agg: np.ndarray = field(init=False)

    def __post_init__(self):
        u = np.asarray(self.u_past, dtype=float)
        v = np.asarray(self.v_future, dtype=float)
        kp = np.asarray(self.k_past, dtype=np.int64)
        kf = np.asarray(self.k_future, dtype=np.int64)
        if kp.ndim != 1 or kp.shape != kf.shape or kp.size == 0:
            raise DesignError("k_past and k_future must be 1-d arrays of equal positive length")
        if np.any(kp < 1) or np.any(kf < 1):
            raise DesignError("every unit needs at least one past and one future observation")
        if u.shape != (kp.sum(),) or v.shape != (kf.sum(),):
            raise DesignError("weight arrays do not match replicate counts")
        for name, w in (("u", u), ("v", v)):
            if not np.all(np.isfinite(w)) or np.any(w <= 0):
                raise DesignError(f"all {name} weights must be finite and strictly positive")
        xp, xf = self.x_past, self.x_future
        if (xp is None) != (xf is None):
            raise DesignError("x_past and x_future must both be given or both omitted")
        if xp is not None:
            xp = np.asarray(xp, dtype=float).reshape(u.size, -1)
            xf = np.asarray(xf, dtype=float).reshape(v.size, -1)
            if xp.shape[1] != xf.shape[1]:
                raise DesignError("past and future covariates differ in dimension")
        else:
            xp = np.zeros((u.size, 0))
            xf = np.zeros((v.size, 0))
        set_ = object.__setattr__
        set_(self, "u_past", u)
        set_(self, "v_future", v)
        set_(self, "k_past", kp)
        set_(self, "k_future", kf)
        set_(self, "x_past", xp)
        set_(self, "x_future", xf)
        u2 = np.bincount(self.past_unit, weights=u * u, minlength=kp.size)
        set_(self, "u2_agg", u2)
        set_(self, "u_agg", np.sqrt(u2))

    @property
    def n(self) -> int:
        return int(self.k_past.size)

    @property
    def d(self) -> int:
        return int(self.x_past.shape[1])

    @property
    def kappa(self) -> int:
        return int(self.v_future.size)

    @cached_property
    def past_unit(self) -> np.ndarray:
        return np.repeat(np.arange(self.k_past.size), self.k_past)

    @cached_property
    def future_unit(self) -> np.ndarray:
        return np.repeat(np.arange(self.k_future.size), self.k_future)

    @cached_property
    def past_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.k_past)])

    @property
    def u2(self) -> np.ndarray:
        """Aggregated squared past weights u_i^2 per unit (summed, not re-squared)."""
        return self.u2_agg

    @property
    def eta(self) -> float:
        return float(np.mean(self.k_past >= 2))

    def check(self, rtol: float = 1e-12) -> None:
        u_agg = np.sqrt(np.bincount(self.past_unit, weights=self.u_past**2, minlength=self.n))
        if not np.allclose(u_agg, self.u_agg, rtol=rtol, atol=0.0):
            raise DesignError("cached u_agg is inconsistent with past weights")

    def to_dict(self) -> dict:
        units = []
        po = self.past_offsets
        fo = np.concatenate([[0], np.cumsum(self.k_future)])
        for i in range(self.n):
            past = [{"u": float(self.u_past[r]), "x": self.x_past[r].tolist()} for r in range(po[i], po[i + 1])]
            fut = [{"v": float(self.v_future[r]), "x": self.x_future[r].tolist()} for r in range(fo[i], fo[i + 1])]
            units.append({"past": past, "future": fut})
        return {"n": self.n, "d": self.d, "units": units}

    @classmethod
    def from_dict(cls, data: dict) -> "Design":
        units = data["units"]
        d = int(data.get("d", 0))
        u = [p["u"] for unit in units for p in unit["past"]]
        v = [f["v"] for unit in units for f in unit["future"]]
        xp = np.array([p.get("x", []) for unit in units for p in unit["past"]], dtype=float).reshape(len(u), d)
        xf = np.array([f.get("x", []) for unit in units for f in unit["future"]], dtype=float).reshape(len(v), d)
        return cls(
            u_past=np.array(u),
            k_past=np.array([len(unit["past"]) for unit in units]),
            v_future=np.array(v),
            k_future=np.array([len(unit["future"]) for unit in units]),
            x_past=xp if d else None,
            x_future=xf if d else None,
        )


@dataclass(frozen=True, eq=False)
class ModelTruth:
    beta: np.ndarray
    sigma: float
    gamma: np.ndarray
    g0: Prior

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)).ravel())
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float).ravel())

    @property
    def n(self) -> int:
        return int(self.gamma.size)


@dataclass(frozen=True, eq=False)
class Dataset:
    y: np.ndarray
    y_future: np.ndarray | None = None

    def check_against(self, design: Design) -> None:
        if np.shape(self.y) != (design.u_past.size,):
            raise DesignError("past responses do not match the design")
        if self.y_future is not None and np.shape(self.y_future) != (design.kappa,):
            raise DesignError("future responses do not match the design")

    def to_dict(self, design: Design) -> dict:
        po = design.past_offsets
        out = {"y": [self.y[po[i]:po[i + 1]].tolist() for i in range(design.n)]}
        if self.y_future is not None:
            fo = np.concatenate([[0], np.cumsum(design.k_future)])
            out["y_future"] = [self.y_future[fo[i]:fo[i + 1]].tolist() for i in range(design.n)]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Dataset":
        y = np.array([v for unit in data["y"] for v in unit], dtype=float)
        yf = data.get("y_future")
        if yf is not None:
            yf = np.array([v for unit in yf for v in unit], dtype=float)
        return cls(y=y, y_future=yf)


def design_to_json(design: Design) -> str:
    return json.dumps(design.to_dict())


def design_from_json(text: str) -> Design:
    return Design.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Regimes A-F
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaseSpec:
    """Covariate regime.

    ``covariates_are_squared=None`` uses the case default: the sampled values
    are u^2 and v^2 for A-E, and u, v themselves for F (with squared draws on
    [1/2, 1] no unit could ever be reused, see ``build_case_design``).
    """

    case_id: str
    n: int
    covariates_are_squared: bool | None = None
    with_fixed_effects: bool = False
    d: int = 1

    def __post_init__(self):
        if self.case_id not in CASE_IDS:
            raise DesignError(f"unknown case id {self.case_id!r}")
        if self.n < 1:
            raise DesignError("n must be positive")

    @property
    def eta(self) -> float:
        if self.case_id == "D":
            return self.n**-0.5
        if self.case_id == "E":
            return 0.1
        return 0.0

    @property
    def n_replicated(self) -> int:
        if self.case_id == "D":
            r = math.isqrt(self.n)
            return r if r * r == self.n else r + 1
        if self.case_id == "E":
            return -(-self.n // 10)
        return 0

    @property
    def squared(self) -> bool:
        if self.covariates_are_squared is None:
            return self.case_id != "F"
        return self.covariates_are_squared


def _rejection(draw, accept, size: int, rng, cap: int = REJECTION_CAP) -> np.ndarray:
    out = np.empty(size)
    filled = 0
    attempts = 0
    batch = max(16, 2 * size)
    while filled < size:
        cand = draw(rng, batch)
        attempts += batch
        cand = cand[accept(cand)]
        take = min(cand.size, size - filled)
        out[filled:filled + take] = cand[:take]
        filled += take
        if attempts > cap * max(size, 1):
            raise RuntimeError("rejection sampler exceeded its attempt cap")
    return out


def truncated_normal(mean, sd, lo, hi, size, rng):
    return _rejection(lambda r, m: r.normal(mean, sd, m), lambda x: (x > lo) & (x <= hi), size, rng)


def truncated_chi2_1(hi, size, rng):
    return _rejection(lambda r, m: r.standard_normal(m) ** 2, lambda x: (x > 0) & (x <= hi), size, rng)


def truncated_exp_quantile(p, hi=2.0):
    return -np.log1p(-p * (-np.expm1(-hi)))


def case_f_quantile(p):
    """Inverse of F(x) = 1 - exp(-(1-x)^-2) restricted to [1/2, 1)."""
    p = np.asarray(p, dtype=float)
    return 1.0 - (-np.log1p(-p)) ** -0.5


def case_f_sample(size, rng):
    p_lo = -np.expm1(-4.0)
    p = rng.uniform(p_lo, 1.0, size)
    p = np.minimum(p, np.nextafter(1.0, 0.0))
    return case_f_quantile(p)


def _copula_corr(r: float, nodes: int = 96) -> float:
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    q = truncated_exp_quantile(ndtr(x))
    mean = w @ q
    var = w @ (q - mean) ** 2
    z2 = r * x[:, None] + math.sqrt(1 - r * r) * x[None, :]
    q2 = truncated_exp_quantile(ndtr(z2))
    cross = np.einsum("i,j,i,ij->", w, w, q, q2)
    return (cross - mean**2) / var


@lru_cache(maxsize=None)
def case_c_copula_rho(target: float = 0.5) -> float:
    """Gaussian-copula correlation giving Pearson ``target`` after truncation."""
    lo, hi = 0.0, 0.999
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _copula_corr(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _draw_pair(case_id: str, size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Raw (past, future) covariate draws for one observation each."""
    if case_id == "A":
        return truncated_normal(2.0, 1.0, 0.0, 4.0, size, rng), truncated_normal(2.0, 1.0, 0.0, 4.0, size, rng)
    if case_id == "B":
        return truncated_exp_quantile(rng.uniform(size=size)), truncated_exp_quantile(rng.uniform(size=size))
    if case_id == "C":
        r = case_c_copula_rho()
        z1 = rng.standard_normal(size)
        z2 = r * z1 + math.sqrt(1 - r * r) * rng.standard_normal(size)
        return truncated_exp_quantile(ndtr(z1)), truncated_exp_quantile(ndtr(z2))
    if case_id == "D":
        return truncated_normal(1.0, 1.0, 0.0, 2.0, size, rng), truncated_normal(1.0, 1.0, 0.0, 2.0, size, rng)
    if case_id == "E":
        return truncated_normal(1.0, 1.0, 0.0, 2.0, size, rng), truncated_chi2_1(3.0, size, rng)
    if case_id == "F":
        return case_f_sample(size, rng), rng.uniform(0.5, 1.0, size)
    raise DesignError(f"unknown case id {case_id!r}")


def _extra_past_draw(case_id: str, size: int, rng) -> np.ndarray:
    return _draw_pair(case_id, size, rng)[0]


def build_case_design(spec: CaseSpec, rng) -> Design:
    n = spec.n
    m = spec.n_replicated
    if m < 0 or m > n:
        raise DesignError("replicated-unit count outside [0, n]")
    first, future = _draw_pair(spec.case_id, n, rng)
    k_past = np.ones(n, dtype=np.int64)
    if m:
        rep = rng.choice(n, size=m, replace=False)
        k_past[rep] = 2
        second = np.zeros(n)
        second[rep] = _extra_past_draw(spec.case_id, m, rng)
    to_weight = np.sqrt if spec.squared else (lambda a: a)
    u_rows = []
    for i in range(n):
        u_rows.append(first[i])
        if k_past[i] == 2:
            u_rows.append(second[i])
    u_past = to_weight(np.asarray(u_rows))
    v_future = to_weight(future)
    x_past = x_future = None
    if spec.with_fixed_effects:
        x_past = rng.standard_normal((u_past.size, spec.d))
        x_future = rng.standard_normal((n, spec.d))
    return Design(u_past=u_past, k_past=k_past, v_future=v_future, k_future=np.ones(n, dtype=np.int64),
                  x_past=x_past, x_future=x_future)


def simulate(design: Design, truth: ModelTruth, rng) -> Dataset:
    if truth.n != design.n:
        raise DesignError("truth and design disagree on the number of units")
    if truth.beta.size != design.d and not (design.d == 0 and truth.beta.size in (0, 1) and not np.any(truth.beta)):
        raise DesignError("beta dimension does not match the design")
    beta = truth.beta if design.d else np.zeros(0)
    eps = rng.standard_normal(design.u_past.size)
    eps_f = rng.standard_normal(design.kappa)
    g = truth.gamma
    y = design.x_past @ beta + design.u_past * g[design.past_unit] + truth.sigma * eps
    yf = design.x_future @ beta + design.v_future * g[design.future_unit] + truth.sigma * eps_f
    return Dataset(y=y, y_future=yf)


def draw_truth(g0: Prior, n: int, beta, sigma: float, rng) -> ModelTruth:
    if isinstance(g0, Uniform):
        raise ValueError("cannot draw random effects from an improper prior")
    return ModelTruth(beta=np.asarray(beta, dtype=float), sigma=sigma, gamma=g0.sample(rng, n), g0=g0)


def truth_to_dict(truth: ModelTruth) -> dict:
    return {"beta": truth.beta.tolist(), "sigma": truth.sigma, "gamma": truth.gamma.tolist(),
            "g0": truth.g0.to_dict()}


def truth_from_dict(data: dict) -> ModelTruth:
    return ModelTruth(beta=np.array(data["beta"]), sigma=data["sigma"], gamma=np.array(data["gamma"]),
                      g0=prior_from_dict(data["g0"]))
