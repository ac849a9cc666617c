"""Sufficient statistics and fixed-effect / noise-scale estimators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lmm import Dataset, Design, DesignError
from .rng import seed_stream

SIGMA_FLOOR = 1e-6
REGIMES = ("contrast", "batched", "known")


class EstimationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SuffStats:
    z: np.ndarray
    u_agg: np.ndarray
    beta_used: np.ndarray
    sigma_used: float

    def __post_init__(self):
        if not self.sigma_used > 0:
            raise ValueError("sigma_used must be positive")
        if not np.all(np.isfinite(self.z)):
            raise ValueError("non-finite sufficient statistic")


@dataclass(frozen=True, eq=False)
class FitResult:
    beta_hat: np.ndarray
    sigma_hat: float
    regime: str
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if not self.sigma_hat > 0:
            raise ValueError("sigma_hat must be positive")
        object.__setattr__(self, "beta_hat", np.atleast_1d(np.asarray(self.beta_hat, dtype=float)).ravel())

    def to_dict(self) -> dict:
        return {"beta_hat": self.beta_hat.tolist(), "sigma_hat": self.sigma_hat,
                "regime": self.regime, "diagnostics": dict(self.diagnostics)}


def _beta_for(design: Design, beta) -> np.ndarray:
    beta = np.atleast_1d(np.asarray(beta, dtype=float)).ravel()
    if design.d == 0:
        if beta.size > 1 or np.any(beta):
            raise DesignError("design has no covariates but beta is nonzero")
        return np.zeros(0)
    if beta.size != design.d:
        raise DesignError(f"beta has length {beta.size}, design has d={design.d}")
    return beta


def aggregate_stats(dataset: Dataset, design: Design, beta, sigma: float) -> SuffStats:
    """Z_i = sigma^-1 u_i^-2 sum_k u_ik (y_ik - x_ik' beta), so Z_i | gamma_i ~ N(gamma_i/sigma, u_i^-2)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    dataset.check_against(design)
    b = _beta_for(design, beta)
    resid = dataset.y - design.x_past @ b
    num = np.bincount(design.past_unit, weights=design.u_past * resid, minlength=design.n)
    z = num / (sigma * design.u2)
    return SuffStats(z=z, u_agg=design.u_agg.copy(), beta_used=b, sigma_used=float(sigma))


def _floored_sigma(ms: float) -> float:
    return max(math.sqrt(max(ms, 0.0)), SIGMA_FLOOR)


def _ols(X: np.ndarray, y: np.ndarray, what: str) -> np.ndarray:
    if X.shape[1] == 0:
        return np.zeros(0)
    gram = X.T @ X
    eig = np.linalg.eigvalsh(gram)
    scale = max(1.0, float(np.abs(np.diag(gram)).max()))
    if eig[0] <= 1e-12 * scale:
        raise EstimationError(f"{what} Gram matrix is singular (smallest eigenvalue {eig[0]:.3e})")
    return np.linalg.solve(gram, X.T @ y)


def contrast_rows(dataset: Dataset, design: Design):
    """Per replicated unit, the gamma-free contrast of its first two replicates.

    Returns (units, r, s) with f_i(beta) = r_i - s_i' beta.
    """
    units = np.flatnonzero(design.k_past >= 2)
    first = design.past_offsets[units]
    second = first + 1
    u1, u2 = design.u_past[first], design.u_past[second]
    norm = np.sqrt(u1 * u1 + u2 * u2)
    r = (u2 * dataset.y[first] - u1 * dataset.y[second]) / norm
    s = (u2[:, None] * design.x_past[first] - u1[:, None] * design.x_past[second]) / norm[:, None]
    return units, r, s


def contrast_fit(dataset: Dataset, design: Design) -> FitResult:
    """Least squares on within-unit contrasts; extra replicates beyond two are ignored."""
    dataset.check_against(design)
    units, r, s = contrast_rows(dataset, design)
    if units.size == 0:
        raise EstimationError("contrast fit needs at least one unit with two past replicates")
    beta = _ols(s, r, "contrast")
    resid = r - s @ beta
    sigma = _floored_sigma(float(np.mean(resid**2)))
    return FitResult(beta, sigma, "contrast", {"n_contrasts": int(units.size)})


def batched_fit(dataset: Dataset, design: Design, batch_size: int | None = None, rng=None) -> FitResult:
    """OLS on batch aggregates of ceil(sqrt(n)) shuffled units.

    Within a batch every replicate gets weight 1/sqrt(sum K_i), so the
    aggregated noise keeps variance sigma^2.  The residual scale also absorbs
    the aggregated random effects; only beta_hat carries a rate guarantee.
    """
    dataset.check_against(design)
    n = design.n
    m = math.isqrt(n - 1) + 1 if batch_size is None else int(batch_size)
    if m < 1 or n < 2 * m:
        raise EstimationError(f"batched fit needs n >= 2 * batch_size (n={n}, batch_size={m})")
    if rng is None:
        rng = seed_stream(0, "batched_fit")
    n_batches = n // m
    order = rng.permutation(n)
    batch_of_unit = np.full(n, -1)
    batch_of_unit[order[: n_batches * m]] = np.repeat(np.arange(n_batches), m)
    row_batch = batch_of_unit[design.past_unit]
    keep = row_batch >= 0
    counts = np.bincount(row_batch[keep], minlength=n_batches).astype(float)
    w = 1.0 / np.sqrt(counts[row_batch[keep]])
    ybar = np.bincount(row_batch[keep], weights=w * dataset.y[keep], minlength=n_batches)
    xbar = np.zeros((n_batches, design.d))
    for j in range(design.d):
        xbar[:, j] = np.bincount(row_batch[keep], weights=w * design.x_past[keep, j], minlength=n_batches)
    beta = _ols(xbar, ybar, "batched")
    resid = ybar - xbar @ beta
    sigma = _floored_sigma(float(np.mean(resid**2)))
    return FitResult(beta, sigma, "batched", {"n_batches": int(n_batches), "batch_size": int(m)})


def select_estimator(dataset: Dataset, design: Design, rng=None) -> FitResult:
    n_rep = int(np.sum(design.k_past >= 2))
    if n_rep >= math.sqrt(design.n):
        return contrast_fit(dataset, design)
    return batched_fit(dataset, design, rng=rng)


def known_fit(beta, sigma: float) -> FitResult:
    return FitResult(np.atleast_1d(np.asarray(beta, dtype=float)), float(sigma), "known", {})
