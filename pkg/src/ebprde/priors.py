"""Random-effect priors and their Gaussian convolutions.

Every prior exposes ``log_conv(a, scale, sd)``:

    log  \\int phi(a; scale * gamma, sd) g(d gamma)

where phi's third argument is a standard deviation.  The two marginals of the
risk decomposition are special cases:

    m_g(a; u, v, sigma)       = conv with scale = v / sigma, sd = v / u
    m~_g(a; u, v, sigma)      = conv with scale = v / sigma, sd = v / sqrt(u^2 + v^2)

Mixture-type priors (GaussMix, Discrete, SpikeSlab) also expose
``component_log_conv`` returning the per-component terms on a trailing axis,
which lets optimizers treat the mixture weights linearly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import log_ndtr, logsumexp

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
ETA_BOX = (0.01, 0.99)
A_BOX = (0.1, 10.0)
WEIGHT_TOL = 1e-12


class ImproperPriorError(ValueError):
    pass


def norm_logpdf(x, mean, sd):
    z = (x - mean) / sd
    return -0.5 * z * z - np.log(sd) - LOG_SQRT_2PI


def _check_simplex(w: np.ndarray, what: str) -> np.ndarray:
    w = np.asarray(w, dtype=float).ravel()
    if w.size == 0:
        raise ValueError(f"{what}: empty weight vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"{what}: weights must be finite and nonnegative")
    if abs(w.sum() - 1.0) > WEIGHT_TOL * max(1, w.size):
        raise ValueError(f"{what}: weights must sum to one (got {w.sum()!r})")
    return w


@lru_cache(maxsize=None)
def hermite_nodes(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Probabilists' Gauss-Hermite rule normalized to integrate N(0, 1)."""
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / math.sqrt(2.0 * math.pi)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@lru_cache(maxsize=None)
def legendre_nodes(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(nodes)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def laplace_log_conv(a, scale, sd, rate):
    """log of int phi(a; scale*g, sd) (rate/2) exp(-rate |g|) dg, closed form."""
    b = rate / scale
    bs = b * sd
    left = -b * a + log_ndtr(a / sd - bs)
    right = b * a + log_ndtr(-a / sd - bs)
    return np.log(0.5 * b) + 0.5 * bs * bs + np.logaddexp(left, right)


class Prior:
    kind = "prior"
    proper = True

    def log_conv(self, a, scale, sd):
        raise NotImplementedError

    def sample(self, rng, size):
        raise NotImplementedError

    def params(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class Uniform(Prior):
    kind = "uniform"
    proper = False

    def log_conv(self, a, scale, sd):
        raise ImproperPriorError("the flat prior has no normalized marginal")

    def sample(self, rng, size):
        raise ImproperPriorError("cannot sample from the flat prior")

    def params(self):
        return {}


@dataclass(frozen=True, eq=False)
class GaussianScalar(Prior):
    """N(0, tau) with tau a variance."""

    tau: float
    kind = "gaussian"

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError("tau must be nonnegative")

    def log_conv(self, a, scale, sd):
        return norm_logpdf(a, 0.0, np.sqrt(scale * scale * self.tau + sd * sd))

    def sample(self, rng, size):
        return math.sqrt(self.tau) * rng.standard_normal(size)

    def params(self):
        return {"tau": float(self.tau)}


class _WeightedPrior(Prior):
    weights: np.ndarray

    @property
    def n_components(self) -> int:
        return int(self.weights.size)

    def component_log_conv(self, a, scale, sd):
        raise NotImplementedError

    def log_conv(self, a, scale, sd):
        comp = self.component_log_conv(a, scale, sd)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(comp + logw, axis=-1)

    def with_weights(self, weights):
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class GaussMix(_WeightedPrior):
    """sum_l pi_l N(0, nu_l), nu_l variances on a fixed grid."""

    weights: np.ndarray
    variances: np.ndarray
    kind = "gaussmix"

    def __post_init__(self):
        w = _check_simplex(self.weights, "GaussMix")
        nu = np.asarray(self.variances, dtype=float).ravel()
        if nu.shape != w.shape or np.any(nu < 0):
            raise ValueError("GaussMix: variance grid must be nonnegative and match the weights")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "variances", nu)

    def component_log_conv(self, a, scale, sd):
        a = np.asarray(a, dtype=float)[..., None]
        scale = np.asarray(scale, dtype=float)[..., None]
        sd = np.asarray(sd, dtype=float)[..., None]
        return norm_logpdf(a, 0.0, np.sqrt(scale * scale * self.variances + sd * sd))

    def sample(self, rng, size):
        comp = rng.choice(self.weights.size, size=size, p=self.weights)
        return np.sqrt(self.variances[comp]) * rng.standard_normal(size)

    def with_weights(self, weights):
        return GaussMix(weights=np.asarray(weights, dtype=float), variances=self.variances)

    def params(self):
        return {"weights": self.weights.tolist(), "variances": self.variances.tolist()}


@dataclass(frozen=True, eq=False)
class Discrete(_WeightedPrior):
    """sum_l pi_l delta_{tau_l}."""

    weights: np.ndarray
    support: np.ndarray
    kind = "discrete"

    def __post_init__(self):
        w = _check_simplex(self.weights, "Discrete")
        t = np.asarray(self.support, dtype=float).ravel()
        if t.shape != w.shape or not np.all(np.isfinite(t)):
            raise ValueError("Discrete: support must be finite and match the weights")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "support", t)

    def component_log_conv(self, a, scale, sd):
        a = np.asarray(a, dtype=float)[..., None]
        scale = np.asarray(scale, dtype=float)[..., None]
        sd = np.asarray(sd, dtype=float)[..., None]
        return norm_logpdf(a, scale * self.support, sd)

    def sample(self, rng, size):
        return self.support[rng.choice(self.weights.size, size=size, p=self.weights)]

    def with_weights(self, weights):
        return Discrete(weights=np.asarray(weights, dtype=float), support=self.support)

    def params(self):
        return {"weights": self.weights.tolist(), "support": self.support.tolist()}


@dataclass(frozen=True, eq=False)
class SpikeSlab(_WeightedPrior):
    """(1 - eta) delta_0 + eta * Laplace(rate a)."""

    eta: float
    a: float
    weights: np.ndarray = field(init=False)
    kind = "spikeslab"

    def __post_init__(self):
        if not (ETA_BOX[0] <= self.eta <= ETA_BOX[1]):
            raise ValueError(f"SpikeSlab: eta={self.eta} outside {ETA_BOX}")
        if not (A_BOX[0] <= self.a <= A_BOX[1]):
            raise ValueError(f"SpikeSlab: a={self.a} outside {A_BOX}")
        object.__setattr__(self, "weights", np.array([1.0 - self.eta, self.eta]))

    def component_log_conv(self, a, scale, sd):
        a = np.asarray(a, dtype=float)
        spike = norm_logpdf(a, 0.0, sd)
        slab = laplace_log_conv(a, scale, sd, self.a)
        spike, slab = np.broadcast_arrays(spike, slab)
        return np.stack([spike, slab], axis=-1)

    def sample(self, rng, size):
        slab = rng.uniform(size=size) < self.eta
        return np.where(slab, rng.laplace(0.0, 1.0 / self.a, size), 0.0)

    def with_weights(self, weights):
        return SpikeSlab(eta=float(weights[1]), a=self.a)

    def params(self):
        return {"eta": float(self.eta), "a": float(self.a)}


_KINDS = {"uniform": Uniform, "gaussian": GaussianScalar, "gaussmix": GaussMix,
          "discrete": Discrete, "spikeslab": SpikeSlab}


def prior_from_dict(data: dict) -> Prior:
    kind = data["kind"]
    if kind not in _KINDS:
        raise ValueError(f"unknown prior kind {kind!r}")
    params = dict(data.get("params", {}))
    for key in ("weights", "variances", "support"):
        if key in params:
            params[key] = np.asarray(params[key], dtype=float)
    return _KINDS[kind](**params)


def prior_from_json(text: str) -> Prior:
    return prior_from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Marginals
# ---------------------------------------------------------------------------

def _positive(name, x):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError(f"{name} must be strictly positive")
    return x


def _require_proper(prior: Prior):
    if not prior.proper:
        raise ImproperPriorError("marginal densities require a proper prior")


def past_sd(u, v):
    """Standard deviation of v * Z given gamma: v / u."""
    return v / u


def combined_sd(u, v):
    """Standard deviation of the precision-weighted past/future combination."""
    return v / np.sqrt(u * u + v * v)


def log_marginal_m(prior: Prior, a, u, v, sigma):
    _require_proper(prior)
    u, v, sigma = _positive("u", u), _positive("v", v), _positive("sigma", sigma)
    return prior.log_conv(a, v / sigma, past_sd(u, v))


def log_marginal_m_tilde(prior: Prior, a, u, v, sigma):
    _require_proper(prior)
    u, v, sigma = _positive("u", u), _positive("v", v), _positive("sigma", sigma)
    return prior.log_conv(a, v / sigma, combined_sd(u, v))


def _gauss_piece(a, scale, sd, var, nodes):
    """int phi(a; scale*g, sd) N(g; 0, var) dg by Gauss-Hermite.

    The narrower of the two Gaussians is used as the weight function.
    """
    x, w = hermite_nodes(nodes)
    p = scale * np.sqrt(var)
    a, p, sd = np.broadcast_arrays(np.asarray(a, float), np.asarray(p, float), np.asarray(sd, float))
    t_prior = p[..., None] * x
    v1 = norm_logpdf(a[..., None], t_prior, sd[..., None])
    t_kernel = a[..., None] + sd[..., None] * x
    with np.errstate(divide="ignore"):
        v2 = norm_logpdf(t_kernel, 0.0, np.where(p > 0, p, 1.0)[..., None])
    use_prior = (p <= sd)[..., None]
    vals = np.where(use_prior, v1, v2)
    out = logsumexp(vals + np.log(w), axis=-1)
    atom = norm_logpdf(a, 0.0, sd)
    return np.where(p > 0, out, atom)


def _half_line_log_integral(a, sd, b, nodes, depth=36.0):
    """log int_0^inf phi(a; t, sd) (b/2) exp(-b t) dt by Gauss-Legendre.

    The integrand is log-quadratic in t with peak at mu = a - b sd^2.  The
    window is cut where the log-integrand has dropped by ``depth`` below its
    maximum over the half-line, so the rule only sees a smooth bump.
    """
    x, w = legendre_nodes(nodes)
    mu = a - b * sd * sd
    reach = math.sqrt(2.0 * depth) * sd
    # for mu < 0 the mass piles against t = 0 and decays on a shorter scale
    left_edge = np.sqrt(mu * mu + 2.0 * depth * sd * sd) - np.abs(mu)
    lo = np.where(mu > 0, np.maximum(0.0, mu - reach), 0.0)
    hi = np.where(mu > 0, mu + reach, left_edge)
    half = 0.5 * (hi - lo)
    t = (lo + half)[..., None] + half[..., None] * x
    vals = norm_logpdf(a[..., None], t, sd[..., None]) - b[..., None] * t
    return np.log(0.5 * b) + np.log(half) + logsumexp(vals + np.log(w), axis=-1)


def _laplace_piece(a, scale, sd, rate, nodes):
    """Laplace slab convolution, split at the kink and integrated per half-line."""
    b = rate / np.asarray(scale, float)
    a, b, sd = np.broadcast_arrays(np.asarray(a, float), b, np.asarray(sd, float))
    right = _half_line_log_integral(a, sd, b, nodes)
    left = _half_line_log_integral(-a, sd, b, nodes)
    return np.logaddexp(left, right)


def gh_convolve(prior: Prior, a, mean_scale, sd, nodes: int = 61):
    """Quadrature evaluation of log int phi(a; mean_scale*g, sd) g(dg).

    Atoms are summed exactly and Gaussian parts use Gauss-Hermite.  The
    Laplace slab has a kink at zero, so each half-line is integrated with a
    Gauss-Legendre rule on a window around the integrand's bump.
    Independent of the closed forms in ``Prior.log_conv``.
    """
    if nodes < 3:
        raise ValueError("need at least 3 nodes")
    _require_proper(prior)
    sd = np.asarray(sd, dtype=float)
    if np.any(~(sd > 0)):
        raise ValueError("sd must be positive")
    a = np.asarray(a, dtype=float)
    if isinstance(prior, GaussianScalar):
        return _gauss_piece(a, mean_scale, sd, prior.tau, nodes)
    if isinstance(prior, GaussMix):
        parts = [np.log(wl) + _gauss_piece(a, mean_scale, sd, nu, nodes)
                 for wl, nu in zip(prior.weights, prior.variances) if wl > 0]
        return logsumexp(np.stack(parts, axis=-1), axis=-1)
    if isinstance(prior, Discrete):
        parts = [np.log(wl) + norm_logpdf(a, mean_scale * t, sd)
                 for wl, t in zip(prior.weights, prior.support) if wl > 0]
        return logsumexp(np.stack(parts, axis=-1), axis=-1)
    if isinstance(prior, SpikeSlab):
        spike = np.log1p(-prior.eta) + norm_logpdf(a, 0.0, sd)
        slab = np.log(prior.eta) + _laplace_piece(a, mean_scale, sd, prior.a, nodes)
        return np.logaddexp(spike, slab)
    raise TypeError(f"unsupported prior {type(prior).__name__}")


def posterior_predictive_logpdf(prior: Prior, z, u, v, sigma, y, offset=0.0):
    """Log density at ``y`` of the Bayes predictive for one future coordinate.

    ``z`` is the unit's standardized statistic, ``offset`` the fixed-effect
    part x~'beta.  Uses the exact factorization

        p(w) = phi(w - A; 0, sqrt(1 + v^2/u^2)) * m~_g(W) / m_g(A)

    with w = (y - offset)/sigma, A = v z and W the precision-weighted
    combination (u^2 A + v^2 w) / (u^2 + v^2).  For the flat prior the ratio is
    one, giving N(offset + v sigma z, sigma^2 (1 + v^2/u^2)).
    """
    u, v, sigma = _positive("u", u), _positive("v", v), _positive("sigma", sigma)
    w = (np.asarray(y, dtype=float) - offset) / sigma
    a = v * np.asarray(z, dtype=float)
    u2, v2 = u * u, v * v
    base = norm_logpdf(w - a, 0.0, np.sqrt(1.0 + v2 / u2)) - np.log(sigma)
    if not prior.proper:
        return base
    wt = (u2 * a + v2 * w) / (u2 + v2)
    scale = v / sigma
    return base + prior.log_conv(wt, scale, combined_sd(u, v)) - prior.log_conv(a, scale, past_sd(u, v))
