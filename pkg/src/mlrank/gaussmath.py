"""Gaussian positivity probabilities, their logs and gradients.

``Q(mu, sigma) = P(z > 0)`` for ``z ~ N(mu, sigma^2)`` is the standard
normal CDF at ``t = mu / sigma``. Everything here works in the log domain
so the loss stays finite deep in the tails (t in [-30, 30] and beyond).

The array functions (``log_ndtr``, ``inv_mills``, ``log_q_array``,
``grad_log_q_array``) are what the losses call; the ``GaussianParam``
wrappers are the scalar surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

SQRT2 = math.sqrt(2.0)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
# below this t the log-CDF uses the scaled complementary error function
TAIL_SWITCH = -5.0


class DomainError(ValueError):
    pass


class DegenerateFit(ValueError):
    pass


@dataclass(frozen=True)
class GaussianParam:
    mu: float
    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise DomainError(f"non-finite Gaussian parameters ({self.mu}, {self.sigma})")
        if self.sigma <= 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")

    @property
    def t(self) -> float:
        return self.mu / self.sigma


@dataclass(frozen=True)
class DiffGaussian:
    mu_d: float
    sigma_d: float

    def as_param(self) -> GaussianParam:
        return GaussianParam(self.mu_d, self.sigma_d)


def ndtr(t):
    return 0.5 * special.erfc(-np.asarray(t, dtype=float) / SQRT2)


def log_ndtr(t):
    """log Phi(t), accurate over the whole real line."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    hi = t > 0
    mid = (t <= 0) & (t >= TAIL_SWITCH)
    lo = t < TAIL_SWITCH
    out[hi] = np.log1p(-0.5 * special.erfc(t[hi] / SQRT2))
    out[mid] = np.log(0.5 * special.erfc(-t[mid] / SQRT2))
    tl = t[lo]
    out[lo] = -0.5 * tl * tl + np.log(0.5 * special.erfcx(-tl / SQRT2))
    return out if out.ndim else out[()]


def inv_mills(t):
    """pdf(t) / Phi(t), stable for very negative t where it tends to -t."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    neg = t < 0
    # pdf/Phi = sqrt(2/pi) / erfcx(-t/sqrt2) exactly; no cancellation for t < 0
    out[neg] = SQRT_2_OVER_PI / special.erfcx(-t[neg] / SQRT2)
    tp = t[~neg]
    out[~neg] = np.exp(-0.5 * tp * tp) / math.sqrt(2 * math.pi) / ndtr(tp)
    return out if out.ndim else out[()]


def log_q_array(mu, sigma):
    return log_ndtr(np.asarray(mu, dtype=float) / np.asarray(sigma, dtype=float))


def grad_log_q_array(mu, sigma):
    """Partials of log Q(mu, sigma) with respect to mu and sigma."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    t = mu / sigma
    ratio = inv_mills(t)
    return ratio / sigma, -t * ratio / sigma


def q_positive(p: GaussianParam) -> float:
    return float(ndtr(p.t))


def log_q(p: GaussianParam) -> float:
    return float(log_ndtr(p.t))


def grad_log_q(p: GaussianParam) -> tuple[float, float]:
    dmu, dsigma = grad_log_q_array(p.mu, p.sigma)
    return float(dmu), float(dsigma)


def diff_gaussian(u: GaussianParam, v: GaussianParam) -> DiffGaussian:
    return DiffGaussian(u.mu - v.mu, math.sqrt(u.sigma**2 + v.sigma**2))


def fit_gaussian(samples: Sequence[float]) -> GaussianParam:
    """Maximum-likelihood fit; the variance uses the 1/n normaliser."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise DegenerateFit(f"need at least 2 samples, got {x.size}")
    mean = float(x.mean())
    sd = float(np.sqrt(np.mean((x - mean) ** 2)))
    if sd == 0.0:
        raise DegenerateFit("samples have zero variance")
    return GaussianParam(mean, sd)
