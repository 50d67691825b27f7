"""Monte-Carlo log-mean estimation with quantified Gaussian noise.

Turns R replicated evaluations of a positive integrand at one design point
into ``log(mean)`` plus a noise variance, either by first-order (Delta
method) propagation through the log, or by bootstrap resampling.  All
reductions run in log-space so that strongly underflowing likelihood
values remain usable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .exceptions import DegenerateLikelihoodError


@dataclass(frozen=True)
class NoisyObservation:
    """One design point with its log-mean estimate and noise variance."""

    point: np.ndarray
    log_estimate: float
    noise_var: float
    replications: int

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float).ravel())
        if self.noise_var < 0:
            raise ValueError("noise_var must be nonnegative")
        if self.replications < 1:
            raise ValueError("replications must be positive")


def mc_log_estimate(samples) -> tuple[float, float]:
    """Delta-method log-mean estimate from linear-domain samples.

    Returns ``(log_estimate, noise_var)`` with
    ``noise_var = s^2 / (mean^2 * R)`` using the unbiased sample variance.
    Samples must be nonnegative with positive mean; exact zeros are kept
    (they only lower the mean), an all-zero batch is an error.
    """
    g = np.asarray(samples, dtype=float).ravel()
    r = g.size
    if r < 2:
        raise ValueError("need at least two replications")
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise ValueError("samples must be finite and nonnegative")
    mean = g.mean()
    if mean <= 0:
        raise DegenerateLikelihoodError("all replications are zero; no usable estimate")
    var = g.var(ddof=1)
    return float(np.log(mean)), float(var / (mean * mean * r))


def mc_log_estimate_from_logs(log_samples) -> tuple[float, float]:
    """Delta-method estimate accumulated entirely in log-space.

    Equivalent to ``mc_log_estimate(exp(log_samples))`` but immune to
    underflow: uses max-shifted (log-sum-exp) reductions of the first and
    second moments.  ``-inf`` entries encode exact zeros.
    """
    lg = np.asarray(log_samples, dtype=float).ravel()
    r = lg.size
    if r < 2:
        raise ValueError("need at least two replications")
    if np.any(np.isnan(lg)) or np.any(lg == np.inf):
        raise ValueError("log-samples must be in [-inf, inf)")
    log_sum = logsumexp(lg)
    if log_sum == -np.inf:
        raise DegenerateLikelihoodError("all replications are zero; no usable estimate")
    log_mean = log_sum - np.log(r)
    # sum g^2 / (R mean^2) = exp(logsumexp(2 lg) - log R - 2 log_mean)
    ratio = np.exp(logsumexp(2.0 * lg) - np.log(r) - 2.0 * log_mean)
    var_over_m2 = max(ratio - 1.0, 0.0) * r / (r - 1.0)
    return float(log_mean), float(var_over_m2 / r)


def bootstrap_variance(samples, b: int, seed) -> float:
    """Bootstrap variance of ``log(mean(resample))`` over ``b`` resamples.

    Resamples with nonpositive mean are rejected and redrawn, up to
    ``10*b`` attempts in total; deterministic for a fixed seed.
    """
    g = np.asarray(samples, dtype=float).ravel()
    r = g.size
    if r < 2:
        raise ValueError("need at least two replications")
    if b < 100:
        raise ValueError("need at least 100 bootstrap resamples")
    rng = np.random.default_rng(seed)
    log_means = np.empty(b)
    kept = 0
    attempts = 0
    while kept < b:
        if attempts >= 10 * b:
            raise DegenerateLikelihoodError(
                "bootstrap resampling keeps producing nonpositive means"
            )
        take = min(b - kept, b)
        idx = rng.integers(0, r, size=(take, r))
        means = g[idx].mean(axis=1)
        ok = means > 0
        nok = int(ok.sum())
        log_means[kept:kept + nok] = np.log(means[ok])
        kept += nok
        attempts += take
    return float(log_means.var(ddof=1))
