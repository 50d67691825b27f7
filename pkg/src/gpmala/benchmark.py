"""Analytical 2D benchmark with closed-form ground truth, plus metrics.

The target density is proportional to ``exp(y(x))`` on the box [-1, 8]^2,
with ``y`` a two-mode quartic surface; the nuisance factor ``exp(Z - 1/2)``
(Z standard normal) has unit mean, so the expectation over Z is explicit
and the log-estimate noise is homoscedastic: ``(e - 1) / R``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .mala import MalaConfig, postprocess, run_mala_deterministic

DOMAIN_LOWER = np.array([-1.0, -1.0])
DOMAIN_UPPER = np.array([8.0, 8.0])

W1_MAX_POINTS = 2000


def g_analytic(x, z: float) -> float:
    """Positive integrand g(x, z); may underflow to 0 for extreme x."""
    x = np.asarray(x, dtype=float)
    return float(np.exp(y_exact(x) + z - 0.5))


def y_exact(x) -> float | np.ndarray:
    """Exact log of the Z-expectation of g (the nuisance factor has unit
    mean, so this is just the quartic exponent)."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    out = -(x1 * x1 * x2 * x2 + x1 * x1 + 0.95 * x2 * x2 - 8.0 * x1 - 8.0 * x2) / 2.0
    return float(out) if out.ndim == 0 else out


def grad_y_exact(x) -> np.ndarray:
    """Analytic gradient of y_exact."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    g1 = -(2.0 * x1 * x2 * x2 + 2.0 * x1 - 8.0) / 2.0
    g2 = -(2.0 * x1 * x1 * x2 + 1.9 * x2 - 8.0) / 2.0
    return np.stack([g1, g2], axis=-1)


def benchmark_noise_variance(r: int) -> float:
    """Homoscedastic variance of the log-mean estimate: (e - 1) / R."""
    if r < 1:
        raise ValueError("need at least one replication")
    return (np.e - 1.0) / r


@dataclass
class AnalyticProblem:
    """The benchmark wired for the calibration loop."""

    replications: int = 100
    seed: int = 0
    lower: np.ndarray = field(default_factory=lambda: DOMAIN_LOWER.copy())
    upper: np.ndarray = field(default_factory=lambda: DOMAIN_UPPER.copy())

    dim: int = 2

    @property
    def domain(self):
        return self.lower, self.upper

    def sample_log_g(self, x, r: int, rng: np.random.Generator) -> np.ndarray:
        """R log-domain draws of g(x, Z); exact in log-space, no underflow."""
        z = rng.standard_normal(r)
        return y_exact(np.asarray(x, dtype=float)) + z - 0.5

    def noise_var(self, r: int) -> float:
        return benchmark_noise_variance(r)

    def has_exact(self) -> bool:
        return True

    def log_density(self, x):
        return y_exact(x)

    def grad_log_density(self, x):
        return grad_y_exact(x)


def reference_posterior_samples(ktilde: int, seed, *, thinning: int = 8,
                                burn_in: float = 0.2, tau0: float = 0.1) -> np.ndarray:
    """Near-independent draws from the exact target via deterministic MALA.

    Runs one adaptive chain long enough that burn-in removal and thinning
    leave exactly ``ktilde`` points.
    """
    if ktilde < 1:
        raise ValueError("ktilde must be positive")
    k_max = int(np.ceil(ktilde * thinning / (1.0 - burn_in))) + thinning
    rng = np.random.default_rng(seed)
    start = rng.uniform(DOMAIN_LOWER, DOMAIN_UPPER)
    cfg = MalaConfig(step_size=tau0, max_steps=k_max, burn_in_fraction=burn_in,
                     thinning=thinning, seed=rng.integers(2**63), adapt_step=True)
    chain = run_mala_deterministic(y_exact, grad_y_exact, start, cfg,
                                   domain=(DOMAIN_LOWER, DOMAIN_UPPER))
    pts = postprocess(chain, burn_in, thinning)
    return pts[:ktilde]


def wasserstein1(samples_a: np.ndarray, samples_b: np.ndarray) -> float:
    """Exact W1 between two equal-size empirical measures.

    Solves the assignment problem on the Euclidean cost matrix; limited to
    2000 points per side.
    """
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if a.shape[0] != b.shape[0]:
        raise ValueError("sample sets must have equal counts")
    if a.shape[0] > W1_MAX_POINTS:
        raise ValueError(f"exact solver limited to {W1_MAX_POINTS} points")
    if a.shape[0] == 0:
        raise ValueError("empty sample sets")
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def wasserstein1_subsampled(samples_a, samples_b, n: int = 1000, seed=0) -> float:
    """W1 on equal-size seeded subsamples (the working metric for large sets)."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    n = min(n, a.shape[0], b.shape[0])
    rng = np.random.default_rng(seed)
    ia = rng.choice(a.shape[0], n, replace=False) if a.shape[0] > n else np.arange(n)
    ib = rng.choice(b.shape[0], n, replace=False) if b.shape[0] > n else np.arange(n)
    return wasserstein1(a[ia], b[ib])
