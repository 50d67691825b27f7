"""Gaussian-process core: tensorized Matern 5/2 prior, maximum-likelihood
hyperparameters, and conditioning on noisy value observations.

The conditioned process supports joint (value, gradient) prediction, which
is what the Langevin sampler consumes.  All conditioning goes through one
Cholesky factorization of ``C + Gamma + jitter*I``; a dense-inverse oracle
is used only in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from .exceptions import IllConditionedGramError

SQRT5 = np.sqrt(5.0)

# Jitter policy: start at 1e-10 * sigma2 on the Gram diagonal, escalate
# tenfold until 1e-4 * sigma2, then give up.
JITTER_START = 1e-10
JITTER_MAX = 1e-4


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of the constant-mean Matern 5/2 prior."""

    beta: float
    sigma2: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if not np.isfinite(self.beta):
            raise ValueError("beta must be finite")
        if not (self.sigma2 > 0 and np.isfinite(self.sigma2)):
            raise ValueError("sigma2 must be positive and finite")
        if ls.ndim != 1 or not np.all((ls > 0) & np.isfinite(ls)):
            raise ValueError("lengthscales must be positive and finite")

    @property
    def dim(self) -> int:
        return self.lengthscales.size


@dataclass(frozen=True)
class TrainingData:
    """Design points with noisy log-mean observations.

    ``noise_vars`` is the diagonal of the heteroscedastic noise matrix;
    rows of ``points`` must be pairwise distinct (merge replicated designs
    with :func:`merge_duplicate_points` first).
    """

    points: np.ndarray
    values: np.ndarray
    noise_vars: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        vals = np.atleast_1d(np.asarray(self.values, dtype=float))
        nv = np.atleast_1d(np.asarray(self.noise_vars, dtype=float))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "noise_vars", nv)
        n = pts.shape[0]
        if vals.shape != (n,) or nv.shape != (n,):
            raise ValueError("points, values and noise_vars disagree on N")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(vals))):
            raise ValueError("non-finite training data")
        if np.any(nv < 0):
            raise ValueError("noise variances must be nonnegative")
        if n > 1:
            # pairwise-distinct rows; duplicates must be merged upstream
            order = np.lexsort(pts.T)
            if np.any(np.all(pts[order][1:] == pts[order][:-1], axis=1)):
                raise ValueError(
                    "duplicate design points; merge them with "
                    "merge_duplicate_points before conditioning"
                )

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def merge_duplicate_points(points, values, noise_vars):
    """Collapse repeated design points into single observations.

    Replicates at the same x carry independent noise, so the merged
    observation averages the values and divides the (averaged) noise
    variance by the replicate count.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    vals = np.asarray(values, dtype=float)
    nv = np.asarray(noise_vars, dtype=float)
    uniq, inverse = np.unique(pts, axis=0, return_inverse=True)
    m = uniq.shape[0]
    counts = np.bincount(inverse, minlength=m).astype(float)
    mvals = np.bincount(inverse, weights=vals, minlength=m) / counts
    mnv = np.bincount(inverse, weights=nv, minlength=m) / counts**2
    return uniq, mvals, mnv


# ---------------------------------------------------------------------------
# Kernel and its derivatives
# ---------------------------------------------------------------------------


def _dim_factors_f(params: KernelParams, a: np.ndarray, b: np.ndarray):
    """Per-dimension Matern 5/2 factors F of shape (n, m, d), with
    F = (1 + sqrt5*u + 5/3*u^2) exp(-sqrt5*u) and u = |a_i - b_j| / ell."""
    u = np.abs(a[:, None, :] - b[None, :, :])
    u /= params.lengthscales
    e = np.exp(-SQRT5 * u)
    return (1.0 + SQRT5 * u + (5.0 / 3.0) * u * u) * e


def _dim_factors_fg(params: KernelParams, a: np.ndarray, b: np.ndarray):
    """F plus its first derivative in the first argument (odd in r,
    zero at r = 0)."""
    ell = params.lengthscales
    r = a[:, None, :] - b[None, :, :]
    u = np.abs(r) / ell
    e = np.exp(-SQRT5 * u)
    su = SQRT5 * u
    f = (1.0 + su + (5.0 / 3.0) * u * u) * e
    phi1 = (-5.0 / 3.0 / (ell * ell)) * r * (1.0 + su) * e
    return f, phi1


def _per_dim_factors(params: KernelParams, a: np.ndarray, b: np.ndarray):
    """Per-dimension factors and both derivative pieces.

    Returns (F, phi1, psi) of shape (n, m, d) where, with r = a_i - b_j and
    u = |r| / ell,

        F    = (1 + sqrt5*u + 5/3*u^2) exp(-sqrt5*u)
        phi1 = d/da F                    (odd in r, zero at r = 0)
        psi  = d^2/(da db) F             (equals 5/(3 ell^2) at r = 0)
    """
    ell = params.lengthscales
    r = a[:, None, :] - b[None, :, :]
    u = np.abs(r) / ell
    e = np.exp(-SQRT5 * u)
    f = (1.0 + SQRT5 * u + (5.0 / 3.0) * u * u) * e
    c = 5.0 / (3.0 * ell * ell)
    phi1 = -c * r * (1.0 + SQRT5 * u) * e
    psi = c * (1.0 + SQRT5 * u - 5.0 * u * u) * e
    return f, phi1, psi


def _prod_except(f: np.ndarray) -> np.ndarray:
    """Leave-one-out product along the last axis, division-free."""
    d = f.shape[-1]
    pre = np.ones_like(f)
    suf = np.ones_like(f)
    for i in range(1, d):
        pre[..., i] = pre[..., i - 1] * f[..., i - 1]
        suf[..., d - 1 - i] = suf[..., d - i] * f[..., d - i]
    return pre * suf


def kernel_matrix(params: KernelParams, a: np.ndarray, b: np.ndarray | None = None):
    """Cross-covariance matrix sigma^2 * prod_i F_i between point sets."""
    a = np.atleast_2d(a)
    b = a if b is None else np.atleast_2d(b)
    return params.sigma2 * _dim_factors_f(params, a, b).prod(axis=-1)


def matern52_kernel(x, xp, params: KernelParams) -> float:
    """Tensorized Matern 5/2 covariance between two points."""
    x = np.asarray(x, dtype=float).ravel()
    xp = np.asarray(xp, dtype=float).ravel()
    if x.size != params.dim or xp.size != params.dim:
        raise ValueError("point dimension does not match params")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xp))):
        raise ValueError("non-finite inputs")
    return float(kernel_matrix(params, x[None, :], xp[None, :])[0, 0])


def kernel_gradients(x, xp, params: KernelParams):
    """First and cross-second kernel derivatives at a pair of points.

    Returns ``(g, h)`` with ``g[i] = dC/dx_i`` (derivative in the first
    argument) and ``h[i, j] = d2C/(dx_i dx'_j)``.
    """
    x = np.asarray(x, dtype=float).ravel()[None, :]
    xp = np.asarray(xp, dtype=float).ravel()[None, :]
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xp))):
        raise ValueError("non-finite inputs")
    blocks = joint_kernel_blocks(params, x, xp)
    return blocks[0, 1:, 0, 0].copy(), blocks[0, 1:, 0, 1:].copy()


def joint_kernel_blocks(params: KernelParams, a: np.ndarray, b: np.ndarray):
    """Full (value, gradient) prior cross-covariance blocks.

    Shape (n, d+1, m, d+1); component 0 is the field value, component 1+i
    the partial derivative in coordinate i taken at the owning point.
    """
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    n, d = a.shape
    m = b.shape[0]
    s2 = params.sigma2
    f, phi1, psi = _per_dim_factors(params, a, b)
    pe = _prod_except(f)
    out = np.empty((n, d + 1, m, d + 1))
    out[:, 0, :, 0] = s2 * f.prod(axis=-1)
    for i in range(d):
        gi = s2 * pe[..., i] * phi1[..., i]
        out[:, 1 + i, :, 0] = gi
        out[:, 0, :, 1 + i] = -gi
        out[:, 1 + i, :, 1 + i] = s2 * pe[..., i] * psi[..., i]
        for j in range(i + 1, d):
            keep = [k for k in range(d) if k != i and k != j]
            pij = f[..., keep].prod(axis=-1) if keep else 1.0
            cross = -s2 * pij * phi1[..., i] * phi1[..., j]
            out[:, 1 + i, :, 1 + j] = cross
            out[:, 1 + j, :, 1 + i] = cross
    return out


def value_cross_blocks(params: KernelParams, q: np.ndarray, x: np.ndarray):
    """Covariances of (value, gradient) at queries against plain values.

    Returns shape (nq, d+1, nx): ``[i, 0, n] = C(q_i, x_n)`` and
    ``[i, 1+a, n] = dC/dq_a (q_i, x_n)``.  This is the lean path used on
    every sampler step, so it avoids building the full joint blocks.
    """
    q = np.atleast_2d(q)
    x = np.atleast_2d(x)
    s2 = params.sigma2
    f, phi1 = _dim_factors_fg(params, q, x)
    pe = _prod_except(f)
    nq, d = q.shape
    out = np.empty((nq, d + 1, x.shape[0]))
    out[:, 0, :] = s2 * f.prod(axis=-1)
    for i in range(d):
        out[:, 1 + i, :] = s2 * pe[..., i] * phi1[..., i]
    return out


def prior_joint_block(params: KernelParams) -> np.ndarray:
    """Prior covariance of (value, gradient) at a single point."""
    d = params.dim
    blk = np.zeros((d + 1, d + 1))
    blk[0, 0] = params.sigma2
    diag = 5.0 * params.sigma2 / (3.0 * params.lengthscales**2)
    blk[1:, 1:] = np.diag(diag)
    return blk


# ---------------------------------------------------------------------------
# Factorization and likelihood
# ---------------------------------------------------------------------------


def _factorize(gram: np.ndarray, sigma2: float):
    """Cholesky of ``gram + jitter*sigma2*I`` under the escalation policy.

    Returns (lower factor, jitter actually used).  Raises
    IllConditionedGramError when even the largest jitter fails.
    """
    n = gram.shape[0]
    if n == 0:
        return np.zeros((0, 0)), JITTER_START
    eye = np.eye(n)
    jitter = JITTER_START
    while True:
        try:
            return np.linalg.cholesky(gram + jitter * sigma2 * eye), jitter
        except np.linalg.LinAlgError:
            if jitter >= JITTER_MAX:
                raise IllConditionedGramError(
                    f"Gram factorization failed at jitter {jitter:g}*sigma2"
                ) from None
            jitter *= 10.0


def log_marginal_likelihood(data: TrainingData, params: KernelParams) -> float:
    """Gaussian log marginal likelihood of the noisy observations."""
    if data.n < 1:
        raise ValueError("need at least one observation")
    gram = kernel_matrix(params, data.points) + np.diag(data.noise_vars)
    lo, _ = _factorize(gram, params.sigma2)
    resid = data.values - params.beta
    w = solve_triangular(lo, resid, lower=True, check_finite=False)
    return float(
        -0.5 * w @ w
        - np.log(np.diag(lo)).sum()
        - 0.5 * data.n * np.log(2.0 * np.pi)
    )


@dataclass
class FitConfig:
    """Search settings for maximum-likelihood hyperparameter estimation."""

    n_starts: int = 10
    max_iter: int = 200
    seed: int = 0
    lengthscale_span: tuple[float, float] = (0.01, 2.0)   # times domain width
    var_span: tuple[float, float] = (1e-4, 1e4)           # times var(y)
    extra_starts: tuple = ()                              # KernelParams seeds

    def __post_init__(self):
        if self.n_starts < 1 or self.max_iter < 1:
            raise ValueError("n_starts and max_iter must be positive")


SIGMA2_FLOOR = 1e-12


def _profiled_beta_and_lml(data: TrainingData, sigma2: float, ell: np.ndarray):
    """GLS-profiled beta and the resulting log likelihood."""
    params = KernelParams(0.0, sigma2, ell)
    gram = kernel_matrix(params, data.points) + np.diag(data.noise_vars)
    lo, _ = _factorize(gram, sigma2)
    wy = solve_triangular(lo, data.values, lower=True, check_finite=False)
    w1 = solve_triangular(lo, np.ones(data.n), lower=True, check_finite=False)
    denom = w1 @ w1
    beta = float(wy @ w1 / denom) if denom > 0 else 0.0
    resid = wy - beta * w1
    lml = float(
        -0.5 * resid @ resid
        - np.log(np.diag(lo)).sum()
        - 0.5 * data.n * np.log(2.0 * np.pi)
    )
    return beta, lml


def fit_hyperparameters(data: TrainingData, search_config: FitConfig | None = None) -> KernelParams:
    """Multi-start derivative-free ML fit of (sigma2, lengthscales).

    The search works in log-space with a Nelder-Mead simplex; the constant
    mean is profiled out in closed form at every evaluation.
    """
    if data.n < 2:
        raise ValueError("need at least two observations to fit")
    cfg = search_config or FitConfig()
    d = data.dim
    widths = data.points.max(axis=0) - data.points.min(axis=0)
    widths = np.where(widths > 0, widths, 1.0)
    var_y = max(float(np.var(data.values)), SIGMA2_FLOOR)

    def neg_lml(z):
        sigma2 = float(np.exp(z[0]))
        ell = np.exp(z[1:])
        if not np.all(np.isfinite(ell)) or not np.isfinite(sigma2):
            return np.inf
        try:
            _, lml = _profiled_beta_and_lml(data, sigma2, ell)
        except (IllConditionedGramError, FloatingPointError):
            return np.inf
        return -lml

    rng = np.random.default_rng(cfg.seed)
    lo_l, hi_l = cfg.lengthscale_span
    lo_v, hi_v = cfg.var_span
    starts = []
    for _ in range(cfg.n_starts):
        z = np.empty(1 + d)
        z[0] = np.log(var_y) + rng.uniform(np.log(lo_v), np.log(hi_v))
        z[1:] = np.log(widths) + rng.uniform(np.log(lo_l), np.log(hi_l), size=d)
        starts.append(z)
    for p in cfg.extra_starts:
        starts.append(np.concatenate(([np.log(p.sigma2)], np.log(p.lengthscales))))

    best_z, best_val = None, np.inf
    for z0 in starts:
        v0 = neg_lml(z0)
        if v0 < best_val:
            best_z, best_val = z0, v0
        if not np.isfinite(v0):
            continue
        res = minimize(neg_lml, z0, method="Nelder-Mead",
                       options={"maxiter": cfg.max_iter, "xatol": 1e-4, "fatol": 1e-6})
        if res.fun < best_val:
            best_z, best_val = res.x, res.fun
    if best_z is None or not np.isfinite(best_val):
        raise IllConditionedGramError("no hyperparameter start could be factorized")

    sigma2 = max(float(np.exp(best_z[0])), SIGMA2_FLOOR)
    ell = np.exp(best_z[1:])
    beta, _ = _profiled_beta_and_lml(data, sigma2, ell)
    return KernelParams(beta, sigma2, ell)


# ---------------------------------------------------------------------------
# Conditioning and prediction
# ---------------------------------------------------------------------------


@dataclass
class PosteriorGP:
    """Gaussian process conditioned on noisy value observations.

    Immutable after construction; safe to share across workers.
    ``gram_factor`` is the lower-triangular factor of C + Gamma + jitter*I
    and ``weights`` solves (C + Gamma + jitter*I) w = y - beta.
    """

    params: KernelParams
    data: TrainingData
    gram_factor: np.ndarray
    weights: np.ndarray
    jitter: float
    _factor_inv: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._factor_inv is None and self.data.n > 0:
            inv = solve_triangular(self.gram_factor, np.eye(self.data.n),
                                   lower=True, check_finite=False)
            object.__setattr__(self, "_factor_inv", inv)
        elif self._factor_inv is None:
            object.__setattr__(self, "_factor_inv", np.zeros((0, 0)))

    @property
    def factor_inv(self) -> np.ndarray:
        return self._factor_inv


def condition(data: TrainingData, params: KernelParams) -> PosteriorGP:
    """Condition the prior on the training data (Cholesky route)."""
    if data.n == 0:
        return PosteriorGP(params, data, np.zeros((0, 0)), np.zeros(0), 0.0)
    gram = kernel_matrix(params, data.points) + np.diag(data.noise_vars)
    lo, jitter = _factorize(gram, params.sigma2)
    resid = data.values - params.beta
    w = solve_triangular(lo, resid, lower=True, check_finite=False)
    alpha = solve_triangular(lo.T, w, lower=False, check_finite=False)
    return PosteriorGP(params, data, lo, alpha, jitter)


def predict(gp: PosteriorGP, query: np.ndarray):
    """Posterior mean and covariance of the field values at the queries."""
    q = np.atleast_2d(np.asarray(query, dtype=float))
    if q.shape[0] < 1:
        raise ValueError("need at least one query point")
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite query")
    params = gp.params
    kqq = kernel_matrix(params, q)
    if gp.data.n == 0:
        mean = np.full(q.shape[0], params.beta)
        return mean, kqq
    kxq = kernel_matrix(params, gp.data.points, q)
    mean = params.beta + kxq.T @ gp.weights
    v = gp.factor_inv @ kxq
    cov = kqq - v.T @ v
    di = np.einsum("ii->i", cov)
    di[:] = np.where(di < 0, 0.0, di)   # clamp tiny negative variances
    return mean, cov


def predict_joint_with_gradient(gp: PosteriorGP, x: np.ndarray):
    """Joint posterior law of (value, gradient) at one point.

    Returns a (d+1)-vector mean and a symmetric (d+1)x(d+1) covariance,
    component 0 being the value.
    """
    x = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite query")
    params = gp.params
    d = params.dim
    prior_mean = np.zeros(d + 1)
    prior_mean[0] = params.beta
    blk = prior_joint_block(params)
    if gp.data.n == 0:
        return prior_mean, blk
    h = value_cross_blocks(params, x[None, :], gp.data.points)[0]   # (d+1, N)
    mean = prior_mean + h @ gp.weights
    w = gp.factor_inv @ h.T                                          # (N, d+1)
    cov = blk - w.T @ w
    cov = 0.5 * (cov + cov.T)
    return mean, cov
