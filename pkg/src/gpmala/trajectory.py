"""Lazily-built realizations of the conditioned Gaussian process.

A trajectory draws joint (value, gradient) samples at requested points and
folds the draws it decides to keep back in as exact conditioning data
("anchors"), so that the realization stays coherent as the Langevin chain
revisits regions.  Admission uses the deviation-threshold rule: a draw is
anchored only when it differs from the current conditional mean by more
than ``admission_threshold`` in Euclidean norm.  Once the anchor list
outgrows ``anchor_cap``, conditioning falls back to the cap anchors
nearest to the query as seen by the covariance filter.

The draw path is called once per MCMC step, so it is written to minimize
array-op count: one fused kernel evaluation covers the base data and all
anchors, and the anchor-block factor is maintained together with its
inverse so conditioning is a matrix product, not a triangular solve.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import IllConditionedGramError
from .gp import PosteriorGP, SQRT5, joint_kernel_blocks, kernel_matrix, prior_joint_block

ANCHOR_CAP_DEFAULT = 500
_JIT_START = 1e-10
_JIT_MAX = 1e-4


def _chol_with_jitter(mat: np.ndarray, scale_diag: np.ndarray):
    """Cholesky with component-scaled escalating jitter."""
    jit = _JIT_START
    while True:
        try:
            return np.linalg.cholesky(mat + np.diag(jit * scale_diag))
        except np.linalg.LinAlgError:
            if jit >= _JIT_MAX:
                raise IllConditionedGramError(
                    "trajectory covariance not factorizable"
                ) from None
            jit *= 10.0


def _chol_small(a: np.ndarray, jit_diag: np.ndarray) -> np.ndarray:
    """Lower Cholesky of a small SPD matrix with escalating jitter,
    loop-based to avoid LAPACK call overhead in the per-step sampler."""
    n = a.shape[0]
    jit = _JIT_START
    while True:
        l = np.zeros((n, n))
        ok = True
        for i in range(n):
            s = a[i, i] + jit * jit_diag[i]
            for k in range(i):
                s -= l[i, k] * l[i, k]
            if s <= 0.0:
                ok = False
                break
            l[i, i] = math.sqrt(s)
            inv = 1.0 / l[i, i]
            for j in range(i + 1, n):
                t = a[j, i]
                for k in range(i):
                    t -= l[j, k] * l[i, k]
                l[j, i] = t * inv
        if ok:
            return l
        if jit >= _JIT_MAX:
            raise IllConditionedGramError("trajectory covariance not factorizable")
        jit *= 10.0


class TrajectoryState:
    """One incrementally-conditioned realization of the base posterior GP.

    Confine each instance to a single worker; independent trajectories get
    independent seeds.  Anchors only grow; removal never happens.
    """

    def __init__(self, base: PosteriorGP, admission_threshold: float | None = None,
                 seed=0, anchor_cap: int = ANCHOR_CAP_DEFAULT,
                 values_only: bool = False):
        self.base = base
        self.params = base.params
        d = self.params.dim
        self.dim = d
        self.block = 1 if values_only else d + 1
        self.values_only = values_only
        if admission_threshold is None:
            # scale-free default: a hundredth of the prior standard deviation
            admission_threshold = 0.01 * math.sqrt(self.params.sigma2)
        if admission_threshold < 0:
            raise ValueError("admission threshold must be nonnegative")
        self.admission_threshold = float(admission_threshold)
        self.anchor_cap = int(anchor_cap)
        self.seed = seed
        self.rng = np.random.default_rng(seed)

        self._prior_block = prior_joint_block(self.params)
        self._prior_mean = np.zeros(d + 1)
        self._prior_mean[0] = self.params.beta
        self._jit_diag = np.diag(self._prior_block).copy()
        self._ell = self.params.lengthscales
        self._s2 = self.params.sigma2
        self._c_ell = 5.0 / (3.0 * self._ell * self._ell)
        self._nbase = base.data.n
        self._key_index: dict[bytes, int] = {}

        self.n_anchors = 0
        b = self.block
        cap0 = 16
        self._pts = np.empty((cap0, d))            # anchor locations
        self._vals = np.empty((cap0, d + 1))       # stored (value, gradient)
        self._mean0 = np.empty(cap0 * b)           # base joint mean, kept comps
        self._wall = np.empty((self._nbase, cap0 * b))  # base-solved crosses
        self._lc = np.zeros((cap0 * b, cap0 * b))  # incremental anchor factor
        self._lcinv = np.zeros((cap0 * b, cap0 * b))
        self._u = np.empty(cap0 * b)               # Lc^{-1} residual
        self._factored = True
        self._qcache_key = None
        self._qcache = None
        self._last = None

    # -- public views --------------------------------------------------------

    @property
    def anchors(self):
        """Admitted (point, value, gradient) triples, in admission order."""
        a = self.n_anchors
        return [(self._pts[i].copy(), float(self._vals[i, 0]), self._vals[i, 1:].copy())
                for i in range(a)]

    @property
    def gram_factor(self) -> np.ndarray:
        """Lower-triangular factor over the maintained anchor block."""
        if not self._factored:
            raise IllConditionedGramError(
                "global anchor factor not maintained past the anchor cap")
        m = self.n_anchors * self.block
        return self._lc[:m, :m].copy()

    def anchor_block_covariance(self) -> np.ndarray:
        """Base-posterior joint covariance over all anchors (oracle path)."""
        a = self.n_anchors
        b = self.block
        pts = self._pts[:a]
        sig = joint_kernel_blocks(self.params, pts, pts)[:, :b, :, :b].reshape(a * b, a * b)
        wall = self._wall[:, :a * b]
        if wall.shape[0]:
            sig = sig - wall.T @ wall
        return sig

    # -- fused kernel pieces ---------------------------------------------------

    def _pieces(self, x: np.ndarray, idx=None):
        """One fused kernel pass: query against base points and anchors.

        Returns (mean0, cov0, wx, cross) where cross is the base-posterior
        cross-covariance (anchor kept-components) x (query components), or
        None when there are no anchors to use.
        """
        base = self.base
        d = self.dim
        b = self.block
        a = self.n_anchors if idx is None else len(idx)
        apts = self._pts[:self.n_anchors] if idx is None else self._pts[idx]
        n = self._nbase
        if n:
            cat = np.concatenate([base.data.points, apts], axis=0)
        else:
            cat = apts
        r = x - cat                               # (n + a, d)
        u = np.abs(r) / self._ell
        e = np.exp(-SQRT5 * u)
        su = SQRT5 * u
        f = (1.0 + su + (5.0 / 3.0) * (u * u)) * e
        phi1 = (-self._c_ell) * r * (1.0 + su) * e   # d/dx of the factor
        if d == 2:
            pe = f[:, ::-1]
            kval = self._s2 * (f[:, 0] * f[:, 1])
        else:
            dd = f.shape[1]
            pre = np.ones_like(f)
            suf = np.ones_like(f)
            for i in range(1, dd):
                pre[:, i] = pre[:, i - 1] * f[:, i - 1]
                suf[:, dd - 1 - i] = suf[:, dd - i] * f[:, dd - i]
            pe = pre * suf
            kval = self._s2 * f.prod(axis=1)
        gvals = (self._s2 * pe) * phi1            # (n + a, d), d/dx_i of kernel

        # base posterior pieces
        if n:
            h = np.empty((n, d + 1))
            h[:, 0] = kval[:n]
            h[:, 1:] = gvals[:n]
            wx = base.factor_inv @ h
            mean0 = self._prior_mean + h.T @ base.weights
            cov0 = self._prior_block - wx.T @ wx
        else:
            wx = np.zeros((0, d + 1))
            mean0 = self._prior_mean.copy()
            cov0 = self._prior_block.copy()

        if a == 0:
            return mean0, cov0, wx, None

        # anchor cross blocks: Cov(D_c Z(p_i), D_e Z(x))
        kv = kval[n:]
        gv = gvals[n:]
        cross = np.empty((a, b, d + 1))
        cross[:, 0, 0] = kv
        cross[:, 0, 1:] = gv
        if b > 1:
            cross[:, 1:, 0] = -gv
            fa = f[n:]
            ph = phi1[n:]
            pea = pe[n:]
            psi = self._c_ell * (1.0 + SQRT5 * u[n:] - 5.0 * (u[n:] * u[n:])) * e[n:]
            for i in range(d):
                cross[:, 1 + i, 1 + i] = self._s2 * pea[:, i] * psi[:, i]
                for j in range(i + 1, d):
                    if d == 2:
                        pij = 1.0
                    else:
                        keep = [k for k in range(d) if k != i and k != j]
                        pij = fa[:, keep].prod(axis=1) if keep else 1.0
                    off = -self._s2 * pij * ph[:, i] * ph[:, j]
                    cross[:, 1 + i, 1 + j] = off
                    cross[:, 1 + j, 1 + i] = off
        cross = cross.reshape(a * b, d + 1)
        if n:
            if idx is None:
                wall = self._wall[:, :a * b]
            else:
                cols = (np.asarray(idx)[:, None] * b + np.arange(b)[None, :]).ravel()
                wall = self._wall[:, cols]
            cross = cross - wall.T @ wx
        return mean0, cov0, wx, cross

    def _conditional(self, x: np.ndarray):
        """Conditional law at x plus the pieces an admission would reuse."""
        a = self.n_anchors
        if a == 0 or self._factored:
            mean0, cov0, wx, cross = self._pieces(x)
            if a == 0:
                return mean0, cov0, mean0, wx, None, None
            m = a * self.block
            s = self._lcinv[:m, :m] @ cross
            mean = mean0 + s.T @ self._u[:m]
            cov = cov0 - s.T @ s
            return mean, cov, mean0, wx, s, cross
        idx = self._nearest_by_covariance(x)
        lq, lqinv, uq = self._q_factor(idx)
        mean0, cov0, wx, cross = self._pieces(x, idx)
        s = lqinv @ cross
        mean = mean0 + s.T @ uq
        cov = cov0 - s.T @ s
        return mean, cov, mean0, wx, None, None

    def _nearest_by_covariance(self, x: np.ndarray) -> np.ndarray:
        """Indices of the cap anchors with the largest posterior covariance
        to the query (the covariance filter)."""
        a = self.n_anchors
        kv = kernel_matrix(self.params, self._pts[:a], x[None, :])[:, 0]
        if self._nbase:
            # value row of the base cross is enough for the filter
            kx = kernel_matrix(self.params, self.base.data.points, x[None, :])[:, 0]
            wxv = self.base.factor_inv @ kx
            wall_val = self._wall[:, :a * self.block:self.block]
            kv = kv - wall_val.T @ wxv
        keep = self.anchor_cap
        return np.sort(np.argpartition(kv, a - keep)[a - keep:])

    def _q_factor(self, idx: np.ndarray):
        """Factor over a truncated anchor subset, cached on the index set."""
        key = idx.tobytes()
        if self._qcache_key == key:
            return self._qcache
        b = self.block
        pts = self._pts[idx]
        cols = (idx[:, None] * b + np.arange(b)[None, :]).ravel()
        wall = self._wall[:, cols]
        q = len(idx) * b
        sig = joint_kernel_blocks(self.params, pts, pts)[:, :b, :, :b].reshape(q, q)
        if wall.shape[0]:
            sig = sig - wall.T @ wall
        lq = _chol_with_jitter(sig, np.tile(self._jit_diag[:b], len(idx)))
        lqinv = solve_triangular(lq, np.eye(q), lower=True, check_finite=False)
        resid = self._vals[idx, :b].ravel() - self._mean0[cols]
        uq = lqinv @ resid
        self._qcache_key = key
        self._qcache = (lq, lqinv, uq)
        return self._qcache

    # -- operations --------------------------------------------------------------

    def draw_at(self, x) -> tuple[float, np.ndarray]:
        """Sample (Z(x), grad Z(x)) given base data and current anchors.

        Re-querying an anchor point replays the stored draw exactly and
        consumes no randomness.
        """
        x = np.asarray(x, dtype=float).ravel()
        if not all(map(math.isfinite, x)):
            raise ValueError("non-finite query point")
        hit = self._key_index.get(x.tobytes())
        if hit is not None:
            v = self._vals[hit]
            return float(v[0]), v[1:].copy()
        mean, cov, mean0, wx, s, cross = self._conditional(x)
        lo = _chol_small(cov, self._jit_diag)
        z = mean + lo @ self.rng.standard_normal(self.dim + 1)
        self._last = (x, mean, cov, mean0, wx, s, cross)
        return float(z[0]), z[1:].copy()

    def conditional_mean_at(self, x) -> tuple[float, np.ndarray]:
        """Mean of the current conditional law at x (value, gradient)."""
        x = np.asarray(x, dtype=float).ravel()
        hit = self._key_index.get(x.tobytes())
        if hit is not None and not self.values_only:
            v = self._vals[hit]
            return float(v[0]), v[1:].copy()
        mean, _, _, _, _, _ = self._conditional(x)
        return float(mean[0]), mean[1:].copy()

    def admit(self, x, value: float, gradient) -> bool:
        """Anchor the draw iff its deviation from the conditional mean
        exceeds the threshold; returns the decision."""
        x = np.asarray(x, dtype=float).ravel()
        gradient = np.asarray(gradient, dtype=float).ravel()
        if self._last is not None and (self._last[0] is x
                                       or np.array_equal(self._last[0], x)):
            _, mean, cov, mean0, wx, s, cross = self._last
        else:
            if x.tobytes() in self._key_index:
                return False
            mean, cov, mean0, wx, s, cross = self._conditional(x)
        dev = 0.0
        dev += (value - mean[0]) ** 2
        for i in range(self.dim):
            dev += (gradient[i] - mean[1 + i]) ** 2
        if math.sqrt(dev) <= self.admission_threshold:
            return False
        obs = np.concatenate(([value], gradient))
        self._append(x, obs, mean, cov, mean0, wx, s, cross)
        return True

    # -- growth ---------------------------------------------------------------

    def _ensure_capacity(self):
        cap = self._pts.shape[0]
        if self.n_anchors < cap:
            return
        b = self.block
        self._pts = np.concatenate([self._pts, np.empty((cap, self.dim))])
        self._vals = np.concatenate([self._vals, np.empty((cap, self.dim + 1))])
        self._mean0 = np.concatenate([self._mean0, np.empty(cap * b)])
        self._wall = np.concatenate(
            [self._wall, np.empty((self._wall.shape[0], cap * b))], axis=1)
        m = 2 * cap * b
        lc = np.zeros((m, m))
        lc[:cap * b, :cap * b] = self._lc
        lcinv = np.zeros((m, m))
        lcinv[:cap * b, :cap * b] = self._lcinv
        self._lc, self._lcinv = lc, lcinv
        self._u = np.concatenate([self._u, np.empty(cap * b)])

    def _append(self, x, obs, mean, cov, mean0, wx, s, cross):
        self._ensure_capacity()
        a = self.n_anchors
        b = self.block
        self._pts[a] = x
        self._vals[a] = obs
        self._mean0[a * b:(a + 1) * b] = mean0[:b]
        if self._nbase:
            self._wall[:, a * b:(a + 1) * b] = wx[:, :b]
        if self._factored and a + 1 <= self.anchor_cap:
            m = a * b
            # Schur complement of the new block is the conditional covariance
            dmat = cov[:b, :b]
            ld = _chol_small(0.5 * (dmat + dmat.T), self._jit_diag[:b])
            ldinv = solve_triangular(ld, np.eye(b), lower=True, check_finite=False)
            if a > 0:
                s2t = s[:, :b].T
                self._lc[m:m + b, :m] = s2t
                self._lcinv[m:m + b, :m] = -ldinv @ (s2t @ self._lcinv[:m, :m])
            self._lc[m:m + b, m:m + b] = ld
            self._lcinv[m:m + b, m:m + b] = ldinv
            self._u[m:m + b] = ldinv @ (obs[:b] - mean[:b])
        else:
            self._factored = False
        self._key_index[self._pts[a].tobytes()] = a
        self.n_anchors = a + 1
        self._qcache_key = None
        self._qcache = None
        self._last = None
