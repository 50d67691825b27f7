"""Ensemble estimator and the sequential calibration loop.

M independent pipelines (GP trajectory -> MALA -> KDE) produce M density
reconstructions; their pointwise mean is the working estimate and their
pointwise spread drives where the expensive function gets evaluated next.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from . import benchmark as _benchmark
from .exceptions import IllConditionedGramError
from .gp import (
    FitConfig,
    KernelParams,
    TrainingData,
    condition,
    fit_hyperparameters,
    merge_duplicate_points,
)
from .kde import KdeModel, evaluate, evaluate_batch, fit_kde
from .mala import MalaConfig, postprocess, run_mala_on_trajectory
from .noise import mc_log_estimate_from_logs
from .trajectory import ANCHOR_CAP_DEFAULT, TrajectoryState

IV_POINTS = 10_000           # Monte-Carlo points for the integrated variance
_SF_SEED = 20_177            # fixed seed of the low-discrepancy candidate pool


@dataclass
class EnsembleEstimate:
    """M fitted KDE models plus the pooled MALA output they were built from."""

    models: list
    all_points: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.models) < 2:
            raise ValueError("ensemble needs at least two models")

    @property
    def m(self) -> int:
        return len(self.models)


def estimate_density(ens: EnsembleEstimate, x) -> float:
    """Ensemble-mean density at one point."""
    return float(np.mean([evaluate(mod, x) for mod in ens.models]))


def estimate_variance(ens: EnsembleEstimate, x) -> float:
    """Between-model variance of the density at one point (ddof=1)."""
    if len(ens.models) < 2:
        raise ValueError("variance needs at least two models")
    vals = np.array([evaluate(mod, x) for mod in ens.models])
    return float(vals.var(ddof=1))


def density_and_variance_batch(ens: EnsembleEstimate, x: np.ndarray):
    """Vectorized (mean, variance) of the ensemble at many points."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m = len(ens.models)
    mean = np.zeros(x.shape[0])
    msq = np.zeros(x.shape[0])
    for mod in ens.models:
        v = evaluate_batch(mod, x)
        mean += v
        msq += v * v
    mean /= m
    var = (msq - m * mean * mean) / (m - 1)
    return mean, np.maximum(var, 0.0)


def select_next_point(ens: EnsembleEstimate) -> np.ndarray:
    """Pooled candidate with the largest ensemble variance (ties: lowest
    index)."""
    if ens.all_points.shape[0] == 0:
        raise ValueError("empty candidate pool")
    _, var = density_and_variance_batch(ens, ens.all_points)
    return ens.all_points[int(np.argmax(var))].copy()


def select_batch(ens: EnsembleEstimate, batch_size: int,
                 min_separation: float) -> np.ndarray:
    """Greedy highest-variance selection under a separation constraint.

    When no remaining candidate clears the separation, the constraint is
    halved and the scan continues.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    pool = ens.all_points
    _, var = density_and_variance_batch(ens, pool)
    order = np.argsort(-var, kind="stable")
    used = np.zeros(pool.shape[0], dtype=bool)
    chosen: list[int] = []
    sep = float(min_separation)
    while len(chosen) < batch_size:
        picked = None
        for i in order:
            if used[i]:
                continue
            if chosen and sep > 0:
                dmin = np.min(np.linalg.norm(pool[chosen] - pool[i], axis=1))
                if dmin < sep:
                    continue
            picked = int(i)
            break
        if picked is None:
            if not np.all(used) and sep > 0:
                sep *= 0.5
                continue
            break   # pool genuinely exhausted
        used[picked] = True
        chosen.append(picked)
    return pool[chosen].copy()


def _candidate_pool(domain, pool_size: int, seed) -> np.ndarray:
    lo, hi = domain
    sampler = qmc.Halton(d=len(lo), scramble=True,
                         seed=np.random.default_rng(seed))
    return qmc.scale(sampler.random(pool_size), lo, hi)


def space_filling_next(existing: np.ndarray, domain, pool_size: int = 4096,
                       seed=_SF_SEED) -> np.ndarray:
    """Maximin pick from a fixed low-discrepancy candidate pool."""
    lo, hi = domain
    if np.any(np.asarray(hi) <= np.asarray(lo)):
        raise ValueError("degenerate domain")
    cand = _candidate_pool(domain, pool_size, seed)
    existing = np.atleast_2d(np.asarray(existing, dtype=float)) \
        if np.size(existing) else np.zeros((0, len(lo)))
    if existing.shape[0] == 0:
        return cand[0].copy()
    from scipy.spatial.distance import cdist

    dmin = cdist(cand, existing).min(axis=1)
    return cand[int(np.argmax(dmin))].copy()


def maximin_design(n: int, domain, pool_size: int = 4096, seed=_SF_SEED) -> np.ndarray:
    """Greedy maximin subset of a low-discrepancy pool (initial designs)."""
    from scipy.spatial.distance import cdist

    cand = _candidate_pool(domain, pool_size, seed)
    chosen = [0]
    dmin = cdist(cand, cand[[0]]).ravel()
    while len(chosen) < n:
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, cdist(cand, cand[[nxt]]).ravel())
    return cand[chosen].copy()


# ---------------------------------------------------------------------------
# Calibration loop
# ---------------------------------------------------------------------------


@dataclass
class RunBudget:
    """Evaluation budget of one calibration run."""

    n0: int
    n_max: int
    r: int
    m: int
    ktilde: int
    batch: int = 1

    def __post_init__(self):
        if min(self.n0, self.n_max, self.r, self.m, self.ktilde, self.batch) < 1:
            raise ValueError("budget fields must be positive")
        if self.n_max < self.n0:
            raise ValueError("n_max must be >= n0")


@dataclass
class CalibrationSettings:
    """Knobs of the round loop that are not part of the budget."""

    tau0: float = 0.1
    burn_in: float = 0.2
    thinning: int = 3
    gamma_factor: float = 0.01        # admission threshold, times prior std
    gamma_absolute: float | None = None   # overrides the scale-free rule
    anchor_cap: int = ANCHOR_CAP_DEFAULT
    fit_starts_first: int = 10
    fit_starts_later: int = 3
    fit_max_iter: int = 200
    workers: int = 1
    w1_subsample: int = 1000
    iv_points: int = IV_POINTS
    pool_size: int = 4096
    keep_samples: bool = True
    min_separation: float = 0.0
    tau_pilot: bool = True            # tune tau on the mean surface per round
    ascent_starts: bool = True        # climb the mean surface before sampling


@dataclass
class RoundRecord:
    """Everything recorded about one enrichment round."""

    n: int
    new_points: np.ndarray
    new_values: np.ndarray
    new_noise_vars: np.ndarray
    params: KernelParams
    w1: float
    integrated_variance: float
    acceptance_rate: float
    anchors_total: int
    wall_ms: float
    samples: np.ndarray | None = None
    next_points: np.ndarray | None = None


@dataclass
class CalibrationHistory:
    """Per-round records plus the final design state."""

    strategy: str
    seed: int
    budget: RunBudget
    records: list
    design: np.ndarray
    values: np.ndarray
    noise_vars: np.ndarray


def _observe(problem, points: np.ndarray, r: int, seed, start_index: int):
    """Evaluate the expensive function R times at each point.

    Returns (log-estimates, noise variances); the per-point RNG stream is
    keyed on the global design index so histories are reproducible no
    matter how rounds are grouped.
    """
    points = np.atleast_2d(points)
    vals = np.empty(points.shape[0])
    nvars = np.empty(points.shape[0])
    exact_nv = problem.noise_var(r) if hasattr(problem, "noise_var") else None
    for i, x in enumerate(points):
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, 2, start_index + i]))
        logs = problem.sample_log_g(x, r, rng)
        est, nv = mc_log_estimate_from_logs(logs)
        vals[i] = est
        nvars[i] = exact_nv if exact_nv is not None else nv
    return vals, nvars


def _mean_surface(gp):
    """Fast value/gradient evaluators of the posterior mean."""
    from .gp import value_cross_blocks

    params, x_tr, w = gp.params, gp.data.points, gp.weights

    def mu(x):
        h = value_cross_blocks(params, np.asarray(x, dtype=float)[None, :], x_tr)[0]
        return params.beta + float(h[0] @ w)

    def grad_mu(x):
        h = value_cross_blocks(params, np.asarray(x, dtype=float)[None, :], x_tr)[0]
        return h[1:] @ w

    return mu, grad_mu


def _ascend(mu, grad_mu, x0, domain, max_steps: int = 120) -> np.ndarray:
    """Backtracking gradient ascent on the mean surface, clipped to the
    domain; moves a tail start into the high-probability region so short
    chains spend their steps sampling, not climbing."""
    lo, hi = domain
    span = float(np.min(np.asarray(hi) - np.asarray(lo)))
    x = np.asarray(x0, dtype=float).copy()
    fx = mu(x)
    h = 0.05 * span
    for _ in range(max_steps):
        g = grad_mu(x)
        gn = float(np.linalg.norm(g))
        if gn < 1e-9 or h < 1e-4 * span:
            break
        prop = np.clip(x + (h / gn) * g, lo, hi)
        fp = mu(prop)
        if fp > fx:
            x, fx = prop, fp
            h *= 1.3
        else:
            h *= 0.5
    return x


def _chain_batch(payload):
    """Run a batch of trajectory chains; module-level for pickling."""
    gp, specs = payload
    out = []
    mu = grad_mu = None
    for spec in specs:
        start = spec["start"]
        if spec["ascent"]:
            if mu is None:
                mu, grad_mu = _mean_surface(gp)
            start = _ascend(mu, grad_mu, start, spec["domain"])
        traj = TrajectoryState(gp, admission_threshold=spec["gamma"],
                               seed=spec["traj_seed"],
                               anchor_cap=spec["anchor_cap"])
        cfg = MalaConfig(step_size=spec["tau0"], max_steps=spec["k_max"],
                         burn_in_fraction=spec["burn_in"],
                         thinning=spec["thinning"], seed=spec["chain_seed"],
                         adapt_step=True)
        chain = run_mala_on_trajectory(traj, start, cfg, domain=spec["domain"])
        pts = postprocess(chain, spec["burn_in"], spec["thinning"])[:spec["ktilde"]]
        model = fit_kde(pts)
        out.append((pts, model, chain.acceptance_rate, traj.n_anchors))
    return out


def _run_ensemble_round(gp, problem, budget, settings, seed, round_idx, executor):
    domain = problem.domain
    lo, hi = domain
    gamma = settings.gamma_factor * np.sqrt(gp.params.sigma2)
    k_max = int(np.ceil(budget.ktilde * settings.thinning
                        / (1.0 - settings.burn_in))) + settings.thinning
    specs = []
    for m in range(budget.m):
        ss = np.random.SeedSequence([seed, 1, round_idx, m])
        s_start, s_chain, s_traj = ss.spawn(3)
        start = np.random.default_rng(s_start).uniform(lo, hi)
        specs.append(dict(start=start, chain_seed=s_chain, traj_seed=s_traj,
                          tau0=settings.tau0, k_max=k_max,
                          burn_in=settings.burn_in, thinning=settings.thinning,
                          gamma=gamma, anchor_cap=settings.anchor_cap,
                          ktilde=budget.ktilde, domain=domain))
    if executor is None:
        results = _chain_batch((gp, specs))
    else:
        nw = settings.workers
        groups = [specs[i::nw] for i in range(nw)]
        parts = list(executor.map(_chain_batch, [(gp, g) for g in groups if g]))
        # regroup in chain order
        results = [None] * len(specs)
        for wi, part in enumerate(parts):
            for ci, res in enumerate(part):
                results[wi + ci * nw] = res
    points = np.concatenate([r[0] for r in results], axis=0)
    models = [r[1] for r in results]
    acc = float(np.mean([r[2] for r in results]))
    anchors = int(np.sum([r[3] for r in results]))
    return EnsembleEstimate(models, points,
                            meta=dict(n=gp.data.n, m=budget.m,
                                      ktilde=budget.ktilde)), acc, anchors


def run_calibration(problem, budget: RunBudget, strategy: str, seeds,
                    settings: CalibrationSettings | None = None,
                    reference: np.ndarray | None = None,
                    on_round=None) -> CalibrationHistory:
    """Run the full sequential procedure for one repetition.

    Each round evaluates the expensive function at the new design points,
    refits the surrogate, runs M trajectory chains, fits M KDE models,
    records metrics, and picks the next point(s) by the chosen strategy.
    Fully reproducible from ``seeds``.
    """
    if strategy not in ("var-based", "space-filling"):
        raise ValueError(f"unknown strategy {strategy!r}")
    settings = settings or CalibrationSettings()
    seed = int(seeds)
    d = problem.dim
    if budget.n0 < d + 2:
        raise ValueError("initial design too small")
    domain = problem.domain
    lo, hi = np.asarray(domain[0], dtype=float), np.asarray(domain[1], dtype=float)
    volume = float(np.prod(hi - lo))

    design = maximin_design(budget.n0, domain, settings.pool_size,
                            seed=np.random.SeedSequence([seed, 0]))
    values, noise_vars = _observe(problem, design, budget.r, seed, 0)

    iv_rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    iv_points = iv_rng.uniform(lo, hi, size=(settings.iv_points, d))

    executor = None
    if settings.workers > 1:
        executor = ProcessPoolExecutor(max_workers=settings.workers)

    records: list[RoundRecord] = []
    params = None
    new_points = design
    new_values, new_noise = values, noise_vars
    try:
        round_idx = 0
        while True:
            t0 = time.perf_counter()
            n = design.shape[0]
            mp, mv, mn = merge_duplicate_points(design, values, noise_vars)
            data = TrainingData(mp, mv, mn)
            extra = (params,) if params is not None else ()
            starts = settings.fit_starts_first if round_idx == 0 else settings.fit_starts_later
            cfg = FitConfig(n_starts=starts, max_iter=settings.fit_max_iter,
                            seed=seed + round_idx, extra_starts=extra)
            try:
                params = fit_hyperparameters(data, cfg)
                gp = condition(data, params)
            except IllConditionedGramError:
                # one retry with a fresh multi-start seed before giving up
                cfg = FitConfig(n_starts=starts, max_iter=settings.fit_max_iter,
                                seed=seed + round_idx + 10_000, extra_starts=extra)
                try:
                    params = fit_hyperparameters(data, cfg)
                    gp = condition(data, params)
                except IllConditionedGramError as exc:
                    raise RuntimeError(
                        f"round {round_idx} (N={n}): GP conditioning failed twice"
                    ) from exc

            ens, acc, anchors = _run_ensemble_round(
                gp, problem, budget, settings, seed, round_idx, executor)
            _, var_pool = density_and_variance_batch(ens, ens.all_points)
            _, var_iv = density_and_variance_batch(ens, iv_points)
            integrated_variance = volume * float(var_iv.mean())

            w1 = float("nan")
            if reference is not None:
                w1 = _benchmark.wasserstein1_subsampled(
                    ens.all_points, reference, n=settings.w1_subsample,
                    seed=np.random.SeedSequence([seed, 4, round_idx]))

            next_points = None
            if n < budget.n_max:
                k = min(budget.batch, budget.n_max - n)
                if strategy == "var-based":
                    if k == 1:
                        next_points = ens.all_points[int(np.argmax(var_pool))][None, :].copy()
                    else:
                        next_points = select_batch(ens, k, settings.min_separation)
                else:
                    pts = []
                    base = design
                    for _ in range(k):
                        p = space_filling_next(base, domain, settings.pool_size)
                        pts.append(p)
                        base = np.vstack([base, p])
                    next_points = np.asarray(pts)

            rec = RoundRecord(
                n=n, new_points=new_points, new_values=new_values,
                new_noise_vars=new_noise, params=params, w1=w1,
                integrated_variance=integrated_variance, acceptance_rate=acc,
                anchors_total=anchors,
                wall_ms=1e3 * (time.perf_counter() - t0),
                samples=ens.all_points if settings.keep_samples else None,
                next_points=next_points)
            records.append(rec)
            if on_round is not None:
                on_round(rec)
            if next_points is None:
                break
            new_values, new_noise = _observe(problem, next_points, budget.r,
                                             seed, design.shape[0])
            design = np.vstack([design, next_points])
            values = np.concatenate([values, new_values])
            noise_vars = np.concatenate([noise_vars, new_noise])
            new_points = next_points
            round_idx += 1
    finally:
        if executor is not None:
            executor.shutdown()

    return CalibrationHistory(strategy=strategy, seed=seed, budget=budget,
                              records=records, design=design, values=values,
                              noise_vars=noise_vars)
