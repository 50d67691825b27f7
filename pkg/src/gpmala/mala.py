"""Metropolis-adjusted Langevin sampling.

Two drivers share the same proposal/accept logic: one against a
deterministic log-density with gradient, one against a lazily-conditioned
GP trajectory.  Proposals outside a rectangular domain are auto-rejected,
which is equivalent to a prior vanishing outside the box.  Step size can
adapt toward a target acceptance rate during burn-in only, so the frozen
chain remains a valid MALA.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InsufficientChainError
from .trajectory import TrajectoryState

TARGET_ACCEPTANCE = 0.574      # optimal-scaling MALA rate
_TAU_BOUNDS = (1e-8, 1e4)


@dataclass
class MalaConfig:
    """Chain settings; ``step_size`` is the Langevin tau."""

    step_size: float = 0.1
    max_steps: int = 1000
    burn_in_fraction: float = 0.2
    thinning: int = 1
    seed: int | None = 0
    adapt_step: bool = True
    target_rate: float = TARGET_ACCEPTANCE

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ValueError("burn_in_fraction must be in [0, 1)")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")


@dataclass
class Chain:
    """MALA output.  ``accepted[k]`` tells whether state k was entered by
    an accepted proposal (``accepted[0]`` is True for the start), so a
    rejected step k leaves ``states[k+1] == states[k]`` exactly."""

    states: np.ndarray
    log_values: np.ndarray
    gradients: np.ndarray
    accepted: np.ndarray
    step_size: float

    @property
    def acceptance_rate(self) -> float:
        if self.accepted.size < 2:
            return 1.0
        return float(self.accepted[1:].mean())


def log_proposal(xp, x, grad, tau: float) -> float:
    """Log-density (up to a constant) of the Langevin proposal kernel."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    xp = np.asarray(xp, dtype=float)
    x = np.asarray(x, dtype=float)
    grad = np.asarray(grad, dtype=float)
    diff = xp - x - tau * grad
    return float(-(diff @ diff) / (4.0 * tau))


def _in_domain(x: np.ndarray, domain) -> bool:
    if domain is None:
        return True
    lo, hi = domain
    return bool(np.all(x >= lo) and np.all(x <= hi))


def mala_step_deterministic(log_pi, grad_log_pi, current, tau: float,
                            rng: np.random.Generator, domain=None):
    """One MALA transition against a deterministic target.

    ``current`` is a (point, value, gradient) triple consistent with the
    target.  A proposal with non-finite target (or outside the domain) is
    auto-rejected, never raised.  Returns (next triple, accepted flag).
    """
    x, val, grad = current
    x = np.asarray(x, dtype=float)
    grad = np.asarray(grad, dtype=float)
    prop = x + tau * grad + np.sqrt(2.0 * tau) * rng.standard_normal(x.size)
    if not _in_domain(prop, domain):
        return (x, val, grad), False
    val_p = float(log_pi(prop))
    if not np.isfinite(val_p):
        return (x, val, grad), False
    grad_p = np.asarray(grad_log_pi(prop), dtype=float)
    alpha = min(0.0, val_p - val
                + log_proposal(x, prop, grad_p, tau)
                - log_proposal(prop, x, grad, tau))
    if np.log(rng.uniform()) <= alpha:
        return (prop, val_p, grad_p), True
    return (x, val, grad), False


def run_mala_deterministic(log_pi, grad_log_pi, start, config: MalaConfig,
                           domain=None) -> Chain:
    """Run a full chain against a deterministic log-density."""
    import math

    rng = np.random.default_rng(config.seed)
    x = np.asarray(start, dtype=float).ravel()
    d = x.size
    val = float(log_pi(x))
    if not np.isfinite(val):
        raise ValueError("start point has non-finite target value")
    grad = np.asarray(grad_log_pi(x), dtype=float)
    k_max = config.max_steps
    states = np.empty((k_max, d))
    log_values = np.empty(k_max)
    gradients = np.empty((k_max, d))
    accepted = np.zeros(k_max, dtype=bool)
    states[0], log_values[0], gradients[0] = x, val, grad
    accepted[0] = True
    tau = config.step_size
    log_tau = math.log(tau)
    burn_end = int(np.floor(config.burn_in_fraction * k_max))
    adapt = config.adapt_step
    target = config.target_rate
    lo = hi = None
    if domain is not None:
        lo = np.asarray(domain[0], dtype=float)
        hi = np.asarray(domain[1], dtype=float)
    for k in range(1, k_max):
        xi = rng.standard_normal(d)
        prop = x + tau * grad + math.sqrt(2.0 * tau) * xi
        alpha = -np.inf
        inside = lo is None or (np.all(prop >= lo) and np.all(prop <= hi))
        if inside:
            val_p = float(log_pi(prop))
            if math.isfinite(val_p):
                grad_p = np.asarray(grad_log_pi(prop), dtype=float)
                dfwd = prop - x - tau * grad
                dbwd = x - prop - tau * grad_p
                alpha = min(0.0, val_p - val
                            + (float(dfwd @ dfwd) - float(dbwd @ dbwd)) / (4.0 * tau))
                if math.log(rng.uniform()) <= alpha:
                    x, val, grad = prop, val_p, grad_p
                    accepted[k] = True
        if adapt and k <= burn_end:
            log_tau += (k ** -0.6) * (math.exp(alpha) - target)
            tau = math.exp(log_tau)
        states[k], log_values[k], gradients[k] = x, val, grad
    return Chain(states, log_values, gradients, accepted, tau)


def run_mala_on_trajectory(state: TrajectoryState, start, config: MalaConfig,
                           domain=None) -> Chain:
    """Run MALA against one GP realization, conditioning as it goes.

    Every proposal is drawn from the trajectory and offered to the
    admission rule (rejected proposals included: they were genuinely
    sampled and constrain the realization).  The trajectory object passed
    in reflects all admissions afterwards.
    """
    import math

    rng = np.random.default_rng(config.seed)
    x = np.asarray(start, dtype=float).ravel()
    d = x.size
    val, grad = state.draw_at(x)
    state.admit(x, val, grad)
    k_max = config.max_steps
    states = np.empty((k_max, d))
    log_values = np.empty(k_max)
    gradients = np.empty((k_max, d))
    accepted = np.zeros(k_max, dtype=bool)
    states[0], log_values[0], gradients[0] = x, val, grad
    accepted[0] = True
    tau = config.step_size
    log_tau = math.log(tau)
    burn_end = int(np.floor(config.burn_in_fraction * k_max))
    adapt = config.adapt_step
    target = config.target_rate
    lo = hi = None
    if domain is not None:
        lo = np.asarray(domain[0], dtype=float)
        hi = np.asarray(domain[1], dtype=float)
    for k in range(1, k_max):
        xi = rng.standard_normal(d)
        prop = x + tau * grad + math.sqrt(2.0 * tau) * xi
        alpha = -np.inf
        inside = lo is None or (np.all(prop >= lo) and np.all(prop <= hi))
        if inside:
            val_p, grad_p = state.draw_at(prop)
            state.admit(prop, val_p, grad_p)
            dfwd = prop - x - tau * grad
            dbwd = x - prop - tau * grad_p
            alpha = min(0.0, val_p - val
                        + (float(dfwd @ dfwd) - float(dbwd @ dbwd)) / (4.0 * tau))
            if math.log(rng.uniform()) <= alpha:
                x, val, grad = prop, val_p, grad_p
                accepted[k] = True
        if adapt and k <= burn_end:
            log_tau += (k ** -0.6) * (math.exp(alpha) - target)
            tau = math.exp(log_tau)
        states[k], log_values[k], gradients[k] = x, val, grad
    return Chain(states, log_values, gradients, accepted, tau)


def postprocess(chain_states, burn_in_fraction: float, thinning: int) -> np.ndarray:
    """Drop the burn-in prefix, keep every ``thinning``-th state.

    Accepts a Chain or a raw (K, d) state array; returns
    ``floor((K - burn) / thinning)`` rows.
    """
    states = chain_states.states if isinstance(chain_states, Chain) else np.asarray(chain_states)
    k = states.shape[0]
    if k == 0:
        raise InsufficientChainError("empty chain")
    if thinning < 1:
        raise ValueError("thinning must be >= 1")
    start = int(np.floor(burn_in_fraction * k))
    remaining = k - start
    if remaining <= 0 or thinning > remaining:
        raise InsufficientChainError(
            f"post-processing leaves no states (K={k}, burn={start}, thin={thinning})")
    kept = remaining // thinning
    idx = start + np.arange(kept) * thinning
    return states[idx]


def tune_step_size(target_rate: float, log_pi, grad_log_pi, start,
                   config: MalaConfig, domain=None,
                   pilot_steps: int = 5000) -> float:
    """Stochastic-approximation step-size tuning against a pilot target.

    Adapts during the pilot's burn-in only and freezes afterwards.  Falls
    back to the configured step size when adaptation diverges out of
    ``[1e-8, 1e4]``.
    """
    if not 0.0 < target_rate < 1.0:
        raise ValueError("target_rate must lie strictly inside (0, 1)")
    if not config.adapt_step:
        return config.step_size
    pilot = MalaConfig(step_size=config.step_size, max_steps=pilot_steps,
                       burn_in_fraction=0.5, thinning=1, seed=config.seed,
                       adapt_step=True, target_rate=target_rate)
    chain = run_mala_deterministic(log_pi, grad_log_pi, start, pilot, domain)
    tau = chain.step_size
    if not (_TAU_BOUNDS[0] <= tau <= _TAU_BOUNDS[1]):
        return config.step_size
    return tau
