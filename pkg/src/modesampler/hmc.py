"""Classical Hamiltonian Monte Carlo: leapfrog integration, Metropolis
correction, and acceptance-rate tuning.

The potential is the negated log density, U(x) = -log pi(x).  Each chain
owns its RNG stream; the target is shared read-only.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .targets import TargetDistribution


class IntegrationError(Exception):
    """Trajectory hit a non-finite gradient; proposal must be rejected."""


@dataclass
class HmcParams:
    step_size: float
    n_steps: int = 10
    mass: Optional[np.ndarray] = None  # None = identity, 1-D = diagonal, 2-D = full
    jitter: float = 0.1

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0.0 <= self.jitter < 1.0:
            raise ValueError("jitter must be in [0, 1)")

    @property
    def trajectory_length(self) -> float:
        return self.step_size * self.n_steps


@dataclass
class ChainState:
    position: np.ndarray
    rng: np.random.Generator
    accepted: int = 0
    proposed: int = 0
    cached_logp: Optional[float] = None
    last_accept_prob: float = 0.0
    samples: list = field(default_factory=list)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


def _mass_chol(mass, dim):
    if mass is None:
        return None
    m = np.asarray(mass, dtype=float)
    if m.ndim == 1:
        return np.sqrt(m)
    return np.linalg.cholesky(m)


def sample_momentum(rng, mass, dim):
    z = rng.standard_normal(dim)
    if mass is None:
        return z
    m = np.asarray(mass, dtype=float)
    if m.ndim == 1:
        return np.sqrt(m) * z
    return np.linalg.cholesky(m) @ z


def kinetic_energy(p, mass=None) -> float:
    if mass is None:
        return 0.5 * float(p @ p)
    m = np.asarray(mass, dtype=float)
    if m.ndim == 1:
        return 0.5 * float(p @ (p / m))
    return 0.5 * float(p @ np.linalg.solve(m, p))


def leapfrog(target: TargetDistribution, x: np.ndarray, p: np.ndarray,
             step_size: float, n_steps: int,
             mass: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """n half-kick/drift/half-kick steps of the velocity Verlet scheme.

    Exactly reversible: integrating the output with negated momentum
    recovers the input.  A non-finite gradient anywhere aborts the
    trajectory (IntegrationError), which callers turn into a rejection.
    """
    x = np.array(x, dtype=float, copy=True)
    p = np.array(p, dtype=float, copy=True)
    minv = None
    if mass is not None:
        m = np.asarray(mass, dtype=float)
        minv = (1.0 / m) if m.ndim == 1 else np.linalg.inv(m)

    g = target.gradient(x)
    if not np.all(np.isfinite(g)):
        raise IntegrationError("non-finite gradient at trajectory start")
    for _ in range(n_steps):
        p = p + 0.5 * step_size * g
        if minv is None:
            x = x + step_size * p
        elif minv.ndim == 1:
            x = x + step_size * (minv * p)
        else:
            x = x + step_size * (minv @ p)
        try:
            g = target.gradient(x)
        except Exception as exc:
            raise IntegrationError(f"gradient failed mid-trajectory: {exc}") from exc
        if not np.all(np.isfinite(g)):
            raise IntegrationError("non-finite gradient mid-trajectory")
        p = p + 0.5 * step_size * g
    return x, p


def jittered_step_size(params: HmcParams, rng) -> float:
    """Per-proposal step size, uniform in [eps(1-j), eps(1+j)]."""
    if params.jitter == 0.0:
        rng.uniform()  # keep the stream layout independent of jitter
        return params.step_size
    return params.step_size * (1.0 + params.jitter * (2.0 * rng.uniform() - 1.0))


def hmc_step(state: ChainState, target: TargetDistribution,
             params: HmcParams) -> ChainState:
    """One Metropolis-corrected HMC transition, updating state in place."""
    rng = state.rng
    x = state.position
    p = sample_momentum(rng, params.mass, x.size)
    eps = jittered_step_size(params, rng)

    if state.cached_logp is None:
        state.cached_logp = target.log_density(x)
    h0 = -state.cached_logp + kinetic_energy(p, params.mass)

    state.proposed += 1
    try:
        x1, p1 = leapfrog(target, x, p, eps, params.n_steps, params.mass)
    except IntegrationError:
        state.last_accept_prob = 0.0
        return state
    logp1 = target.log_density(x1)
    if not np.isfinite(logp1):
        state.last_accept_prob = 0.0
        return state
    h1 = -logp1 + kinetic_energy(p1, params.mass)
    log_alpha = h0 - h1
    state.last_accept_prob = min(1.0, math.exp(min(log_alpha, 0.0)))
    if math.log(rng.uniform()) < log_alpha:
        state.position = x1
        state.cached_logp = logp1
        state.accepted += 1
    return state


@dataclass
class TuneResult:
    params: HmcParams
    trailing_acceptance: float
    in_band: bool
    steps_used: int


def tune_step_size(target: TargetDistribution, params: HmcParams,
                   goal: float = 0.65, trial_steps: int = 2000,
                   seed: int = 0, start: Optional[np.ndarray] = None,
                   window: int = 100, band: float = 0.05) -> TuneResult:
    """Stochastic-approximation step-size tuning toward a target acceptance.

    Multiplicative updates with decaying gain adjust eps after every trial
    transition; n_steps tracks eps so the trajectory length stays roughly
    constant.  Stops once the trailing window acceptance is within the band
    of the goal, or the budget runs out (in_band=False then).
    """
    if not 0.0 < goal < 1.0:
        raise ValueError("goal must be in (0, 1)")
    rng = np.random.default_rng(seed)
    x0 = np.zeros(target.dim) if start is None else np.array(start, dtype=float)
    state = ChainState(position=x0, rng=rng)
    length = params.trajectory_length
    log_eps = math.log(params.step_size)
    recent: deque = deque(maxlen=window)

    gain0, tau, kappa = 0.25, 50.0, 0.6
    steps = 0
    trailing = 0.0
    for t in range(trial_steps):
        eps = math.exp(log_eps)
        n = max(1, int(round(length / eps)))
        trial = HmcParams(step_size=eps, n_steps=n, mass=params.mass,
                          jitter=params.jitter)
        hmc_step(state, target, trial)
        recent.append(state.last_accept_prob)
        gain = gain0 / (1.0 + t / tau) ** kappa
        log_eps += gain * (state.last_accept_prob - goal)
        steps = t + 1
        if len(recent) == window:
            trailing = sum(recent) / window
            if abs(trailing - goal) <= band:
                break
    trailing = sum(recent) / len(recent) if recent else 0.0
    eps = math.exp(log_eps)
    tuned = HmcParams(step_size=eps, n_steps=max(1, int(round(length / eps))),
                      mass=params.mass, jitter=params.jitter)
    return TuneResult(params=tuned, trailing_acceptance=trailing,
                      in_band=abs(trailing - goal) <= band, steps_used=steps)
