"""Wormhole-metric HMC: mode-pair metrics, the mollifying function, the
intermodal transport field, the implicit generalized leapfrog, and the
all-pairs wormhole network.

A network is immutable once built; registry changes produce a fresh
network that is swapped in between MCMC steps, so a chain never observes a
half-built one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .hmc import ChainState, HmcParams, IntegrationError, jittered_step_size
from .numerics import FixedPointError, fixed_point_solve
from .targets import TargetDistribution


@dataclass(frozen=True)
class Wormhole:
    """One mode pair: endpoints, unit intermodal direction, and geometry
    parameters (contraction eps_w, influence factor)."""

    end_a: np.ndarray
    end_b: np.ndarray
    eps_w: float
    influence: float
    direction: np.ndarray = field(init=False)
    length: float = field(init=False)

    def __post_init__(self):
        gap = self.end_b - self.end_a
        length = float(np.linalg.norm(gap))
        if length == 0.0:
            raise ValueError("wormhole endpoints must be distinct")
        if not 0.0 < self.eps_w <= 1.0:
            raise ValueError("eps_w must be in (0, 1]")
        if self.influence <= 0.0:
            raise ValueError("influence factor must be positive")
        object.__setattr__(self, "direction", gap / length)
        object.__setattr__(self, "length", length)


def mollifier(w: Wormhole, x: np.ndarray) -> float:
    """exp(-excess / F) where excess is the triangle-inequality slack of x
    relative to the wormhole segment; equals 1 exactly on the segment."""
    excess = (np.linalg.norm(x - w.end_a) + np.linalg.norm(w.end_b - x)
              - w.length)
    return math.exp(-max(excess, 0.0) / w.influence)


class WormholeNetwork:
    """All-pairs wormholes over registered mode locations.

    jump_prob is the per-integrator-step probability of routing the
    trajectory along the active wormhole's direction; logdet_correction
    toggles the metric volume term in the Hamiltonian.
    """

    def __init__(self, wormholes, jump_prob: float = 0.68,
                 logdet_correction: bool = True):
        if not 0.0 <= jump_prob <= 1.0:
            raise ValueError("jump_prob must be in [0, 1]")
        self.wormholes = list(wormholes)
        self.jump_prob = jump_prob
        self.logdet_correction = logdet_correction
        n = len(self.wormholes)
        if n:
            self._ends_a = np.ascontiguousarray([w.end_a for w in self.wormholes])
            self._ends_b = np.ascontiguousarray([w.end_b for w in self.wormholes])
            self._lengths = np.ascontiguousarray([w.length for w in self.wormholes])
            self._dirs = np.ascontiguousarray([w.direction for w in self.wormholes])

    @classmethod
    def from_modes(cls, locations, eps_w: float = 1e-4, influence: float = 0.1,
                   jump_prob: float = 0.68, logdet_correction: bool = True
                   ) -> "WormholeNetwork":
        locations = [np.asarray(m, dtype=float) for m in locations]
        holes = [Wormhole(locations[i], locations[j], eps_w, influence)
                 for i in range(len(locations)) for j in range(i + 1, len(locations))]
        return cls(holes, jump_prob, logdet_correction)

    def __len__(self):
        return len(self.wormholes)

    def active(self, x: np.ndarray) -> Optional[tuple[Wormhole, float]]:
        """Wormhole with maximal mollifier at x, with that mollifier value."""
        if not self.wormholes:
            return None
        idx, excess = _kernels.active_wormhole(
            np.ascontiguousarray(x, dtype=float),
            self._ends_a, self._ends_b, self._lengths)
        w = self.wormholes[idx]
        return w, math.exp(-max(excess, 0.0) / w.influence)


def metric(net: WormholeNetwork, x: np.ndarray) -> np.ndarray:
    """Position-dependent metric (1 - m) I + m G_W of the active wormhole.

    SPD with eigenvalues in [eps_w, 1]; identity when no wormhole reaches x.
    """
    d = x.size
    act = net.active(x) if net is not None else None
    if act is None:
        return np.eye(d)
    w, m = act
    return np.eye(d) - (m * (1.0 - w.eps_w)) * np.outer(w.direction, w.direction)


def vector_field(net: WormholeNetwork, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Transport field m(x) <v, v_W> v_W along the active intermodal line."""
    act = net.active(x) if net is not None else None
    if act is None:
        return np.zeros_like(v)
    w, m = act
    return (m * float(v @ w.direction)) * w.direction


def generalized_leapfrog_step(net: WormholeNetwork, target: TargetDistribution,
                              x: np.ndarray, v: np.ndarray, step_size: float,
                              grad: Optional[np.ndarray] = None,
                              fp_tol: float = 1e-8, fp_max_iter: int = 100):
    """One step of the implicit integrator.

    Explicit half-kick on v, implicit position update solved by fixed-point
    iteration seeded at the explicit predictor, explicit half-kick.  With an
    empty network this reduces bit-for-bit to the plain leapfrog step.
    Returns (x', v', grad at x', fixed-point iterations).
    """
    if grad is None:
        grad = target.gradient(x)
        if not np.all(np.isfinite(grad)):
            raise IntegrationError("non-finite gradient at step start")
    v_half = v + 0.5 * step_size * grad

    if len(net) == 0:
        x_new = x + step_size * v_half
        iters = 0
    else:
        f0 = vector_field(net, x, v_half)

        def implicit_map(z):
            return x + step_size * (v_half + 0.5 * (f0 + vector_field(net, z, v_half)))

        predictor = x + step_size * (v_half + f0)
        x_new, iters = fixed_point_solve(implicit_map, predictor,
                                         tol=fp_tol, max_iter=fp_max_iter)

    try:
        g_new = target.gradient(x_new)
    except Exception as exc:
        raise IntegrationError(f"gradient failed mid-trajectory: {exc}") from exc
    if not np.all(np.isfinite(g_new)):
        raise IntegrationError("non-finite gradient mid-trajectory")
    v_new = v_half + 0.5 * step_size * g_new
    return x_new, v_new, g_new, iters


def _sample_velocity(net: WormholeNetwork, x: np.ndarray, rng) -> np.ndarray:
    """Velocity consistent with the metric at x: v ~ N(0, G(x)^-1).

    G is identity minus a rank-one term, so the sample is a standard normal
    stretched along the active wormhole direction by 1/sqrt(lambda).
    """
    z = rng.standard_normal(x.size)
    act = net.active(x) if net is not None else None
    if act is None:
        return z
    w, m = act
    lam = 1.0 - m * (1.0 - w.eps_w)
    if lam >= 1.0:
        return z
    stretch = 1.0 / math.sqrt(lam) - 1.0
    return z + (stretch * float(w.direction @ z)) * w.direction


def _velocity_energy(net: WormholeNetwork, x: np.ndarray, v: np.ndarray) -> float:
    """Kinetic term 0.5 v'Gv minus (optionally) 0.5 log det G at x.

    The minus sign is the Jacobian-consistent normalization of the velocity
    refresh v ~ N(0, G^-1): its log density is -0.5 v'Gv + 0.5 log det G,
    so the Metropolis energy in velocity coordinates subtracts the volume
    term (in momentum coordinates it would be added).
    """
    act = net.active(x) if net is not None else None
    if act is None:
        return 0.5 * float(v @ v)
    w, m = act
    lam = 1.0 - m * (1.0 - w.eps_w)
    proj = float(v @ w.direction)
    energy = 0.5 * float(v @ v) - 0.5 * (1.0 - lam) * proj * proj
    if net.logdet_correction:
        energy -= 0.5 * math.log(lam)
    return energy


def whmc_step(state: ChainState, target: TargetDistribution,
              net: WormholeNetwork, params: HmcParams) -> ChainState:
    """One wormhole-HMC transition: metric-consistent velocity refresh,
    generalized-leapfrog trajectory with stochastic wormhole routing, then
    Metropolis correction with the metric-dependent Hamiltonian.

    With an empty network the transition consumes the identical RNG stream
    as hmc_step and produces the identical trajectory.
    """
    rng = state.rng
    x = state.position
    v = _sample_velocity(net, x, rng)
    eps = jittered_step_size(params, rng)

    if state.cached_logp is None:
        state.cached_logp = target.log_density(x)
    h0 = -state.cached_logp + _velocity_energy(net, x, v)

    state.proposed += 1
    has_holes = len(net) > 0
    x_cur, v_cur = x, v
    grad = None
    routed = False
    try:
        for _ in range(params.n_steps):
            if has_holes and not routed and rng.uniform() < net.jump_prob:
                routed = True  # at most one routing event per trajectory
                act = net.active(x_cur)
                if act is not None:
                    w, _ = act
                    sign = 1.0 if rng.uniform() < 0.5 else -1.0
                    v_cur = (sign * float(np.linalg.norm(v_cur))) * w.direction
            x_cur, v_cur, grad, _ = generalized_leapfrog_step(
                net, target, x_cur, v_cur, eps, grad=grad)
    except (IntegrationError, FixedPointError):
        state.last_accept_prob = 0.0
        return state

    logp1 = target.log_density(x_cur)
    if not np.isfinite(logp1):
        state.last_accept_prob = 0.0
        return state
    h1 = -logp1 + _velocity_energy(net, x_cur, v_cur)
    log_alpha = h0 - h1
    state.last_accept_prob = min(1.0, math.exp(min(log_alpha, 0.0)))
    if math.log(rng.uniform()) < log_alpha:
        state.position = x_cur
        state.cached_logp = logp1
        state.accepted += 1
    return state
