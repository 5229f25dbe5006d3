"""Regeneration-time machinery and the sampling orchestrator.

Implements the split-chain regeneration probability r = S * Q / T for an
independence proposal built over the mode registry, and the three
schedules: all-modes-first (discover every mode, then sample), on-the-fly
(search at regeneration times), and forced-update (additionally search
every fixed number of samples).

Diagnostics timestamps use a deterministic cost clock (target evaluations
times a fixed unit) so identical seeds give identical output streams; the
optional real-time budget only caps runaway runs.
"""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .diagnostics import DiagnosticsSeries, PooledDiagnostics
from .hmc import ChainState, HmcParams, hmc_step
from .modefinder import MixtureModel, ModeRegistry, ModeSearchConfig, find_new_mode
from .targets import EvalCountingTarget, TargetDistribution
from .wormhole import WormholeNetwork, whmc_step

log = logging.getLogger(__name__)


def _regen_r(log_rho0: float, log_rho1: float, log_c: float) -> float:
    log_s = min(0.0, log_c - log_rho0)
    log_q_over_q = min(0.0, log_rho1 - log_c)
    log_t_over_q = min(0.0, log_rho1 - log_rho0)
    return min(1.0, math.exp(log_s + log_q_over_q - log_t_over_q))


def regeneration_probability(pi_t: float, q_t: float, pi_next: float,
                             q_next: float, c: float) -> float:
    """r = S(x_t) Q(x_{t+1}) / T(x_{t+1} | x_t) for an independence proposal.

    S = min{1, c / (pi_t/q_t)}, Q = q min{1, (pi/q)/c},
    T = q min{1, (pi/q)_{t+1} / (pi/q)_t}.  Equals 1 exactly when both
    density ratios are 1 and c = 1.  Zero or non-finite densities give
    r = 0 (no regeneration), logged.
    """
    vals = (pi_t, q_t, pi_next, q_next, c)
    if not all(np.isfinite(v) and v > 0 for v in vals):
        log.warning("regeneration check skipped: non-positive density")
        return 0.0
    return _regen_r(math.log(pi_t) - math.log(q_t),
                    math.log(pi_next) - math.log(q_next), math.log(c))


class IndependenceProposal:
    """Mixture of per-mode density models used as the regeneration proposal."""

    def __init__(self, records, weights, log_c: float = 0.0):
        if not records:
            raise ValueError("independence proposal needs at least one mode")
        self.records = list(records)
        self.weights = np.asarray(weights, dtype=float)
        self.log_c = float(log_c)
        self._mixture = MixtureModel(self.records, self.weights)

    @property
    def c(self) -> float:
        return math.exp(self.log_c)

    def log_density(self, x) -> float:
        return self._mixture.log_density(x)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self._mixture.sample(rng)


def build_independence_proposal(registry: ModeRegistry,
                                recent_log_ratios=None) -> IndependenceProposal:
    """Proposal over the registry with Laplace weights; the constant c is
    the median target/proposal ratio over recent samples when available."""
    if len(registry) == 0:
        raise ValueError("registry is empty; regeneration disabled until "
                         "the first mode is found")
    log_c = 0.0
    if recent_log_ratios is not None and len(recent_log_ratios):
        log_c = float(np.median(np.asarray(recent_log_ratios, dtype=float)))
    return IndependenceProposal(registry.records, registry.weights(), log_c)


@dataclass
class Schedule:
    """When mode searches happen relative to sampling."""

    mode: str = "all-modes-first"  # | "on-the-fly" | "forced-update"
    period: int = 0                # forced-update: search every this many samples
    search_budget: int = 10        # attempts per full search pass
    regen_search_budget: int = 1   # attempts per regeneration/forced trigger
    regen_search_cooldown: int = 100  # min pooled samples between regen searches

    def __post_init__(self):
        if self.mode not in ("all-modes-first", "on-the-fly", "forced-update"):
            raise ValueError(f"unknown schedule mode: {self.mode!r}")
        if self.mode == "forced-update" and self.period < 1:
            raise ValueError("forced-update schedule needs period >= 1")
        if self.regen_search_cooldown < 1:
            raise ValueError("regen_search_cooldown must be >= 1")


@dataclass
class SamplerSettings:
    """Everything run_sampler needs besides the schedule and chain count."""

    hmc: HmcParams
    sampler: str = "whmc"          # "hmc" | "whmc"
    eps_w: float = 1e-4
    influence: float = 0.1
    jump_prob: float = 0.68
    logdet_correction: bool = True
    search: ModeSearchConfig = field(default_factory=ModeSearchConfig)
    regen_enabled: bool = True
    c_window: int = 200
    diag_stride: int = 200
    cost_unit: float = 2e-6
    max_modes: int = 64

    def __post_init__(self):
        if self.sampler not in ("hmc", "whmc"):
            raise ValueError(f"unknown sampler: {self.sampler!r}")
        if not 0.0 < self.eps_w <= 1.0:
            raise ValueError("eps_w must be in (0, 1]")
        if self.influence <= 0:
            raise ValueError("influence factor must be positive")
        if not 0.0 <= self.jump_prob <= 1.0:
            raise ValueError("jump_prob must be in [0, 1]")


@dataclass
class RegenEvent:
    chain: int
    step: int
    r: float
    triggered: bool
    modes_before: int
    modes_after: int


@dataclass
class SamplerRun:
    samples: list
    tags: list
    registry: ModeRegistry
    series: DiagnosticsSeries
    events: list
    regen_checks: int
    regen_mean_r: float
    acceptance_rates: list
    search_calls: int
    elapsed_seconds: float
    clock_seconds: float
    flagged: bool
    truncated: bool

    def pooled(self):
        """Samples and tags interleaved in draw order across chains."""
        n = min(s.shape[0] for s in self.samples)
        dim = self.samples[0].shape[1]
        chains = len(self.samples)
        pooled = np.empty((n * chains, dim))
        tags = np.empty(n * chains, dtype=int)
        for c in range(chains):
            pooled[c::chains] = self.samples[c][:n]
            tags[c::chains] = self.tags[c][:n]
        return pooled, tags


def _build_network(registry: ModeRegistry, settings: SamplerSettings
                   ) -> WormholeNetwork:
    if len(registry) < 2:
        return WormholeNetwork([], settings.jump_prob, settings.logdet_correction)
    return WormholeNetwork.from_modes(
        registry.locations(), eps_w=settings.eps_w, influence=settings.influence,
        jump_prob=settings.jump_prob, logdet_correction=settings.logdet_correction)


def _sample_start(proposal, target, registry, rng, tries: int = 100):
    if proposal is not None or len(registry):
        source = proposal or build_independence_proposal(registry)
        for _ in range(tries):
            x = source.sample(rng)
            lp = target.log_density(x)
            if np.isfinite(lp):
                return x, lp
    if target.search_box is not None:
        lo, hi = target.search_box
        for _ in range(tries):
            x = rng.uniform(np.asarray(lo, float), np.asarray(hi, float))
            lp = target.log_density(x)
            if np.isfinite(lp):
                return x, lp
    x = np.zeros(target.dim)
    return x, target.log_density(x)


def run_sampler(target: TargetDistribution, schedule: Schedule,
                settings: SamplerSettings, chains: int, n_samples: int,
                seed: int = 0, registry: Optional[ModeRegistry] = None,
                budget_seconds: Optional[float] = None) -> SamplerRun:
    """Run the configured sampler and schedule; returns tagged samples, the
    diagnostics series, and the final mode registry.

    Chains execute round-robin on one worker, so outputs are deterministic
    in the seed.  Samples are tagged with the registry size at draw time.
    """
    if chains < 1 or n_samples < 1:
        raise ValueError("need at least one chain and one sample")
    start_real = time.perf_counter()
    wrapped = EvalCountingTarget(target)
    clock = lambda: settings.cost_unit * wrapped.evaluations
    registry = registry if registry is not None else ModeRegistry()

    seeds = np.random.SeedSequence(seed).spawn(chains + 1)
    chain_rngs = [np.random.default_rng(s) for s in seeds[:chains]]
    search_rng = np.random.default_rng(seeds[-1])

    whmc_mode = settings.sampler == "whmc"
    search_calls = 0
    if whmc_mode and schedule.search_budget > 0:
        if schedule.mode == "all-modes-first":
            while len(registry) < settings.max_modes:
                search_calls += 1
                if find_new_mode(wrapped, registry, schedule.search_budget,
                                 settings.search, search_rng, clock) is None:
                    break
        else:
            # need one mode to seed the proposal and network
            search_calls += 1
            find_new_mode(wrapped, registry, schedule.search_budget,
                          settings.search, search_rng, clock)

    network = _build_network(registry, settings) if whmc_mode else \
        WormholeNetwork([], 0.0, settings.logdet_correction)
    proposal = None
    recent_ratios: deque = deque(maxlen=settings.c_window)
    regen_on = whmc_mode and settings.regen_enabled and len(registry) > 0
    if regen_on:
        proposal = build_independence_proposal(registry)

    states = []
    logq = []
    for c in range(chains):
        x0, lp0 = _sample_start(proposal, wrapped, registry, chain_rngs[c])
        states.append(ChainState(position=np.asarray(x0, float),
                                 rng=chain_rngs[c], cached_logp=lp0))
        logq.append(proposal.log_density(x0) if proposal is not None else 0.0)

    dim = target.dim
    sample_buf = [np.empty((n_samples, dim)) for _ in range(chains)]
    tag_buf = [np.empty(n_samples, dtype=int) for _ in range(chains)]
    diag = PooledDiagnostics(dim, reference=target.reference_moments)
    series = DiagnosticsSeries()
    events: list[RegenEvent] = []
    regen_checks = 0
    regen_r_sum = 0.0
    pooled_count = 0
    regen_search_cfg = replace(settings.search,
                               restarts=settings.search.regen_restarts)
    forced_mode = schedule.mode == "forced-update" and whmc_mode
    next_forced = schedule.period if forced_mode else 0
    last_search_at = -schedule.regen_search_cooldown  # first trigger is eligible
    truncated = False
    drawn = n_samples

    def refresh_models():
        nonlocal network, proposal
        network = _build_network(registry, settings)
        if regen_on or (whmc_mode and settings.regen_enabled and len(registry)):
            proposal = build_independence_proposal(registry, recent_ratios)
        return proposal

    for t in range(n_samples):
        if budget_seconds is not None and time.perf_counter() - start_real > budget_seconds:
            truncated = True
            drawn = t
            break
        for c in range(chains):
            state = states[c]
            prev_logp = state.cached_logp
            prev_logq = logq[c]
            if whmc_mode:
                whmc_step(state, wrapped, network, settings.hmc)
            else:
                hmc_step(state, wrapped, settings.hmc)
            sample_buf[c][t] = state.position
            tag_buf[c][t] = len(registry)
            diag.push(state.position)
            pooled_count += 1

            if proposal is not None:
                new_logq = proposal.log_density(state.position)
                log_rho0 = prev_logp - prev_logq
                log_rho1 = state.cached_logp - new_logq
                if np.isfinite(log_rho0) and np.isfinite(log_rho1):
                    r = _regen_r(log_rho0, log_rho1, proposal.log_c)
                else:
                    r = 0.0
                regen_checks += 1
                regen_r_sum += r
                recent_ratios.append(log_rho1)
                logq[c] = new_logq
                if r > 0.0 and state.rng.uniform() < r:
                    before = len(registry)
                    if (schedule.mode in ("on-the-fly", "forced-update")
                            and pooled_count - last_search_at
                            >= schedule.regen_search_cooldown):
                        last_search_at = pooled_count
                        find_new_mode(wrapped, registry,
                                      schedule.regen_search_budget,
                                      regen_search_cfg, search_rng, clock)
                    if len(registry) != before:
                        refresh_models()
                    events.append(RegenEvent(c, t, r, True, before, len(registry)))
                    x_new, lp_new = _sample_start(proposal, wrapped, registry,
                                                  state.rng)
                    state.position = np.asarray(x_new, float)
                    state.cached_logp = lp_new
                    logq[c] = proposal.log_density(state.position)

            if pooled_count % settings.diag_stride == 0:
                rec = diag.snapshot(clock(), registry.n_bfgs, len(registry))
                if rec is not None:
                    series.add(rec)

        while next_forced and pooled_count >= next_forced:
            next_forced += schedule.period
            before = len(registry)
            find_new_mode(wrapped, registry, schedule.regen_search_budget,
                          regen_search_cfg, search_rng, clock)
            events.append(RegenEvent(-1, t, float("nan"), True, before,
                                     len(registry)))
            if len(registry) != before:
                refresh_models()

    return SamplerRun(
        samples=[buf[:drawn] for buf in sample_buf],
        tags=[buf[:drawn] for buf in tag_buf],
        registry=registry, series=series, events=events,
        regen_checks=regen_checks,
        regen_mean_r=regen_r_sum / regen_checks if regen_checks else 0.0,
        acceptance_rates=[s.acceptance_rate for s in states],
        search_calls=search_calls,
        elapsed_seconds=time.perf_counter() - start_real,
        clock_seconds=clock(), flagged=diag.flagged, truncated=truncated)
