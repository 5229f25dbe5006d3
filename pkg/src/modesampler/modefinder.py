"""Mode discovery: residual log objective with mode subtraction, geodesic
start-point proposal on a conformal metric, quasi-Newton search on the
original objective, deduplicating mode registry, per-mode density models,
and the fictitious-mode audit.

The quasi-Newton search always runs on the true log density, never on the
residual surface, so recorded locations are stationary points of the
actual target (no fictitious maxima).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .hmc import ChainState, HmcParams, hmc_step
from .numerics import (NotSPDError, bfgs_maximize, cholesky_spd,
                       finite_diff_hessian, regularize_spd)
from .targets import TargetDistribution

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class KdeModel:
    """Gaussian-kernel density estimate with a shared diagonal bandwidth."""

    centers: np.ndarray          # (N, D)
    scales: np.ndarray           # (D,) kernel standard deviations

    def __post_init__(self):
        if self.centers.ndim != 2 or self.centers.shape[0] < 1:
            raise ValueError("need at least one KDE center")
        if np.any(self.scales <= 0):
            raise ValueError("bandwidth must be positive definite")
        self._log_norm = (-math.log(self.centers.shape[0])
                          - 0.5 * self.centers.shape[1] * LOG_2PI
                          - float(np.sum(np.log(self.scales))))

    @property
    def bandwidth_matrix(self) -> np.ndarray:
        return np.diag(self.scales ** 2)

    def log_density(self, x) -> float:
        z = (x[None, :] - self.centers) / self.scales[None, :]
        q = -0.5 * np.sum(z * z, axis=1)
        m = np.max(q)
        return float(self._log_norm + m + np.log(np.sum(np.exp(q - m))))

    def log_density_and_gradient(self, x):
        diff = (x[None, :] - self.centers) / (self.scales[None, :] ** 2)
        z = (x[None, :] - self.centers) / self.scales[None, :]
        q = -0.5 * np.sum(z * z, axis=1)
        m = np.max(q)
        w = np.exp(q - m)
        total = np.sum(w)
        lp = float(self._log_norm + m + np.log(total))
        grad = -np.einsum("n,nd->d", w / total, diff)
        return lp, grad


def silverman_scales(samples: np.ndarray) -> np.ndarray:
    """Per-dimension Silverman bandwidths (4/((D+2)N))^(1/(D+4)) * sigma_d."""
    n, d = samples.shape
    sigma = np.std(samples, axis=0, ddof=1)
    sigma = np.where(sigma > 0, sigma, 1e-8)
    return sigma * (4.0 / ((d + 2.0) * n)) ** (1.0 / (d + 4.0))


@dataclass
class ModeRecord:
    location: np.ndarray
    covariance: np.ndarray
    log_weight: float            # unnormalized Laplace log weight
    kind: str                    # "gaussian" | "kde"
    index: int = 0               # assigned by the registry, 1-based
    wall_time: float = 0.0
    kde: Optional[KdeModel] = None
    dedup_radius: float = 0.0
    n_bfgs_at_discovery: int = 0  # registry counter when this mode landed

    def __post_init__(self):
        self._chol = cholesky_spd(self.covariance)
        self._logdet = 2.0 * float(np.sum(np.log(np.diag(self._chol))))
        d = self.location.size
        self._log_norm = -0.5 * (d * LOG_2PI + self._logdet)

    def model_log_density(self, x) -> float:
        if self.kind == "kde" and self.kde is not None:
            return self.kde.log_density(x)
        diff = np.linalg.solve(self._chol, x - self.location)
        return float(self._log_norm - 0.5 * diff @ diff)

    def model_log_density_and_gradient(self, x):
        if self.kind == "kde" and self.kde is not None:
            return self.kde.log_density_and_gradient(x)
        half = np.linalg.solve(self._chol, x - self.location)
        lp = float(self._log_norm - 0.5 * half @ half)
        grad = -np.linalg.solve(self._chol.T, half)
        return lp, grad

    def log_peak_density(self) -> float:
        """Log of the model density at its center (up to KDE approximation)."""
        return self._log_norm

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "kde" and self.kde is not None:
            c = self.kde.centers[rng.integers(self.kde.centers.shape[0])]
            return c + self.kde.scales * rng.standard_normal(c.size)
        return self.location + self._chol @ rng.standard_normal(self.location.size)


class MixtureModel:
    """Weighted mixture over mode records, vectorized for hot-path evaluation.

    Gaussian records evaluate through the compiled mixture kernel; KDE
    records fall back to their own vectorized path and are combined by
    log-sum-exp.  Instances are immutable snapshots.
    """

    def __init__(self, records, weights):
        if not records:
            raise ValueError("mixture needs at least one record")
        self.records = list(records)
        self.weights = np.asarray(weights, dtype=float)
        self._gauss = [(i, r) for i, r in enumerate(self.records)
                       if not (r.kind == "kde" and r.kde is not None)]
        self._kde = [(i, r) for i, r in enumerate(self.records)
                     if r.kind == "kde" and r.kde is not None]
        if self._gauss:
            dim = self.records[0].location.size
            k = len(self._gauss)
            means = np.empty((k, dim))
            precs = np.empty((k, dim, dim))
            log_norms = np.empty(k)
            for slot, (i, r) in enumerate(self._gauss):
                means[slot] = r.location
                eye = np.eye(dim)
                half = np.linalg.solve(r._chol, eye)
                precs[slot] = half.T @ half
                log_norms[slot] = math.log(self.weights[i]) + r._log_norm
            self._means = np.ascontiguousarray(means)
            self._precs = np.ascontiguousarray(precs)
            self._log_norms = np.ascontiguousarray(log_norms)

    def log_density(self, x) -> float:
        x = np.ascontiguousarray(x, dtype=float)
        if not self._kde:
            return _kernels.gmm_logpdf(x, self._means, self._precs,
                                       self._log_norms)
        terms = []
        if self._gauss:
            terms.append(_kernels.gmm_logpdf(x, self._means, self._precs,
                                             self._log_norms))
        for i, r in self._kde:
            terms.append(math.log(self.weights[i]) + r.kde.log_density(x))
        return float(np.logaddexp.reduce(terms))

    def log_density_and_gradient(self, x):
        x = np.ascontiguousarray(x, dtype=float)
        if not self._kde:
            lp, g = _kernels.gmm_logpdf_grad(x, self._means, self._precs,
                                             self._log_norms)
            return lp, np.asarray(g)
        terms = []
        grads = []
        if self._gauss:
            lp, g = _kernels.gmm_logpdf_grad(x, self._means, self._precs,
                                             self._log_norms)
            terms.append(lp)
            grads.append(np.asarray(g))
        for i, r in self._kde:
            lp, g = r.kde.log_density_and_gradient(x)
            terms.append(math.log(self.weights[i]) + lp)
            grads.append(g)
        total = float(np.logaddexp.reduce(terms))
        grad = np.zeros_like(x)
        for lp, g in zip(terms, grads):
            grad += math.exp(lp - total) * g
        return total, grad

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        i = int(rng.choice(len(self.records), p=self.weights))
        return self.records[i].sample(rng)


class ModeRegistry:
    """Ordered, deduplicated collection of discovered modes.

    Counts every quasi-Newton attempt (n_bfgs), successful additions, and
    duplicate rediscoveries.  Pairwise mode distances always exceed the
    per-record dedup radius.
    """

    def __init__(self, dedup_factor: float = 0.5,
                 dedup_radius: Optional[float] = None):
        self.records: list[ModeRecord] = []
        self.dedup_factor = dedup_factor
        self.dedup_radius = dedup_radius
        self.n_bfgs = 0
        self.n_success = 0
        self.n_duplicates = 0
        self._mixture: Optional[MixtureModel] = None

    def mixture(self) -> MixtureModel:
        if self._mixture is None:
            self._mixture = MixtureModel(self.records, self.weights())
        return self._mixture

    def __len__(self):
        return len(self.records)

    def locations(self) -> list[np.ndarray]:
        return [r.location for r in self.records]

    def weights(self) -> np.ndarray:
        if not self.records:
            return np.zeros(0)
        lw = np.array([r.log_weight for r in self.records])
        lw -= np.max(lw)
        w = np.exp(lw)
        return w / w.sum()

    def nearest_record(self, x) -> Optional[tuple[ModeRecord, float]]:
        if not self.records:
            return None
        dists = [float(np.linalg.norm(x - r.location)) for r in self.records]
        i = int(np.argmin(dists))
        return self.records[i], dists[i]

    def is_duplicate(self, x) -> bool:
        near = self.nearest_record(x)
        if near is None:
            return False
        record, dist = near
        return dist <= record.dedup_radius

    def radius_for(self, covariance) -> float:
        if self.dedup_radius is not None:
            return self.dedup_radius
        lam_min = float(np.min(np.linalg.eigvalsh(covariance)))
        return self.dedup_factor * math.sqrt(max(lam_min, 0.0))

    def add(self, record: ModeRecord) -> bool:
        record.dedup_radius = self.radius_for(record.covariance)
        near = self.nearest_record(record.location)
        if near is not None:
            other, dist = near
            if dist <= max(record.dedup_radius, other.dedup_radius):
                self.n_duplicates += 1
                return False
        record.index = len(self.records) + 1
        self.records.append(record)
        self.n_success += 1
        self._mixture = None
        return True

    def log_density_estimate(self, x) -> float:
        """Log of the weighted mixture of per-mode models; -inf when empty."""
        if not self.records:
            return float("-inf")
        return self.mixture().log_density(x)

    def log_density_estimate_and_gradient(self, x):
        if not self.records:
            return float("-inf"), np.zeros_like(x)
        return self.mixture().log_density_and_gradient(x)

    def max_log_peak(self) -> float:
        if not self.records:
            return 0.0
        w = self.weights()
        return max(math.log(w[i]) + r.log_peak_density()
                   for i, r in enumerate(self.records))


def mode_density_estimate(registry: ModeRegistry, x) -> float:
    """Mixture density of the registered mode models (linear scale)."""
    if len(registry) == 0:
        return 0.0
    return math.exp(registry.log_density_estimate(x))


class ResidualObjective:
    """phi(x) = log f(x) - log(f_hat(x) + delta).

    f_hat is the registry's mixture model; delta is a relative floor tied
    to the tallest registered peak so phi stays finite where f_hat
    vanishes.  With an empty registry (delta = 1) phi is exactly log f.
    """

    def __init__(self, target: TargetDistribution, registry: ModeRegistry,
                 floor_rel: float = 1e-12):
        if floor_rel <= 0:
            raise ValueError("floor must be positive")
        self.target = target
        self.registry = registry
        if len(registry) == 0:
            self.log_floor = 0.0
        else:
            self.log_floor = math.log(floor_rel) + registry.max_log_peak()

    def __call__(self, x) -> float:
        logf = self.target.log_density(x)
        log_fhat = self.registry.log_density_estimate(x)
        return logf - np.logaddexp(log_fhat, self.log_floor)

    def value_and_gradient(self, x):
        logf, gf = self.target.log_density_and_gradient(x)
        log_fhat, gh = self.registry.log_density_estimate_and_gradient(x)
        denom = np.logaddexp(log_fhat, self.log_floor)
        frac = math.exp(log_fhat - denom) if np.isfinite(log_fhat) else 0.0
        return float(logf - denom), gf - frac * gh

    def gradient(self, x):
        return self.value_and_gradient(x)[1]


def residual_objective(target: TargetDistribution, registry: ModeRegistry,
                       floor_rel: float = 1e-12) -> ResidualObjective:
    return ResidualObjective(target, registry, floor_rel)


def geodesic_start_proposal(phi, x0: np.ndarray, v0: np.ndarray, steps: int,
                            h: float, alpha: float,
                            grad: Optional[Callable] = None,
                            box: Optional[tuple[np.ndarray, np.ndarray]] = None
                            ) -> np.ndarray:
    """Integrate x'' = alpha (|x'|^2 grad_phi - 2 (grad_phi . x') x') from
    (x0, v0) and return the trajectory point with maximal phi.

    When grad_phi vanishes identically the trajectory is the exact straight
    line x0 + t v0 and the endpoint is returned.  Non-finite phi truncates
    the trajectory (best-so-far is returned), as does leaving the search
    box by more than half its extent.  Speed is clamped to a band around
    the launch speed: the parameter speed of this ODE scales like
    exp(-alpha * phi), which would stall climbs over large phi ranges and
    diverge on descents; clamping keeps the bent direction advancing
    without touching flat-region behavior (speed is conserved there).
    """
    if h <= 0 or alpha <= 0:
        raise ValueError("h and alpha must be positive")
    if grad is None:
        grad = phi.gradient
        value_and_grad = phi.value_and_gradient
    else:
        value_and_grad = lambda p: (phi(p), grad(p))

    if box is not None:
        lo, hi = box
        margin = 0.5 * float(np.max(hi - lo))
        lo_stop, hi_stop = lo - margin, hi + margin
    launch_speed = math.sqrt(float(v0 @ v0))
    speed_cap = 64.0 * max(1.0, launch_speed)
    speed_floor = 0.25 * launch_speed

    x = np.array(x0, dtype=float)
    v = np.array(v0, dtype=float)
    best_x = x.copy()
    try:
        phi_x, g = value_and_grad(x)
    except Exception:
        return best_x
    if not math.isfinite(phi_x):
        return best_x
    best_phi = phi_x

    def accel(vel, gphi):
        return alpha * (float(vel @ vel) * gphi - 2.0 * float(gphi @ vel) * vel)

    def clamp(vel):
        speed_sq = float(vel @ vel)
        if speed_sq > speed_cap * speed_cap:
            return vel * (speed_cap / math.sqrt(speed_sq))
        if 0.0 < speed_sq < speed_floor * speed_floor:
            return vel * (speed_floor / math.sqrt(speed_sq))
        return vel

    for _ in range(steps):
        v_half = clamp(v + 0.5 * h * accel(v, g))
        x = x + h * v_half
        if box is not None and ((x < lo_stop).any() or (x > hi_stop).any()):
            break
        try:
            phi_x, g = value_and_grad(x)
        except Exception:
            break
        if not math.isfinite(phi_x) or not math.isfinite(float(g @ g)):
            break
        v = clamp(v_half + 0.5 * h * accel(v_half, g))
        if phi_x >= best_phi:
            best_phi = phi_x
            best_x = x.copy()
    return best_x


@dataclass
class ModeSearchConfig:
    """Knobs for one mode-search attempt (geodesic proposal + quasi-Newton).

    Geodesic restarts stop early once a proposal's residual value clears
    the confidence threshold (a clear undiscovered-mode signature), so easy
    discoveries cost one trajectory while the final hidden mode gets the
    full restart budget.
    """

    alpha: float = 0.0           # 0 resolves to 1/dim at run time
    geodesic_steps: int = 300
    step_scale: float = 0.005    # h = step_scale * box diameter
    restarts: int = 16           # restart cap per attempt
    regen_restarts: int = 6      # cheaper cap for regeneration-time searches
    confidence: float = 0.4      # threshold = confidence * -log(floor_rel)
    floor_rel: float = 1e-12
    mode_tol: float = 1e-6
    max_bfgs_iter: int = 400
    model_kind: str = "gaussian"  # "gaussian" | "kde"
    kde_samples: int = 500
    kde_step_size: float = 0.1

    def resolved_alpha(self, dim: int) -> float:
        return self.alpha if self.alpha > 0 else 1.0 / dim

    def confident_phi(self) -> float:
        return -self.confidence * math.log(self.floor_rel)


def _search_box(target: TargetDistribution):
    if target.search_box is None:
        raise ValueError("target has no search box; mode search needs one")
    lo, hi = target.search_box
    return np.asarray(lo, float), np.asarray(hi, float)


def fit_mode_model(target: TargetDistribution, x_star: np.ndarray, kind: str,
                   rng: Optional[np.random.Generator] = None,
                   config: Optional[ModeSearchConfig] = None,
                   wall_time: float = 0.0) -> ModeRecord:
    """Local density model at a verified stationary point.

    gaussian: covariance = inverse negated log-density Hessian (regularized),
    Laplace weight f(x*) |cov|^(1/2).  kde: short mode-local HMC run with a
    Silverman-bandwidth Gaussian kernel estimate; falls back from gaussian
    automatically when the Hessian is not negative definite.
    """
    config = config or ModeSearchConfig()
    x_star = np.asarray(x_star, dtype=float)
    if kind == "gaussian":
        hess = finite_diff_hessian(target.log_density, x_star)
        try:
            neg = regularize_spd(-hess)
            cov = regularize_spd(np.linalg.inv(neg))
            _, logdet = np.linalg.slogdet(cov)
            log_weight = target.log_density(x_star) + 0.5 * logdet
            return ModeRecord(location=x_star, covariance=cov,
                              log_weight=log_weight, kind="gaussian",
                              wall_time=wall_time)
        except NotSPDError:
            log.warning("Hessian not negative definite at mode; "
                        "falling back to KDE model")
            kind = "kde"
    if kind != "kde":
        raise ValueError(f"unknown model kind: {kind!r}")

    rng = rng or np.random.default_rng(0)
    params = HmcParams(step_size=config.kde_step_size, n_steps=10)
    state = ChainState(position=x_star.copy(), rng=rng)
    for _ in range(100):
        hmc_step(state, target, params)
    samples = np.empty((config.kde_samples, x_star.size))
    for i in range(config.kde_samples):
        hmc_step(state, target, params)
        samples[i] = state.position
    kde = KdeModel(centers=samples, scales=silverman_scales(samples))
    cov = regularize_spd(np.cov(samples, rowvar=False).reshape(x_star.size, x_star.size))
    _, logdet = np.linalg.slogdet(cov)
    log_weight = target.log_density(x_star) + 0.5 * logdet
    return ModeRecord(location=x_star, covariance=cov, log_weight=log_weight,
                      kind="kde", kde=kde, wall_time=wall_time)


def find_new_mode(target: TargetDistribution, registry: ModeRegistry,
                  budget: int, config: ModeSearchConfig,
                  rng: np.random.Generator,
                  clock: Optional[Callable[[], float]] = None
                  ) -> Optional[ModeRecord]:
    """Up to `budget` attempts of geodesic start proposal (on the residual
    objective) followed by quasi-Newton ascent of the original log density.

    Every quasi-Newton launch increments the registry's n_bfgs counter
    whether or not it converges or deduplicates; the launch itself is gated
    on a confident geodesic candidate (undiscovered-mode signature), so
    attempts whose trajectories only revisit known basins fail cheaply
    without spending a quasi-Newton run.  Returns the new record or None
    when every attempt lands in known basins.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    lo, hi = _search_box(target)
    diameter = float(np.linalg.norm(hi - lo))
    h = config.step_scale * diameter
    alpha = config.resolved_alpha(target.dim)

    for _ in range(budget):
        phi = residual_objective(target, registry, config.floor_rel)
        threshold = -np.inf if len(registry) == 0 else config.confident_phi()
        best_start = None
        best_phi = -np.inf
        for _ in range(max(1, config.restarts)):
            x0 = rng.uniform(lo, hi)
            v0 = rng.standard_normal(target.dim)
            v0 /= np.linalg.norm(v0)
            cand = geodesic_start_proposal(phi, x0, v0, config.geodesic_steps,
                                           h, alpha, box=(lo, hi))
            val = phi(cand)
            if val > best_phi:
                best_phi, best_start = val, cand
            if np.isfinite(best_phi) and best_phi >= threshold:
                break
        if best_start is None or not np.isfinite(best_phi) or best_phi < threshold:
            continue
        registry.n_bfgs += 1
        try:
            result = bfgs_maximize(target.log_density, best_start,
                                   gradient=target.gradient, tol=config.mode_tol,
                                   max_iter=config.max_bfgs_iter)
        except ValueError:
            continue  # start point has zero density; attempt still counted
        if not result.converged:
            continue
        x_star = result.maximizer
        if registry.is_duplicate(x_star):
            registry.n_duplicates += 1
            continue
        record = fit_mode_model(target, x_star, config.model_kind, rng, config,
                                wall_time=clock() if clock else 0.0)
        record.n_bfgs_at_discovery = registry.n_bfgs
        if registry.add(record):
            return record
    return None


@dataclass
class AuditEntry:
    index: int
    displacement: float
    cumulative: float
    converged: bool


def fictitious_mode_audit(target: TargetDistribution, registry: ModeRegistry,
                          tol: float = 1e-6, max_iter: int = 400
                          ) -> list[AuditEntry]:
    """Re-run the quasi-Newton ascent from each recorded location and report
    the re-convergence displacement per mode plus the running sum.

    Genuine modes re-converge in place (displacement ~ 0); a displaced
    entry exposes a location that is not a stationary point of the true
    target.  Failed re-runs are flagged and excluded from the sum.
    """
    if len(registry) == 0:
        raise ValueError("registry is empty; nothing to audit")
    entries = []
    cumulative = 0.0
    for rec in registry.records:
        result = bfgs_maximize(target.log_density, rec.location,
                               gradient=target.gradient, tol=tol,
                               max_iter=max_iter)
        if result.converged:
            delta = float(np.linalg.norm(rec.location - result.maximizer))
            cumulative += delta
            entries.append(AuditEntry(rec.index, delta, cumulative, True))
        else:
            log.warning("audit quasi-Newton failed for mode %d", rec.index)
            entries.append(AuditEntry(rec.index, float("nan"), cumulative, False))
    return entries


def save_registry(path, registry: ModeRegistry, target_label: str = "") -> None:
    """One line per mode: index, wall-time, location, weight, model kind,
    flattened covariance.  The header records the target so the audit CLI
    can rebuild it."""
    weights = registry.weights()
    lines = ["# mode registry"]
    if target_label:
        lines.append(f"target = {target_label}")
    if registry.records:
        lines.append(f"dimension = {registry.records[0].location.size}")
    lines.append(f"n_bfgs = {registry.n_bfgs}")
    for i, rec in enumerate(registry.records):
        parts = [str(rec.index), repr(float(rec.wall_time))]
        parts += [repr(float(v)) for v in rec.location]
        parts.append(repr(float(weights[i])))
        parts.append(rec.kind)
        parts += [repr(float(v)) for v in rec.covariance.reshape(-1)]
        lines.append(" ".join(parts))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_registry(path) -> tuple[ModeRegistry, str]:
    """Rebuild a registry from its text form; KDE records come back as
    their gaussian summaries (centers are not persisted)."""
    registry = ModeRegistry()
    target_label = ""
    dim = None
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" in line:
                key, _, value = line.partition("=")
                key, value = key.strip(), value.strip()
                if key == "target":
                    target_label = value
                elif key == "dimension":
                    dim = int(value)
                elif key == "n_bfgs":
                    registry.n_bfgs = int(value)
                continue
            tokens = line.split()
            if dim is None:
                # tokens = 2 + dim + 2 + dim^2; solve for dim
                n = len(tokens) - 4
                dim = int((-1 + math.isqrt(1 + 4 * n)) // 2)
            index = int(tokens[0])
            wall = float(tokens[1])
            loc = np.array([float(t) for t in tokens[2:2 + dim]])
            weight = float(tokens[2 + dim])
            kind = tokens[3 + dim]
            cov = np.array([float(t) for t in tokens[4 + dim:]]).reshape(dim, dim)
            rec = ModeRecord(location=loc, covariance=cov,
                             log_weight=math.log(max(weight, 1e-300)),
                             kind="gaussian" if kind == "kde" else kind,
                             index=index, wall_time=wall)
            rec.dedup_radius = registry.radius_for(cov)
            registry.records.append(rec)
            registry.n_success += 1
    return registry, target_label
