"""Benchmark target distributions: Gaussian mixtures and the planar
sensor-network range posterior, plus their seeded instance generators and
plain-text serialization.

Targets are immutable after construction and shared read-only across
chains.  Zero-probability points are represented by the LOG_ZERO sentinel
(-inf); gradients there raise ZeroDensityError so samplers can reject the
proposal instead of propagating NaNs.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import _kernels
from .numerics import cholesky_spd

LOG_ZERO = float("-inf")

LOG_2PI = math.log(2.0 * math.pi)


class TargetError(Exception):
    pass


class ZeroDensityError(TargetError):
    """Gradient requested at a point of zero probability."""


class TargetDistribution:
    """Interface shared by all sampling targets.

    Subclasses provide dim, log_density, gradient, and optionally
    reference_moments (exact mean/covariance) and a search_box used by the
    mode finder.
    """

    dim: int
    search_box: Optional[tuple[np.ndarray, np.ndarray]] = None

    def log_density(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_density_and_gradient(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        return self.log_density(x), self.gradient(x)

    @property
    def reference_moments(self) -> Optional[tuple[np.ndarray, np.ndarray]]:
        return None


class EvalCountingTarget(TargetDistribution):
    """Wrapper counting density/gradient evaluations.

    The counters drive the deterministic cost clock used for diagnostics
    timestamps (see regeneration.run_sampler).
    """

    def __init__(self, inner: TargetDistribution):
        self.inner = inner
        self.dim = inner.dim
        self.search_box = inner.search_box
        self.n_density = 0
        self.n_gradient = 0

    def log_density(self, x):
        self.n_density += 1
        return self.inner.log_density(x)

    def gradient(self, x):
        self.n_gradient += 1
        return self.inner.gradient(x)

    def log_density_and_gradient(self, x):
        self.n_density += 1
        self.n_gradient += 1
        return self.inner.log_density_and_gradient(x)

    @property
    def evaluations(self) -> int:
        return self.n_density + self.n_gradient

    @property
    def reference_moments(self):
        return self.inner.reference_moments


class GaussianMixture(TargetDistribution):
    """Mixture of Gaussians with analytic gradient and exact moments."""

    def __init__(self, weights, means, covariances, search_box=None):
        weights = np.asarray(weights, dtype=float)
        means = np.atleast_2d(np.asarray(means, dtype=float))
        covariances = np.asarray(covariances, dtype=float)
        if covariances.ndim == 2:
            covariances = covariances[None, :, :]
        k, d = means.shape
        if weights.shape != (k,) or covariances.shape != (k, d, d):
            raise TargetError("inconsistent mixture shapes")
        if np.any(weights <= 0):
            raise TargetError("mixture weights must be positive")
        total = weights.sum()
        if not math.isclose(total, 1.0, rel_tol=1e-9):
            weights = weights / total

        self.weights = weights
        self.means = np.ascontiguousarray(means)
        self.covariances = np.ascontiguousarray(covariances)
        self.dim = d
        self.n_components = k
        self.search_box = search_box

        chols = np.empty_like(covariances)
        precs = np.empty_like(covariances)
        log_norms = np.empty(k)
        for i in range(k):
            chols[i] = cholesky_spd(covariances[i])
            precs[i] = np.linalg.inv(covariances[i])
            precs[i] = 0.5 * (precs[i] + precs[i].T)
            logdet = 2.0 * np.sum(np.log(np.diag(chols[i])))
            log_norms[i] = np.log(weights[i]) - 0.5 * (d * LOG_2PI + logdet)
        self._chols = chols
        self._precs = np.ascontiguousarray(precs)
        self._log_norms = np.ascontiguousarray(log_norms)

    @classmethod
    def standard_normal(cls, dim: int) -> "GaussianMixture":
        return cls(np.ones(1), np.zeros((1, dim)), np.eye(dim)[None, :, :])

    def log_density(self, x):
        x = np.ascontiguousarray(x, dtype=float)
        return _kernels.gmm_logpdf(x, self.means, self._precs, self._log_norms)

    def gradient(self, x):
        x = np.ascontiguousarray(x, dtype=float)
        _, g = _kernels.gmm_logpdf_grad(x, self.means, self._precs, self._log_norms)
        return np.asarray(g)

    def log_density_and_gradient(self, x):
        x = np.ascontiguousarray(x, dtype=float)
        lp, g = _kernels.gmm_logpdf_grad(x, self.means, self._precs, self._log_norms)
        return lp, np.asarray(g)

    def component_log_density(self, i: int, x: np.ndarray) -> float:
        diff = np.asarray(x, dtype=float) - self.means[i]
        quad = diff @ self._precs[i] @ diff
        return float(self._log_norms[i] - np.log(self.weights[i]) - 0.5 * quad)

    @property
    def reference_moments(self):
        mean = self.weights @ self.means
        cov = -np.outer(mean, mean)
        for i in range(self.n_components):
            cov += self.weights[i] * (self.covariances[i]
                                      + np.outer(self.means[i], self.means[i]))
        return mean, cov

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Direct draws from the mixture (for Monte-Carlo oracles)."""
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for i in range(self.n_components):
            mask = comps == i
            out[mask] = self.means[i] + z[mask] @ self._chols[i].T
        return out


def gmm_generate_benchmark(dim: int, n_components: int, weight_scheme: str = "equal",
                           seed: int = 0) -> GaussianMixture:
    """Seeded well-separated mixture benchmark.

    Means are drawn uniformly in a hypercube and rescaled so the minimum
    pairwise separation is 8 * sqrt(largest covariance eigenvalue); unit
    covariances keep that at 8.  All means land in the positive orthant so
    the relative-error denominators are well away from zero.
    """
    if dim < 1 or n_components < 1:
        raise TargetError("dim and n_components must be >= 1")
    if weight_scheme not in ("equal", "proportional"):
        raise TargetError(f"unknown weight scheme: {weight_scheme!r}")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(n_components, dim))
    side = 1.0
    if n_components > 1:
        dmin = min(float(np.linalg.norm(pts[i] - pts[j]))
                   for i in range(n_components) for j in range(i))
        scale = 8.0 / dmin
        pts = pts * scale
        side = scale
    covs = np.broadcast_to(np.eye(dim), (n_components, dim, dim)).copy()
    if weight_scheme == "equal":
        weights = np.full(n_components, 1.0 / n_components)
    else:
        ks = np.arange(1, n_components + 1, dtype=float)
        weights = ks / ks.sum()
    lo = np.full(dim, -0.1 * side)
    hi = np.full(dim, 1.1 * side)
    return GaussianMixture(weights, pts, covs, search_box=(lo, hi))


class SensorNetwork(TargetDistribution):
    """Posterior over planar sensor locations given pairwise detections.

    Pair (i, j) contributes [1-P_o]^(1-o_ij) * [P_o * N(d_ij - r_ij; 0, s^2)]^o_ij
    with P_o = exp(-r_ij^2 / (2 R^2)).  Optional anchors are sensors with
    known positions; their pair terms use the same likelihood but only the
    unknown side contributes coordinates.
    """

    def __init__(self, n_sensors: int, detection_range: float, noise: float,
                 obs: np.ndarray, dist: np.ndarray,
                 anchors: Optional[np.ndarray] = None,
                 anchor_obs: Optional[np.ndarray] = None,
                 anchor_dist: Optional[np.ndarray] = None,
                 true_positions: Optional[np.ndarray] = None,
                 moments: Optional[tuple[np.ndarray, np.ndarray]] = None):
        if n_sensors < 2:
            raise TargetError("need at least two sensors")
        if detection_range <= 0:
            raise TargetError("detection range must be positive")
        if noise < 0:
            raise TargetError("noise must be non-negative")
        obs = np.asarray(obs)
        dist = np.asarray(dist, dtype=float)
        if obs.shape != (n_sensors, n_sensors) or dist.shape != obs.shape:
            raise TargetError("obs/dist must be (n_sensors, n_sensors)")
        if not np.array_equal(obs, obs.T):
            raise TargetError("observation matrix must be symmetric")
        if np.any(dist[obs.astype(bool)] < 0):
            raise TargetError("measured distances must be non-negative")

        self.n_sensors = n_sensors
        self.detection_range = detection_range
        self.noise = noise
        self.obs = obs.astype(np.uint8)
        self.dist = dist
        self.true_positions = true_positions
        self.dim = 2 * n_sensors
        self._moments = moments

        iu = np.triu_indices(n_sensors, k=1)
        self._pi = np.ascontiguousarray(iu[0].astype(np.int64))
        self._pj = np.ascontiguousarray(iu[1].astype(np.int64))
        self._pobs = np.ascontiguousarray(self.obs[iu])
        self._pdist = np.ascontiguousarray(np.where(self.obs[iu] == 1, dist[iu], 0.0))

        if anchors is not None:
            anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
            anchor_obs = np.asarray(anchor_obs)
            anchor_dist = np.asarray(anchor_dist, dtype=float)
            if anchor_obs.shape != (anchors.shape[0], n_sensors):
                raise TargetError("anchor_obs must be (n_anchors, n_sensors)")
        self.anchors = anchors
        self.anchor_obs = anchor_obs
        self.anchor_dist = anchor_dist

        box = 2.0 * np.ones(self.dim)
        self.search_box = (-0.5 * np.ones(self.dim), -0.5 * np.ones(self.dim) + box)

    def _params(self):
        r2 = self.detection_range * self.detection_range
        s = self.noise
        if s <= 0:
            raise TargetError("evaluation requires positive noise; "
                              "use with_noise_scale() on exact instances")
        return 1.0 / (2.0 * r2), 1.0 / (2.0 * s * s), -math.log(s * math.sqrt(2.0 * math.pi))

    def with_noise_scale(self, noise: float) -> "SensorNetwork":
        """Copy of this instance with a different likelihood noise scale."""
        return SensorNetwork(self.n_sensors, self.detection_range, noise,
                             self.obs, self.dist, self.anchors, self.anchor_obs,
                             self.anchor_dist, self.true_positions, self._moments)

    def _anchor_terms(self, pos, want_grad):
        inv_2r2, inv_2s2, log_pnu = self._params()
        total = 0.0
        grad = np.zeros_like(pos) if want_grad else None
        for a in range(self.anchors.shape[0]):
            diff = pos - self.anchors[a]
            r = np.sqrt(np.sum(diff * diff, axis=1))
            o = self.anchor_obs[a].astype(bool)
            if np.any(o):
                ro = r[o]
                resid = self.anchor_dist[a][o] - ro
                total += float(np.sum(-ro * ro * inv_2r2 - resid * resid * inv_2s2
                                      + log_pnu))
            rn = r[~o]
            if np.any(rn == 0.0):
                return LOG_ZERO, grad
            if rn.size:
                po = np.exp(-rn * rn * inv_2r2)
                total += float(np.sum(np.log1p(-po)))
            if want_grad:
                coef = np.zeros_like(r)
                if np.any(o):
                    coef[o] = -2.0 * inv_2r2 * r[o] + 2.0 * inv_2s2 * (self.anchor_dist[a][o] - r[o])
                if np.any(~o):
                    po = np.exp(-rn * rn * inv_2r2)
                    coef[~o] = 2.0 * inv_2r2 * rn * po / (1.0 - po)
                safe = np.where(r > 0, r, 1.0)
                unit = diff / safe[:, None]
                unit[r == 0.0] = 0.0
                grad += coef[:, None] * unit
        return total, grad

    def log_density(self, x):
        x = np.ascontiguousarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise TargetError(f"expected dimension {self.dim}, got {x.shape}")
        inv_2r2, inv_2s2, log_pnu = self._params()
        total = _kernels.sensor_logpdf(x, self._pi, self._pj, self._pobs,
                                       self._pdist, inv_2r2, inv_2s2, log_pnu)
        if self.anchors is not None and np.isfinite(total):
            extra, _ = self._anchor_terms(x.reshape(-1, 2), want_grad=False)
            total += extra
        return float(total)

    def gradient(self, x):
        return self.log_density_and_gradient(x)[1]

    def log_density_and_gradient(self, x):
        x = np.ascontiguousarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise TargetError(f"expected dimension {self.dim}, got {x.shape}")
        inv_2r2, inv_2s2, log_pnu = self._params()
        lp, g = _kernels.sensor_logpdf_grad(x, self._pi, self._pj, self._pobs,
                                            self._pdist, inv_2r2, inv_2s2, log_pnu)
        g = np.asarray(g)
        if self.anchors is not None and np.isfinite(lp):
            extra, extra_grad = self._anchor_terms(x.reshape(-1, 2), want_grad=True)
            lp = lp + extra
            if np.isfinite(lp):
                g = g + extra_grad.reshape(-1)
        if lp == LOG_ZERO:
            raise ZeroDensityError("gradient at a zero-probability configuration")
        return float(lp), g

    @property
    def reference_moments(self):
        return self._moments

    def set_reference_moments(self, mean, cov):
        self._moments = (np.asarray(mean, float), np.asarray(cov, float))


def sensor_generate_instance(n_sensors: int, detection_range: float = 0.3,
                             noise: float = 0.02, seed: int = 0,
                             force_all_observed: bool = False,
                             n_anchors: int = 0) -> SensorNetwork:
    """Seeded instance: truth uniform in the unit square, detections
    Bernoulli(P_o at the truth), measured distances = truth + N(0, noise^2)
    clipped at zero.  noise=0 stores exact distances (evaluation then needs
    with_noise_scale).

    n_anchors > 0 pins that many additional known-position sensors that
    observe the unknown ones; anchors break the translation/rotation
    symmetry of the bare pairwise posterior, making its modes isolated.
    """
    if n_sensors < 2:
        raise TargetError("need at least two sensors")
    rng = np.random.default_rng(seed)
    truth = rng.uniform(size=(n_sensors, 2))
    obs = np.zeros((n_sensors, n_sensors), dtype=np.uint8)
    dist = np.zeros((n_sensors, n_sensors))
    for i in range(n_sensors):
        for j in range(i + 1, n_sensors):
            r = float(np.linalg.norm(truth[i] - truth[j]))
            p_o = math.exp(-r * r / (2.0 * detection_range ** 2))
            seen = force_all_observed or (rng.uniform() < p_o)
            if seen:
                d = r + (rng.normal(0.0, noise) if noise > 0 else 0.0)
                obs[i, j] = obs[j, i] = 1
                dist[i, j] = dist[j, i] = max(d, 0.0)
    anchors = anchor_obs = anchor_dist = None
    if n_anchors > 0:
        anchors = rng.uniform(size=(n_anchors, 2))
        anchor_obs = np.zeros((n_anchors, n_sensors), dtype=np.uint8)
        anchor_dist = np.zeros((n_anchors, n_sensors))
        for a in range(n_anchors):
            for i in range(n_sensors):
                r = float(np.linalg.norm(anchors[a] - truth[i]))
                p_o = math.exp(-r * r / (2.0 * detection_range ** 2))
                seen = force_all_observed or (rng.uniform() < p_o)
                if seen:
                    d = r + (rng.normal(0.0, noise) if noise > 0 else 0.0)
                    anchor_obs[a, i] = 1
                    anchor_dist[a, i] = max(d, 0.0)
    return SensorNetwork(n_sensors, detection_range, noise, obs, dist,
                         anchors=anchors, anchor_obs=anchor_obs,
                         anchor_dist=anchor_dist, true_positions=truth)


def save_sensor(path, net: SensorNetwork) -> None:
    lines = [f"sensors = {net.n_sensors}",
             f"detection_range = {float(net.detection_range)!r}",
             f"noise = {float(net.noise)!r}"]
    for i in range(net.n_sensors):
        for j in range(i + 1, net.n_sensors):
            lines.append(f"{i} {j} {int(net.obs[i, j])} {float(net.dist[i, j])!r}")
    if net.anchors is not None:
        for a in range(net.anchors.shape[0]):
            lines.append(f"anchor_{a} = "
                         + " ".join(repr(float(v)) for v in net.anchors[a]))
            row = []
            for i in range(net.n_sensors):
                row.append(str(int(net.anchor_obs[a, i])))
                row.append(repr(float(net.anchor_dist[a, i])))
            lines.append(f"anchor_obs_{a} = " + " ".join(row))
    if net.reference_moments is not None:
        mean, cov = net.reference_moments
        lines.append("mean = " + " ".join(repr(float(v)) for v in mean))
        lines.append("cov = " + " ".join(repr(float(v)) for v in cov.reshape(-1)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_sensor(path) -> SensorNetwork:
    header = {}
    pairs = []
    moments = {}
    anchor_rows = {}
    anchor_obs_rows = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" in line:
                key, _, value = line.partition("=")
                key = key.strip()
                if key in ("mean", "cov"):
                    moments[key] = np.array([float(v) for v in value.split()])
                elif key.startswith("anchor_obs_"):
                    anchor_obs_rows[int(key.removeprefix("anchor_obs_"))] = \
                        value.split()
                elif key.startswith("anchor_"):
                    anchor_rows[int(key.removeprefix("anchor_"))] = \
                        [float(v) for v in value.split()]
                else:
                    header[key] = value.strip()
            else:
                i, j, o, d = line.split()
                pairs.append((int(i), int(j), int(o), float(d)))
    n = int(header["sensors"])
    obs = np.zeros((n, n), dtype=np.uint8)
    dist = np.zeros((n, n))
    for i, j, o, d in pairs:
        obs[i, j] = obs[j, i] = o
        dist[i, j] = dist[j, i] = d
    anchors = anchor_obs = anchor_dist = None
    if anchor_rows:
        count = len(anchor_rows)
        anchors = np.array([anchor_rows[a] for a in range(count)])
        anchor_obs = np.zeros((count, n), dtype=np.uint8)
        anchor_dist = np.zeros((count, n))
        for a in range(count):
            row = anchor_obs_rows[a]
            for i in range(n):
                anchor_obs[a, i] = int(row[2 * i])
                anchor_dist[a, i] = float(row[2 * i + 1])
    net = SensorNetwork(n, float(header["detection_range"]), float(header["noise"]),
                        obs, dist, anchors=anchors, anchor_obs=anchor_obs,
                        anchor_dist=anchor_dist)
    if "mean" in moments and "cov" in moments:
        d = moments["mean"].size
        net.set_reference_moments(moments["mean"], moments["cov"].reshape(d, d))
    return net


def save_gmm(path, gmm: GaussianMixture) -> None:
    lines = ["[gmm]",
             f"dimension = {gmm.dim}",
             f"components = {gmm.n_components}",
             "weights = " + " ".join(repr(float(w)) for w in gmm.weights)]
    for i in range(gmm.n_components):
        lines.append(f"mean_{i} = " + " ".join(repr(float(v)) for v in gmm.means[i]))
        lines.append(f"cov_{i} = "
                     + " ".join(repr(float(v)) for v in gmm.covariances[i].reshape(-1)))
    if gmm.search_box is not None:
        lo, hi = gmm.search_box
        lines.append("box_low = " + " ".join(repr(float(v)) for v in lo))
        lines.append("box_high = " + " ".join(repr(float(v)) for v in hi))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_gmm(path) -> GaussianMixture:
    values = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#") or line.startswith("["):
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    d = int(values["dimension"])
    k = int(values["components"])
    weights = np.array([float(v) for v in values["weights"].split()])
    means = np.array([[float(v) for v in values[f"mean_{i}"].split()]
                      for i in range(k)])
    covs = np.array([[float(v) for v in values[f"cov_{i}"].split()]
                     for i in range(k)]).reshape(k, d, d)
    box = None
    if "box_low" in values:
        lo = np.array([float(v) for v in values["box_low"].split()])
        hi = np.array([float(v) for v in values["box_high"].split()])
        box = (lo, hi)
    return GaussianMixture(weights, means, covs, search_box=box)
