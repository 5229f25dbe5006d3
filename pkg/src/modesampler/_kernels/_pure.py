"""Pure-numpy implementations of the hot kernels.

Semantics here are the reference; the compiled backend must match these
within floating-point roundoff (see tests/test_kernels.py).
"""

import numpy as np


def gmm_logpdf(x, means, precs, log_norms):
    """Log density of a Gaussian mixture via log-sum-exp.

    means: (K, D), precs: (K, D, D) precision matrices,
    log_norms: (K,) per-component log(w_k * normalization).
    """
    diff = x[None, :] - means
    quad = np.einsum("ki,kij,kj->k", diff, precs, diff)
    terms = log_norms - 0.5 * quad
    m = np.max(terms)
    return float(m + np.log(np.sum(np.exp(terms - m))))


def gmm_logpdf_grad(x, means, precs, log_norms):
    """Log density and its gradient (responsibility-weighted pulls)."""
    diff = x[None, :] - means
    pulled = np.einsum("kij,kj->ki", precs, diff)
    quad = np.einsum("ki,ki->k", diff, pulled)
    terms = log_norms - 0.5 * quad
    m = np.max(terms)
    w = np.exp(terms - m)
    total = np.sum(w)
    logpdf = float(m + np.log(total))
    grad = -np.einsum("k,ki->i", w / total, pulled)
    return logpdf, grad


def sensor_logpdf(x, pi, pj, obs, dist, inv_2r2, inv_2s2, log_pnu_norm):
    """Log posterior of a pairwise range network.

    x: flat (2*Ns,) sensor coordinates; pi/pj: pair index arrays;
    obs: 0/1 detection flags; dist: measured distances (0 where obs=0).
    Returns -inf when a non-detection pair coincides (1 - P_o = 0).
    """
    pos = x.reshape(-1, 2)
    d = pos[pi] - pos[pj]
    r = np.sqrt(np.sum(d * d, axis=1))
    total = 0.0
    o = obs.astype(bool)
    if np.any(o):
        ro = r[o]
        resid = dist[o] - ro
        total += np.sum(-ro * ro * inv_2r2 - resid * resid * inv_2s2 + log_pnu_norm)
    if np.any(~o):
        rn = r[~o]
        if np.any(rn == 0.0):
            return float("-inf")
        total += np.sum(np.log(-np.expm1(-rn * rn * inv_2r2)))
    return float(total)


def sensor_logpdf_grad(x, pi, pj, obs, dist, inv_2r2, inv_2s2, log_pnu_norm):
    """Log posterior and gradient; gradient is zeros when the density is zero."""
    pos = x.reshape(-1, 2)
    grad = np.zeros_like(pos)
    d = pos[pi] - pos[pj]
    r = np.sqrt(np.sum(d * d, axis=1))
    o = obs.astype(bool)
    rn = r[~o]
    if np.any(rn == 0.0):
        return float("-inf"), np.zeros_like(x)

    total = 0.0
    coef = np.zeros_like(r)
    if np.any(o):
        ro = r[o]
        resid = dist[o] - ro
        total += np.sum(-ro * ro * inv_2r2 - resid * resid * inv_2s2 + log_pnu_norm)
        coef[o] = -2.0 * inv_2r2 * ro + 2.0 * inv_2s2 * resid
    if np.any(~o):
        po = np.exp(-rn * rn * inv_2r2)
        total += np.sum(np.log1p(-po))
        coef[~o] = 2.0 * inv_2r2 * rn * po / (1.0 - po)

    safe_r = np.where(r > 0.0, r, 1.0)
    unit = d / safe_r[:, None]
    unit[r == 0.0] = 0.0
    pair_grad = coef[:, None] * unit
    np.add.at(grad, pi, pair_grad)
    np.add.at(grad, pj, -pair_grad)
    return float(total), grad.reshape(-1)


def active_wormhole(x, ends_a, ends_b, lengths):
    """Index and triangle-inequality excess of the nearest wormhole.

    ends_a/ends_b: (W, D) endpoint arrays, lengths: (W,) endpoint gaps.
    The active wormhole minimizes ||x-a|| + ||b-x|| - L (maximal mollifier).
    """
    da = np.linalg.norm(x[None, :] - ends_a, axis=1)
    db = np.linalg.norm(ends_b - x[None, :], axis=1)
    excess = da + db - lengths
    idx = int(np.argmin(excess))
    return idx, float(excess[idx])
