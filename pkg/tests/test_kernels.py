"""Backend parity: the compiled kernels must reproduce the pure-numpy
reference within floating-point roundoff."""

import numpy as np
import pytest

from modesampler import _kernels
from modesampler._kernels import available_backends

BACKENDS = available_backends()
HAS_COMPILED = "compiled" in BACKENDS

pytestmark = pytest.mark.skipif(not HAS_COMPILED,
                                reason="compiled backend unavailable")


def random_gmm_inputs(seed, k=4, d=7):
    rng = np.random.default_rng(seed)
    means = np.ascontiguousarray(rng.uniform(-5, 5, size=(k, d)))
    precs = np.empty((k, d, d))
    for i in range(k):
        a = rng.standard_normal((d, d))
        precs[i] = a @ a.T / d + np.eye(d)
    log_norms = np.ascontiguousarray(rng.uniform(-10, 0, size=k))
    x = np.ascontiguousarray(rng.uniform(-6, 6, size=d))
    return x, means, np.ascontiguousarray(precs), log_norms


def random_sensor_inputs(seed, n=6):
    rng = np.random.default_rng(seed)
    pi, pj = np.triu_indices(n, k=1)
    obs = (rng.uniform(size=pi.size) < 0.5).astype(np.uint8)
    dist = np.where(obs == 1, rng.uniform(0.1, 0.9, size=pi.size), 0.0)
    x = np.ascontiguousarray(rng.uniform(0, 1, size=2 * n))
    return (x, np.ascontiguousarray(pi.astype(np.int64)),
            np.ascontiguousarray(pj.astype(np.int64)),
            np.ascontiguousarray(obs), np.ascontiguousarray(dist),
            1.0 / (2 * 0.09), 1.0 / (2 * 0.0004), 2.9957)


@pytest.mark.parametrize("seed", range(8))
def test_gmm_logpdf_parity(seed):
    args = random_gmm_inputs(seed)
    assert BACKENDS["compiled"].gmm_logpdf(*args) == pytest.approx(
        BACKENDS["pure"].gmm_logpdf(*args), rel=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_gmm_grad_parity(seed):
    args = random_gmm_inputs(seed)
    lp_c, g_c = BACKENDS["compiled"].gmm_logpdf_grad(*args)
    lp_p, g_p = BACKENDS["pure"].gmm_logpdf_grad(*args)
    assert lp_c == pytest.approx(lp_p, rel=1e-12)
    assert np.allclose(np.asarray(g_c), g_p, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_sensor_parity(seed):
    args = random_sensor_inputs(seed)
    assert BACKENDS["compiled"].sensor_logpdf(*args) == pytest.approx(
        BACKENDS["pure"].sensor_logpdf(*args), rel=1e-12)
    lp_c, g_c = BACKENDS["compiled"].sensor_logpdf_grad(*args)
    lp_p, g_p = BACKENDS["pure"].sensor_logpdf_grad(*args)
    assert lp_c == pytest.approx(lp_p, rel=1e-12)
    assert np.allclose(np.asarray(g_c), g_p, rtol=1e-10, atol=1e-12)


def test_sensor_log_zero_parity():
    x, pi, pj, obs, dist, a, b, c = random_sensor_inputs(0)
    obs = np.zeros_like(obs)  # all unobserved
    x = np.zeros_like(x)      # all coincident
    for backend in BACKENDS.values():
        assert backend.sensor_logpdf(x, pi, pj, obs, dist, a, b, c) == -np.inf
        lp, g = backend.sensor_logpdf_grad(x, pi, pj, obs, dist, a, b, c)
        assert lp == -np.inf
        assert np.all(np.asarray(g) == 0.0)


@pytest.mark.parametrize("seed", range(6))
def test_active_wormhole_parity(seed):
    rng = np.random.default_rng(seed)
    w, d = 6, 5
    ends_a = np.ascontiguousarray(rng.uniform(-4, 4, size=(w, d)))
    ends_b = np.ascontiguousarray(rng.uniform(-4, 4, size=(w, d)))
    lengths = np.ascontiguousarray(np.linalg.norm(ends_b - ends_a, axis=1))
    x = np.ascontiguousarray(rng.uniform(-5, 5, size=d))
    idx_c, exc_c = BACKENDS["compiled"].active_wormhole(x, ends_a, ends_b, lengths)
    idx_p, exc_p = BACKENDS["pure"].active_wormhole(x, ends_a, ends_b, lengths)
    assert idx_c == idx_p
    assert exc_c == pytest.approx(exc_p, rel=1e-12, abs=1e-12)


def test_selected_backend_exported():
    assert _kernels.BACKEND in ("pure", "compiled")
