import math

import numpy as np
import pytest

from modesampler.numerics import (BfgsResult, FixedPointError, NotSPDError,
                                  bfgs_maximize, cholesky_spd,
                                  finite_diff_gradient, finite_diff_hessian,
                                  fixed_point_solve, regularize_spd)


def bisect_root(f, lo, hi, tol=1e-10):
    """Sign-change bisection; oracle for stationary points."""
    flo = f(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if hi - lo < tol:
            return mid
        if (flo < 0) == (fm < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestBfgs:
    def test_quadratic_maximum(self):
        target = np.array([1.0, 2.0])
        res = bfgs_maximize(lambda x: -float(np.sum((x - target) ** 2)),
                            np.zeros(2),
                            gradient=lambda x: -2.0 * (x - target))
        assert res.converged
        assert np.allclose(res.maximizer, target, atol=1e-6)
        assert abs(res.objective_value) < 1e-10

    def test_standard_normal_logpdf(self):
        def logpdf(x):
            return -0.5 * float(x @ x) - 1.5 * math.log(2 * math.pi)

        res = bfgs_maximize(logpdf, np.full(3, 5.0), gradient=lambda x: -x)
        assert res.converged
        assert np.allclose(res.maximizer, 0.0, atol=1e-6)

    def test_mixture_mode_against_bisection_oracle(self, two_mode_1d):
        # the gradient changes sign across the near-5 mode; bisection on a
        # fine bracket pins the stationary point independently of BFGS
        g = lambda x: float(two_mode_1d.gradient(np.array([x]))[0])
        oracle = bisect_root(g, 4.5, 5.5)
        assert abs(oracle - 4.99998) < 1e-4  # frozen from the oracle itself
        res = bfgs_maximize(lambda x: two_mode_1d.log_density(x),
                            np.array([4.0]), gradient=two_mode_1d.gradient)
        assert res.converged
        assert abs(res.maximizer[0] - oracle) < 1e-6

    @pytest.mark.parametrize("dim", [2, 5, 10, 20])
    def test_concave_quadratic_iteration_budget(self, dim):
        rng = np.random.default_rng(dim)
        a = rng.standard_normal((dim, dim))
        spd = a @ a.T + dim * np.eye(dim)
        center = rng.standard_normal(dim)

        res = bfgs_maximize(lambda x: -0.5 * float((x - center) @ spd @ (x - center)),
                            np.zeros(dim),
                            gradient=lambda x: -spd @ (x - center),
                            tol=1e-8)
        assert res.converged
        assert res.gradient_norm <= 1e-8
        assert res.iterations <= 2 * dim + 5

    def test_never_below_start_value(self):
        # objective with a cliff: non-finite beyond x > 2
        def f(x):
            v = float(x[0])
            return -((v - 1.5) ** 2) if v < 2.0 else float("nan")

        res = bfgs_maximize(f, np.array([0.0]))
        assert res.objective_value >= f(np.array([0.0]))

    def test_non_finite_start_raises(self):
        with pytest.raises(ValueError):
            bfgs_maximize(lambda x: float("nan"), np.zeros(1))

    def test_no_finite_ascent_reports_diagnostic(self):
        # finite at start, non-finite everywhere else
        def f(x):
            return 0.0 if np.allclose(x, 0.0) else float("inf") * 0.0  # nan

        res = bfgs_maximize(f, np.zeros(2), gradient=lambda x: np.ones(2))
        assert not res.converged
        assert res.message
        assert isinstance(res, BfgsResult)


class TestFiniteDifferences:
    def test_gradient_polynomial(self):
        g = finite_diff_gradient(lambda x: float(x @ x), np.ones(2), h=1e-5)
        assert np.allclose(g, [2.0, 2.0], atol=1e-6)

    def test_gradient_constant(self):
        g = finite_diff_gradient(lambda x: 3.5, np.array([1.0, -2.0, 0.3]))
        assert np.allclose(g, 0.0)

    def test_gradient_matches_sensor_analytic(self, sensor_ns3):
        rng = np.random.default_rng(0)
        x = rng.uniform(0.2, 0.8, size=sensor_ns3.dim)
        analytic = sensor_ns3.gradient(x)
        fd = finite_diff_gradient(sensor_ns3.log_density, x, h=1e-6)
        assert np.linalg.norm(analytic - fd) <= 1e-4 * max(np.linalg.norm(fd), 1.0)

    def test_gradient_error_names_axis(self):
        def f(x):
            return float("nan") if x[1] > 0.5 else 0.0

        with pytest.raises(Exception, match="axis 1"):
            finite_diff_gradient(f, np.array([0.0, 0.5]), h=0.1)

    def test_hessian_isotropic(self):
        h = finite_diff_hessian(lambda x: -0.5 * float(x @ x),
                                np.array([0.3, -1.2]))
        assert np.allclose(h, -np.eye(2), atol=1e-5)

    def test_hessian_diagonal_quadratic(self):
        a = np.diag([1.0, 4.0])
        h = finite_diff_hessian(lambda x: -0.5 * float(x @ a @ x), np.zeros(2))
        assert np.allclose(h, -a, atol=1e-4)

    def test_hessian_at_gmm_mode(self, desk_gmm):
        # unit covariances: local Hessian of the log density is -I
        h = finite_diff_hessian(desk_gmm.log_density, desk_gmm.means[0].copy())
        assert np.allclose(h, -np.eye(desk_gmm.dim), rtol=0, atol=1e-3)

    def test_hessian_symmetry(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((4, 4))
        spd = a @ a.T + 4 * np.eye(4)
        h = finite_diff_hessian(lambda x: -0.5 * float(x @ spd @ x),
                                rng.standard_normal(4))
        assert np.array_equal(h, h.T)


class TestFixedPoint:
    def test_identity_returns_start(self):
        z, iters = fixed_point_solve(lambda z: z, np.array([1.0, 2.0]))
        assert iters == 0
        assert np.array_equal(z, [1.0, 2.0])

    def test_affine_contraction(self):
        c = np.array([3.0, -1.0])
        z, _ = fixed_point_solve(lambda z: 0.5 * z + c, np.zeros(2), tol=1e-12)
        assert np.allclose(z, 2 * c, atol=1e-10)

    def test_residual_contract_on_return(self):
        c = np.array([0.7])
        fn = lambda z: 0.6 * z + c
        z, _ = fixed_point_solve(fn, np.zeros(1), tol=1e-9)
        assert np.linalg.norm(fn(z) - z) <= 1e-9

    def test_non_convergence_raises_with_residual(self):
        with pytest.raises(FixedPointError) as exc:
            fixed_point_solve(lambda z: -z + 1.0, np.zeros(1), tol=1e-12,
                              max_iter=25)
        assert exc.value.residual > 0


class TestCholesky:
    def test_identity(self):
        assert np.array_equal(cholesky_spd(np.eye(3)), np.eye(3))

    def test_diagonal(self):
        lower = cholesky_spd(np.diag([4.0, 9.0]))
        assert np.allclose(lower, np.diag([2.0, 3.0]))

    def test_random_spd_round_trip(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((5, 5))
        spd = a.T @ a + np.eye(5)
        lower = cholesky_spd(spd)
        assert np.allclose(lower @ lower.T, spd, rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("dim", [10, 50, 100])
    def test_round_trip_large(self, dim):
        rng = np.random.default_rng(dim)
        a = rng.standard_normal((dim, dim))
        spd = a.T @ a + dim * np.eye(dim)
        lower = cholesky_spd(spd)
        err = np.max(np.abs(lower @ lower.T - spd)) / np.max(np.abs(spd))
        assert err <= 1e-10

    def test_not_spd_raises(self):
        with pytest.raises(NotSPDError):
            cholesky_spd(np.diag([1.0, -1.0]))

    def test_asymmetric_raises(self):
        with pytest.raises(NotSPDError):
            cholesky_spd(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_regularize_repairs_small_negative(self):
        m = np.diag([1.0, 1e-14])
        m[0, 1] = m[1, 0] = 1e-7  # slightly indefinite
        repaired = regularize_spd(m)
        cholesky_spd(repaired)

    def test_regularize_gives_up_on_hard_negatives(self):
        with pytest.raises(NotSPDError):
            regularize_spd(np.diag([1.0, -1.0]))
