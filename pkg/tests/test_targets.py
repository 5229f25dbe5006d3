import math

import numpy as np
import pytest

from modesampler.numerics import finite_diff_gradient
from modesampler.targets import (GaussianMixture, SensorNetwork, TargetError,
                                 ZeroDensityError, gmm_generate_benchmark,
                                 load_gmm, load_sensor, save_gmm, save_sensor,
                                 sensor_generate_instance)


class TestGmmDensity:
    def test_standard_normal_at_mean(self):
        g = GaussianMixture.standard_normal(1)
        assert g.log_density(np.zeros(1)) == pytest.approx(-0.5 * math.log(2 * math.pi),
                                                           abs=1e-12)

    def test_proportional_weights_k4(self):
        g = gmm_generate_benchmark(2, 4, "proportional", seed=0)
        assert np.allclose(g.weights, [0.1, 0.2, 0.3, 0.4])

    def test_two_component_symmetric_point(self, two_mode_1d):
        expected = math.log(math.exp(-12.5) / math.sqrt(2 * math.pi))
        assert two_mode_1d.log_density(np.zeros(1)) == pytest.approx(expected,
                                                                     abs=1e-9)

    def test_component_permutation_invariance(self, desk_gmm):
        perm = np.array([3, 0, 4, 1, 2])
        shuffled = GaussianMixture(desk_gmm.weights[perm], desk_gmm.means[perm],
                                   desk_gmm.covariances[perm])
        rng = np.random.default_rng(5)
        for _ in range(10):
            x = rng.uniform(-2, 18, size=desk_gmm.dim)
            assert desk_gmm.log_density(x) == pytest.approx(
                shuffled.log_density(x), abs=1e-12)

    def test_moments_match_monte_carlo(self, desk_gmm):
        mu_star, sigma_star = desk_gmm.reference_moments
        rng = np.random.default_rng(42)
        draws = desk_gmm.sample(rng, 1_000_000)
        se_mean = np.sqrt(np.diag(sigma_star) / draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - mu_star) <= 3 * se_mean)
        sample_cov = np.cov(draws, rowvar=False)
        # covariance entries have SE ~ sqrt((s_ii s_jj + s_ij^2)/n)
        s = sigma_star
        se_cov = np.sqrt((np.outer(np.diag(s), np.diag(s)) + s ** 2)
                         / draws.shape[0])
        assert np.all(np.abs(sample_cov - s) <= 3 * se_cov)

    def test_gradient_single_gaussian(self):
        g = GaussianMixture.standard_normal(4)
        x = np.array([0.5, -1.0, 2.0, 0.0])
        assert np.allclose(g.gradient(x), -x, atol=1e-12)

    def test_gradient_vanishes_at_separated_mode(self, desk_gmm):
        for mean in desk_gmm.means:
            assert np.linalg.norm(desk_gmm.gradient(mean.copy())) <= 1e-6

    @pytest.mark.parametrize("make", [
        lambda: gmm_generate_benchmark(3, 3, "equal", seed=9),
        lambda: sensor_generate_instance(3, seed=4, n_anchors=2),
    ])
    def test_gradient_matches_finite_differences_100_points(self, make):
        target = make()
        rng = np.random.default_rng(100)
        lo, hi = target.search_box
        checked = 0
        while checked < 100:
            x = rng.uniform(np.asarray(lo) * 0.2, np.asarray(hi) * 0.2)
            try:
                analytic = target.gradient(x)
            except ZeroDensityError:
                continue
            fd = finite_diff_gradient(target.log_density, x, h=1e-6)
            scale = max(np.linalg.norm(fd), 1.0)
            assert np.linalg.norm(analytic - fd) <= 1e-4 * scale
            checked += 1


class TestGmmGenerator:
    def test_equal_weights(self):
        g = gmm_generate_benchmark(10, 10, "equal", seed=1)
        assert np.allclose(g.weights, 0.1)

    def test_proportional_ratio(self):
        g = gmm_generate_benchmark(10, 10, "proportional", seed=1)
        assert g.weights[9] / g.weights[0] == pytest.approx(10.0)

    def test_separation_rule(self):
        g = gmm_generate_benchmark(2, 2, "equal", seed=7)
        assert np.linalg.norm(g.means[0] - g.means[1]) >= 8.0 - 1e-9

    def test_min_separation_many_modes(self):
        g = gmm_generate_benchmark(10, 8, "equal", seed=3)
        dists = [np.linalg.norm(g.means[i] - g.means[j])
                 for i in range(8) for j in range(i)]
        assert min(dists) >= 8.0 - 1e-9

    def test_deterministic_in_seed(self):
        a = gmm_generate_benchmark(4, 3, "equal", seed=5)
        b = gmm_generate_benchmark(4, 3, "equal", seed=5)
        assert np.array_equal(a.means, b.means)

    def test_positive_orthant_means(self):
        g = gmm_generate_benchmark(6, 4, "equal", seed=2)
        assert np.all(g.means >= 0)

    def test_invalid_args(self):
        with pytest.raises(TargetError):
            gmm_generate_benchmark(0, 3)
        with pytest.raises(TargetError):
            gmm_generate_benchmark(3, 0)
        with pytest.raises(TargetError):
            gmm_generate_benchmark(3, 3, "linear")


def two_sensor_net(o, d, sigma=0.02, detection_range=0.3):
    obs = np.array([[0, o], [o, 0]], dtype=np.uint8)
    dist = np.array([[0.0, d], [d, 0.0]])
    return SensorNetwork(2, detection_range, sigma, obs, dist)


class TestSensorDensity:
    def test_unobserved_pair_at_detection_range(self):
        net = two_sensor_net(o=0, d=0.0)
        x = np.array([0.0, 0.0, 0.3, 0.0])
        assert net.log_density(x) == pytest.approx(math.log(1 - math.exp(-0.5)),
                                                   abs=1e-9)

    def test_observed_pair_zero_residual(self):
        net = two_sensor_net(o=1, d=0.3)
        x = np.array([0.0, 0.0, 0.3, 0.0])
        expected = -0.5 + math.log(1.0 / (0.02 * math.sqrt(2 * math.pi)))
        assert net.log_density(x) == pytest.approx(expected, abs=1e-5)

    def test_coincident_unobserved_is_log_zero(self):
        net = two_sensor_net(o=0, d=0.0)
        x = np.zeros(4)
        assert net.log_density(x) == -math.inf

    def test_gradient_at_zero_density_raises(self):
        net = two_sensor_net(o=0, d=0.0)
        with pytest.raises(ZeroDensityError):
            net.gradient(np.zeros(4))

    def test_dimension_mismatch(self):
        net = two_sensor_net(o=1, d=0.3)
        with pytest.raises(TargetError):
            net.log_density(np.zeros(3))

    def test_pair_order_invariance(self, sensor_ns3):
        # reference implementation summing pairs in shuffled order
        rng = np.random.default_rng(8)
        x = rng.uniform(0, 1, size=sensor_ns3.dim)
        pos = x.reshape(-1, 2)
        r2 = sensor_ns3.detection_range ** 2
        s2 = sensor_ns3.noise ** 2
        pairs = [(i, j) for i in range(3) for j in range(i + 1, 3)]
        rng.shuffle(pairs)
        total = 0.0
        for i, j in pairs:
            r = np.linalg.norm(pos[i] - pos[j])
            if sensor_ns3.obs[i, j]:
                resid = sensor_ns3.dist[i, j] - r
                total += (-r * r / (2 * r2) - resid * resid / (2 * s2)
                          - math.log(math.sqrt(2 * math.pi * s2)))
            else:
                total += math.log(1 - math.exp(-r * r / (2 * r2)))
        bare = SensorNetwork(3, sensor_ns3.detection_range, sensor_ns3.noise,
                             sensor_ns3.obs, sensor_ns3.dist)
        assert bare.log_density(x) == pytest.approx(total, abs=1e-12)

    def test_rigid_configuration_dominates(self):
        # fully observed, exact distances: the truth beats perturbations
        net = sensor_generate_instance(3, noise=0.0, seed=2,
                                       force_all_observed=True)
        posterior = net.with_noise_scale(1e-3)
        truth = net.true_positions.reshape(-1)
        lp_truth = posterior.log_density(truth)
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert posterior.log_density(truth + 0.05 * rng.standard_normal(6)) < lp_truth


class TestSensorGenerator:
    def test_paper_scale_dimension(self):
        net = sensor_generate_instance(8, detection_range=0.3, noise=0.02, seed=3)
        assert net.dim == 16

    def test_desk_scale_dimension(self):
        assert sensor_generate_instance(3, seed=3).dim == 6

    def test_zero_noise_exact_distances(self):
        net = sensor_generate_instance(4, noise=0.0, seed=5,
                                       force_all_observed=True)
        pos = net.true_positions
        for i in range(4):
            for j in range(i + 1, 4):
                assert net.dist[i, j] == pytest.approx(
                    np.linalg.norm(pos[i] - pos[j]), abs=1e-12)

    def test_deterministic(self):
        a = sensor_generate_instance(5, seed=9)
        b = sensor_generate_instance(5, seed=9)
        assert np.array_equal(a.obs, b.obs) and np.array_equal(a.dist, b.dist)

    def test_anchors_break_symmetry(self):
        net = sensor_generate_instance(3, seed=1, n_anchors=3)
        x = net.true_positions.reshape(-1)
        shifted = (net.true_positions + 0.2).reshape(-1)
        # translation changes the anchored posterior value
        assert net.log_density(x) != pytest.approx(net.log_density(shifted))


class TestSerialization:
    def test_sensor_round_trip(self, tmp_path, sensor_ns3):
        p = tmp_path / "net.txt"
        sensor_ns3.set_reference_moments(np.arange(6.0), np.eye(6))
        save_sensor(p, sensor_ns3)
        back = load_sensor(p)
        assert back.n_sensors == 3
        assert np.array_equal(back.obs, sensor_ns3.obs)
        assert np.allclose(back.dist, sensor_ns3.dist)
        assert np.allclose(back.anchors, sensor_ns3.anchors)
        assert np.allclose(back.anchor_dist, sensor_ns3.anchor_dist)
        mean, cov = back.reference_moments
        assert np.allclose(mean, np.arange(6.0)) and np.allclose(cov, np.eye(6))
        x = np.random.default_rng(1).uniform(0, 1, 6)
        assert back.log_density(x) == pytest.approx(sensor_ns3.log_density(x),
                                                    abs=1e-12)

    def test_gmm_round_trip(self, tmp_path, desk_gmm):
        p = tmp_path / "gmm.txt"
        save_gmm(p, desk_gmm)
        back = load_gmm(p)
        assert np.allclose(back.weights, desk_gmm.weights)
        assert np.allclose(back.means, desk_gmm.means)
        assert np.allclose(back.search_box[0], desk_gmm.search_box[0])
        x = np.random.default_rng(2).uniform(0, 16, desk_gmm.dim)
        assert back.log_density(x) == pytest.approx(desk_gmm.log_density(x),
                                                    abs=1e-12)
