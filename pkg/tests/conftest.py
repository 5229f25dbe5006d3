import numpy as np
import pytest

from modesampler.targets import gmm_generate_benchmark, sensor_generate_instance


@pytest.fixture(scope="session")
def desk_gmm():
    """D=10, K=5 equal-weight benchmark instance used across suites."""
    return gmm_generate_benchmark(10, 5, "equal", seed=1)


@pytest.fixture(scope="session")
def two_mode_1d():
    """0.5 N(-5,1) + 0.5 N(5,1)."""
    from modesampler.targets import GaussianMixture
    return GaussianMixture(np.array([0.5, 0.5]), np.array([[-5.0], [5.0]]),
                           np.stack([np.eye(1), np.eye(1)]))


@pytest.fixture(scope="session")
def sensor_ns3():
    return sensor_generate_instance(3, detection_range=0.3, noise=0.02, seed=1,
                                    n_anchors=3)
