import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from wardrisk.kernel import EpochKernelParams  # noqa: E402
from wardrisk.simulator import SimConfig, recovery_params, sample_cohort  # noqa: E402
from wardrisk.trajectory import DurationParams, InitialEpochDist, TrajectoryModel  # noqa: E402

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: dict[int, str] = {}


def random_epoch(rng, D, R, ls=(0.5, 4.0)):
    return EpochKernelParams(
        rng.normal(size=D),
        rng.normal(scale=0.7, size=(D, R)),
        rng.uniform(0.2, 1.0, D),
        rng.uniform(*ls),
        rng.uniform(0.05, 0.5, D),
    )


def random_model(rng, K, D, R=1, t_max=6):
    epochs = [random_epoch(rng, D, R) for _ in range(K)]
    dur = DurationParams(rng.uniform(0.8, 4.0, K), rng.uniform(0.2, 0.8, K), t_max)
    pi = rng.dirichlet(np.ones(K))
    return TrajectoryModel(epochs, dur, InitialEpochDist(pi))


@pytest.fixture(scope="session")
def small_truth():
    return recovery_params(0, prior_icu=0.5, t_max=30)


@pytest.fixture(scope="session")
def small_cohort(small_truth):
    cohort, truth = sample_cohort(SimConfig(80, 11, small_truth))
    return cohort, truth


@pytest.fixture(scope="session")
def small_fit(small_cohort):
    from wardrisk.mixture import EMConfig, em_fit

    cohort, _ = small_cohort
    return em_fit(cohort, 2, 2, EMConfig(seed=0, t_max=30, max_iter=8))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
