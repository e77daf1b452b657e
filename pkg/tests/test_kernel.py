import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_epoch
from oracles import dense_covariance
from wardrisk.kernel import (
    LENGTH_SCALE_BOUNDS,
    NUGGET,
    EpochKernelParams,
    assemble_covariance,
    log_se_kernel,
    se_kernel,
    softplus,
    softplus_inv,
    task_cov_from_factors,
)


def test_se_kernel_values():
    assert se_kernel(3.2, 3.2, 0.7) == 1.0
    assert se_kernel(0.0, 1.0, 1.0) == pytest.approx(0.6065306597126334, abs=1e-15)
    assert se_kernel(1.0, 0.0, 2.0) == se_kernel(0.0, 1.0, 2.0)


def test_se_kernel_far_apart_in_log_space():
    ref = float(mpmath.log(mpmath.exp(mpmath.mpf(-50))))
    assert log_se_kernel(0.0, 10.0, 1.0) == pytest.approx(ref, rel=1e-15)
    assert se_kernel(0.0, 10.0, 1.0) == pytest.approx(math.exp(-50), rel=1e-12)


def test_se_kernel_rejects_bad_length_scale():
    with pytest.raises(ValueError):
        se_kernel(0.0, 1.0, 0.0)


@given(st.floats(0.01, 100), st.floats(0, 50), st.floats(0, 50))
def test_se_kernel_monotone_in_distance(ls, d1, d2):
    a, b = sorted((d1, d2))
    assert se_kernel(0.0, a, ls) >= se_kernel(0.0, b, ls)


def test_task_cov_examples():
    np.testing.assert_array_equal(task_cov_from_factors(np.zeros((3, 2)), np.ones(3)), np.eye(3))
    np.testing.assert_array_equal(task_cov_from_factors(np.ones((4, 1)), np.zeros(4)), np.ones((4, 4)))
    with pytest.raises(ValueError):
        task_cov_from_factors(np.ones((2, 3)), np.ones(2))


@given(st.integers(1, 6), st.integers(0, 6), st.integers(0, 2**31))
def test_task_cov_psd(D, R, seed):
    R = min(R, D)
    rng = np.random.default_rng(seed)
    S = task_cov_from_factors(rng.normal(size=(D, R)), rng.uniform(0, 2, D))
    np.testing.assert_array_equal(S, S.T)
    assert np.linalg.eigvalsh(S).min() >= -1e-10


def test_single_observation_matrix():
    rng = np.random.default_rng(0)
    ep = random_epoch(rng, 3, 2)
    C = assemble_covariance([2], [5.0], [0], {0: ep})
    assert C.shape == (1, 1)
    assert C[0, 0] == pytest.approx(ep.task_cov[2, 2] + ep.noise[2])


def test_cross_epoch_entries_exactly_zero():
    rng = np.random.default_rng(1)
    eps = {0: random_epoch(rng, 2, 1), 1: random_epoch(rng, 2, 1)}
    C = assemble_covariance([0, 1], [1.0, 1.1], [0, 1], eps)
    assert C[0, 1] == 0.0 and C[1, 0] == 0.0


def test_block_diagonal_up_to_permutation():
    rng = np.random.default_rng(2)
    D = 3
    eps = {0: random_epoch(rng, D, 2), 1: random_epoch(rng, D, 2)}
    n = 30
    streams = rng.integers(0, D, n)
    times = np.sort(rng.uniform(0, 20, n))
    labels = rng.integers(0, 2, n)
    C = assemble_covariance(streams, times, labels, eps)
    order = np.argsort(labels, kind="stable")
    P = C[np.ix_(order, order)]
    n0 = int(np.sum(labels == 0))
    for k, sl in ((0, slice(0, n0)), (1, slice(n0, n))):
        idx = order[sl]
        ep = eps[k]
        ref = dense_covariance(streams[idx], times[idx], ep.factor, ep.diag, ep.length_scale, ep.noise)
        np.testing.assert_allclose(P[sl, sl], ref, rtol=1e-13, atol=1e-15)
    assert np.all(P[:n0, n0:] == 0.0)


def test_missing_epoch_params():
    rng = np.random.default_rng(3)
    with pytest.raises(KeyError):
        assemble_covariance([0], [0.0], [4], {0: random_epoch(rng, 1, 1)})


def test_assembled_matrix_admits_cholesky_for_random_draws():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        D = int(rng.integers(1, 5))
        R = int(rng.integers(0, D + 1))
        ep = EpochKernelParams(rng.normal(size=D), rng.normal(size=(D, R)), rng.uniform(0, 1, D),
                               rng.uniform(*LENGTH_SCALE_BOUNDS), np.full(D, NUGGET) + rng.uniform(0, 0.1, D))
        n = int(rng.integers(1, 15))
        C = assemble_covariance(rng.integers(0, D, n), np.sort(rng.uniform(0, 30, n)), np.zeros(n, int), {0: ep})
        np.testing.assert_array_equal(C, C.T)
        np.linalg.cholesky(C)


def test_parameter_validation():
    with pytest.raises(ValueError):
        EpochKernelParams([0.0], [[1.0]], [1.0], 1.0, [0.0])  # below the nugget
    with pytest.raises(ValueError):
        EpochKernelParams([0.0], [[1.0]], [-1.0], 1.0, [0.1])
    with pytest.raises(ValueError):
        EpochKernelParams([np.nan], [[1.0]], [1.0], 1.0, [0.1])
    ep = EpochKernelParams([0.0], [[1.0]], [1.0], 1000.0, [0.1])
    with pytest.raises(ValueError):
        ep.check_bounds()


@given(st.integers(1, 4), st.integers(0, 3), st.integers(0, 2**31))
def test_unconstrained_roundtrip(D, R, seed):
    R = min(R, D)
    rng = np.random.default_rng(seed)
    ep = random_epoch(rng, D, R)
    back = EpochKernelParams.from_unconstrained(ep.to_unconstrained(), D, R)
    for name in ("mean", "factor", "diag", "noise"):
        np.testing.assert_allclose(getattr(back, name), getattr(ep, name), rtol=1e-10, atol=1e-12)
    assert back.length_scale == pytest.approx(ep.length_scale, rel=1e-12)
    again = EpochKernelParams.from_dict(ep.to_dict())
    np.testing.assert_array_equal(again.factor, ep.factor)


@given(st.floats(1e-8, 500))
def test_softplus_inverse(y):
    assert float(softplus(softplus_inv(y))) == pytest.approx(y, rel=1e-9)
