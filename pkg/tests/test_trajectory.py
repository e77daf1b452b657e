import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logsumexp
from scipy.stats import nbinom

from conftest import random_epoch, random_model
from oracles import brute_force_log_likelihood, dense_log_marginal, truncated_nb_logpmf
from wardrisk.likelihood import Observations
from wardrisk.trajectory import (
    DurationParams,
    InitialEpochDist,
    Segmentation,
    TrajectoryModel,
    aligned_slots,
    censored_slots,
    count_segmentations,
    duration_log_pmf,
    duration_log_survival,
    enumerate_segmentations,
    enumeration_log_likelihood,
    segment_posteriors,
    trajectory_log_likelihood,
)


def model_args(m):
    return m.epochs, m.durations.r, m.durations.p, m.initial.probs, m.t_max


def random_obs(rng, D, n, span):
    return Observations(rng.integers(0, D, n), np.sort(rng.uniform(0, span, n)), rng.normal(size=n))


# durations


def test_pmf_normalized_and_matches_scipy():
    d = DurationParams([0.7, 3.0, 12.0], [0.2, 0.5, 0.9], 40)
    for k in range(3):
        probs = np.exp([duration_log_pmf(T, k, d) for T in range(1, 41)])
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(np.log(probs), truncated_nb_logpmf(d.r[k], d.p[k], 40), rtol=1e-12)


def test_r_one_is_truncated_geometric():
    p = 0.3
    d = DurationParams([1.0], [p], 25)
    T = np.arange(1, 26)
    geo = p * (1 - p) ** (T - 1)
    np.testing.assert_allclose(np.exp(d.log_pmf_table[0]), geo / geo.sum(), rtol=1e-12)


def test_sampled_mean_matches_truncated_mean():
    d = DurationParams([5.0], [0.5], 500)
    rng = np.random.default_rng(0)
    draws = np.array([d.sample(0, rng) for _ in range(100_000)])
    assert draws.mean() == pytest.approx(d.means()[0], rel=0.01)


def test_sampled_histogram_chi_square():
    from scipy.stats import chisquare

    d = DurationParams([2.0], [0.3], 30)
    rng = np.random.default_rng(1)
    draws = np.array([d.sample(0, rng) for _ in range(100_000)])
    expected = np.exp(d.log_pmf_table[0]) * len(draws)
    observed = np.bincount(draws, minlength=31)[1:]
    keep = expected >= 5
    obs, exp = observed[keep], expected[keep]
    if not keep.all():
        obs = np.append(obs, observed[~keep].sum())
        exp = np.append(exp, expected[~keep].sum())
    assert chisquare(obs, exp).pvalue > 0.01


def test_survival_examples():
    d = DurationParams([2.0, 4.0], [0.4, 0.6], 12)
    for k in range(2):
        assert duration_log_survival(1, k, d) == 0.0
        assert duration_log_survival(12, k, d) == pytest.approx(duration_log_pmf(12, k, d), rel=1e-12)
        for T in range(1, 13):
            tail = logsumexp([duration_log_pmf(u, k, d) for u in range(T, 13)])
            assert duration_log_survival(T, k, d) == pytest.approx(tail, abs=1e-12)


@pytest.mark.parametrize("T", [0, 13, 2.5, -1])
def test_duration_support_errors(T):
    d = DurationParams([2.0], [0.4], 12)
    with pytest.raises(ValueError):
        duration_log_pmf(T, 0, d)
    with pytest.raises(ValueError):
        duration_log_survival(T, 0, d)


def test_duration_validation_and_means():
    with pytest.raises(ValueError):
        DurationParams([0.0], [0.5], 10)
    with pytest.raises(ValueError):
        DurationParams([1.0], [1.0], 10)
    d = DurationParams.from_means([5.0, 9.0], 3.0, 500)
    np.testing.assert_allclose(d.means(), [5.0, 9.0], rtol=1e-6)
    assert np.isclose(nbinom.mean(3.0, d.p[0]) + 1, 5.0)


def test_initial_distribution():
    with pytest.raises(ValueError):
        InitialEpochDist([0.5, 0.6])
    with pytest.raises(ValueError):
        InitialEpochDist([-0.1, 1.1])
    pi = InitialEpochDist.normalized([2.0, 2.0, 4.0])
    np.testing.assert_allclose(pi.probs, [0.25, 0.25, 0.5])


# slot conventions


def test_slot_counts():
    assert censored_slots(0.0) == 1
    assert censored_slots(2.0) == 3
    assert censored_slots(2.99) == 3
    assert aligned_slots(3.0) == 3
    assert aligned_slots(2.2) == 3
    assert aligned_slots(0.0) == 1
    assert aligned_slots(2.0, [0.5, 2.0]) == 3


def test_boundary_tie_goes_to_later_epoch():
    seg = Segmentation(0, (3, 5))
    np.testing.assert_array_equal(seg.labels([0.0, 2.99, 3.0, 4.5, 5.0, 7.0]), [0, 0, 1, 1, 2, 2])


# enumeration


def test_enumeration_counts():
    assert len(enumerate_segmentations(1, 7.5)) == 1
    assert len(enumerate_segmentations(2, 3)) == 5
    for K in range(1, 4):
        for t in range(0, 7):
            n = t + 1
            closed = sum(math.comb(n - 1, m) for k0 in range(K) for m in range(K - k0))
            segs = enumerate_segmentations(K, t)
            assert len(segs) == closed == count_segmentations(K, n)
            assert len(set(segs)) == len(segs)
            assert len(enumerate_segmentations(K, endpoint=n)) == count_segmentations(K, n, True)


def test_enumeration_guard():
    with pytest.raises(ValueError):
        enumerate_segmentations(8, 400)
    with pytest.raises(ValueError):
        enumerate_segmentations(2)


# likelihood


def test_no_events_single_epoch_is_duration_tail():
    rng = np.random.default_rng(0)
    m = random_model(rng, 1, 2, t_max=10)
    empty = Observations([], [], [])
    for t in (0.0, 3.4, 9.0):
        assert trajectory_log_likelihood(empty, m, t) == pytest.approx(
            duration_log_survival(censored_slots(t), 0, m.durations), abs=1e-12)


def test_single_epoch_is_tail_plus_gp():
    rng = np.random.default_rng(1)
    m = random_model(rng, 1, 3, R=2, t_max=20)
    obs = random_obs(rng, 3, 9, 7.5)
    t = 7.5
    expected = duration_log_survival(8, 0, m.durations) + dense_log_marginal(obs.streams, obs.times, obs.values, m.epochs[0])
    assert trajectory_log_likelihood(obs, m, t) == pytest.approx(expected, rel=1e-11)


def test_three_epochs_ten_hours_against_brute_force():
    rng = np.random.default_rng(2)
    m = random_model(rng, 3, 2, t_max=6)
    obs = random_obs(rng, 2, 6, 10.0)
    ref = brute_force_log_likelihood(obs.streams, obs.times, obs.values, *model_args(m), t=10.0)
    assert trajectory_log_likelihood(obs, m, 10.0) == pytest.approx(ref, rel=1e-9)


@given(st.integers(0, 2**31), st.integers(1, 3), st.integers(0, 8), st.floats(0.0, 10.0), st.booleans())
def test_dp_equals_brute_force(seed, K, n_events, horizon, aligned):
    rng = np.random.default_rng(seed)
    m = random_model(rng, K, 2, t_max=int(rng.integers(2, 8)))
    obs = random_obs(rng, 2, n_events, horizon)
    args = model_args(m)
    if aligned:
        ref = brute_force_log_likelihood(obs.streams, obs.times, obs.values, *args, endpoint=horizon)
        got = trajectory_log_likelihood(obs, m, endpoint=horizon)
    else:
        ref = brute_force_log_likelihood(obs.streams, obs.times, obs.values, *args, t=horizon)
        got = trajectory_log_likelihood(obs, m, horizon)
    if ref == -np.inf:
        assert got == -np.inf
    else:
        assert got == pytest.approx(ref, rel=1e-9)
        enum = enumeration_log_likelihood(obs, m, endpoint=horizon) if aligned else enumeration_log_likelihood(obs, m, horizon)
        assert enum == pytest.approx(ref, rel=1e-9)


def test_same_time_events_exchangeable():
    rng = np.random.default_rng(3)
    m = random_model(rng, 2, 3, t_max=8)
    a = Observations([0, 1, 2, 0], [1.0, 2.0, 2.0, 3.5], [0.1, -0.3, 0.7, 0.2])
    b = Observations([0, 2, 1, 0], [1.0, 2.0, 2.0, 3.5], [0.1, 0.7, -0.3, 0.2])
    assert trajectory_log_likelihood(a, m, 4.0) == pytest.approx(trajectory_log_likelihood(b, m, 4.0), rel=1e-12)


def test_adding_observation_bounded_by_best_single_density():
    rng = np.random.default_rng(4)
    m = random_model(rng, 2, 2, t_max=8)
    obs = random_obs(rng, 2, 7, 6.0)
    t = 6.5
    base = trajectory_log_likelihood(obs.select(np.arange(6)), m, t)
    full = trajectory_log_likelihood(obs, m, t)
    s = obs.streams[6]
    # the gain is a mixture of conditional densities, each with variance at least the noise
    tight = max(-0.5 * math.log(2 * math.pi * ep.noise[s]) for ep in m.epochs)
    assert full - base <= tight + 1e-9


def test_posteriors_match_enumeration_and_cover_each_observation():
    rng = np.random.default_rng(5)
    m = random_model(rng, 2, 2, t_max=6)
    obs = random_obs(rng, 2, 6, 5.0)
    t = 5.0
    post = segment_posteriors(obs, m, t)
    assert post.log_likelihood == pytest.approx(trajectory_log_likelihood(obs, m, t), rel=1e-12)
    n = censored_slots(t)
    weights = {}
    logs = []
    segs = enumerate_segmentations(2, t)
    for seg in segs:
        logs.append(brute_force_segment(seg, obs, m, n))
    Z = logsumexp(logs)
    for seg, lw in zip(segs, logs):
        for span in seg.spans(n):
            weights[span] = weights.get(span, 0.0) + math.exp(lw - Z)
    keys = set(weights) | set(post.weights)
    assert max(abs(weights.get(k, 0) - post.weights.get(k, 0)) for k in keys) <= 1e-9
    for time in obs.times:
        assert post.coverage(time) == pytest.approx(1.0, abs=1e-9)
    assert all(w >= 0 for w in post.weights.values())


def brute_force_segment(seg, obs, m, n):
    total = math.log(m.initial.probs[seg.start_epoch])
    spans = seg.spans(n)
    for i, (k, a, b) in enumerate(spans):
        lp = truncated_nb_logpmf(m.durations.r[k], m.durations.p[k], m.t_max)
        d = b - a
        if d > m.t_max:
            return -np.inf
        total += logsumexp(lp[d - 1:]) if i == len(spans) - 1 else lp[d - 1]
        sel = (obs.times >= a) & (obs.times < b)
        total += dense_log_marginal(obs.streams[sel], obs.times[sel], obs.values[sel], m.epochs[k])
    return total


def test_single_epoch_posterior_is_certain():
    rng = np.random.default_rng(6)
    m = random_model(rng, 1, 2, t_max=10)
    post = segment_posteriors(random_obs(rng, 2, 4, 3.0), m, 3.0)
    assert list(post.weights.values()) == pytest.approx([1.0])


def test_end_aligned_posteriors_end_in_last_epoch():
    rng = np.random.default_rng(7)
    m = random_model(rng, 3, 2, t_max=5)
    post = segment_posteriors(random_obs(rng, 2, 5, 6.0), m, endpoint=7)
    last = sum(w for (k, a, b), w in post.weights.items() if b == post.n_slots)
    assert last == pytest.approx(1.0, abs=1e-12)
    assert all(k == 2 for (k, a, b) in post.weights if b == post.n_slots)


def test_model_serialization_roundtrip():
    rng = np.random.default_rng(8)
    m = random_model(rng, 3, 2)
    back = TrajectoryModel.from_dict(m.to_dict())
    obs = random_obs(rng, 2, 5, 4.0)
    assert trajectory_log_likelihood(obs, back, 4.0) == trajectory_log_likelihood(obs, m, 4.0)


def test_model_validation():
    rng = np.random.default_rng(9)
    eps = [random_epoch(rng, 2, 1) for _ in range(2)]
    with pytest.raises(ValueError):
        TrajectoryModel(eps, DurationParams([1.0], [0.5], 5), InitialEpochDist([0.5, 0.5]))
    with pytest.raises(ValueError):
        TrajectoryModel([], DurationParams([], [], 5), InitialEpochDist([]))


def test_horizon_beyond_reach_is_impossible():
    rng = np.random.default_rng(10)
    m = random_model(rng, 2, 1, t_max=3)
    obs = random_obs(rng, 1, 3, 5.0)
    assert trajectory_log_likelihood(obs, m, endpoint=9) == -np.inf
