import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logsumexp

from conftest import random_epoch
from oracles import dense_log_marginal, truncated_nb_logpmf
from wardrisk.cohort import DEFAULT_STREAMS, MeasurementEvent, PatientRecord, StaticProfile, Vocabulary
from wardrisk.likelihood import StreamStandardizer
from wardrisk.mixture import GatingParams, ModelParams, class_conditional_log_likelihood
from wardrisk.scoring import (
    observe,
    open_session,
    posterior_risk,
    score_cohort,
    score_trajectory,
    tick,
    write_traces_csv,
)
from wardrisk.trajectory import DurationParams, InitialEpochDist, TrajectoryModel, censored_slots

PROFILE = StaticProfile(55.0, "M", "general_medicine", False, "460-519", "emergency_department")


def one_epoch_params(seed=0, D=2, prior=0.09, t_max=30):
    rng = np.random.default_rng(seed)
    vocab = Vocabulary()
    F = 2 + sum(vocab.cardinalities().values())
    traj = []
    for v in (0, 1):
        ep = random_epoch(rng, D, 1)
        dur = DurationParams([rng.uniform(1, 4)], [rng.uniform(0.1, 0.5)], t_max)
        traj.append((TrajectoryModel([ep], dur, InitialEpochDist([1.0])),))
    std = StreamStandardizer(np.zeros(D), np.ones(D))
    return ModelParams(tuple(traj), GatingParams.zeros(1, F), prior, vocab, 60.0, 15.0, std, DEFAULT_STREAMS[:D])


def toy_record(rng, n=5, D=2):
    times = np.round(np.sort(rng.uniform(0, 12, n)), 3)
    return PatientRecord(
        "toy", PROFILE, rng.integers(0, D, n), times, rng.normal(size=n), 0, float(times[-1]) + 1.0
    )


def log_survival(durations, n):
    pmf = truncated_nb_logpmf(float(durations.r[0]), float(durations.p[0]), durations.t_max)
    return float(logsumexp(pmf[n - 1 :])) if n <= durations.t_max else -math.inf


def test_initial_score_is_prior(small_truth):
    s = open_session(small_truth.with_prior(0.09), PROFILE)
    assert s.risk == 0.09
    assert open_session(small_truth, PROFILE, prior_icu=0.3).risk == 0.3


def test_single_phenotype_gamma():
    s = open_session(one_epoch_params(), PROFILE)
    assert s.gamma.tolist() == [1.0]


def test_sessions_start_identical(small_truth):
    a = open_session(small_truth, PROFILE)
    b = open_session(small_truth, PROFILE)
    np.testing.assert_array_equal(a.log_gamma, b.log_gamma)
    assert a.risk == b.risk and a.n_events == b.n_events == 0


def test_unknown_profile_value_rejected(small_truth):
    bad = StaticProfile(55.0, "M", "attic", False, "460-519", "emergency_department")
    with pytest.raises(ValueError):
        open_session(small_truth, bad)


def test_bayes_rule_limits():
    assert posterior_risk(-3.0, -3.0, 0.09) == pytest.approx(0.09, rel=1e-14)
    assert posterior_risk(0.0, -math.inf, 0.5) == 0.0
    assert posterior_risk(-math.inf, 0.0, 0.5) == 1.0
    assert posterior_risk(0.0, -800.0, 0.5) < 1e-300
    assert posterior_risk(-800.0, 0.0, 0.5) == 1.0
    assert posterior_risk(-1.0, 5.0, 0.0) == 0.0
    assert posterior_risk(5.0, -1.0, 1.0) == 1.0


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(1e-6, 1 - 1e-6), st.floats(1e-3, 5))
def test_risk_monotone_in_likelihood_ratio(l0, l1, p1, bump):
    r = posterior_risk(l0, l1, p1)
    assert 0.0 <= r <= 1.0
    r_up = posterior_risk(l0, l1 + bump, p1)
    assert r_up >= r
    if 1e-12 < r < 1 - 1e-12:
        assert r_up > r


def test_five_events_match_dense_bayes_oracle():
    rng = np.random.default_rng(4)
    params = one_epoch_params(4)
    rec = toy_record(rng)
    trace = score_trajectory(params, rec)
    for j in range(rec.n_events):
        sl = slice(0, j + 1)
        n = censored_slots(rec.times[j])
        ll = []
        for v in (0, 1):
            m = params.model(v, 0)
            ll.append(log_survival(m.durations, n)
                      + dense_log_marginal(rec.streams[sl], rec.times[sl], rec.values[sl], m.epochs[0]))
        odds = math.log(0.09) + ll[1] - math.log(0.91) - ll[0]
        expected = 1.0 / (1.0 + math.exp(-odds))
        assert trace.risk[j] == pytest.approx(expected, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("p1, value", [(0.0, 0.0), (1.0, 1.0)])
def test_degenerate_priors(small_truth, small_cohort, p1, value):
    cohort, _ = small_cohort
    for rec in cohort.patients[:4]:
        assert np.all(score_trajectory(small_truth, rec, prior_icu=p1).risk == value)


def test_empty_record_single_point(small_truth):
    rec = PatientRecord.from_events("e", PROFILE, (), 1, 5.0)
    tr = score_trajectory(small_truth, rec)
    assert tr.times.tolist() == [0.0] and tr.risk.tolist() == [small_truth.prior_icu]
    from wardrisk.cohort import Cohort

    batch = score_cohort(small_truth, Cohort((rec,), small_truth.streams))
    assert batch[0].risk.tolist() == [small_truth.prior_icu]


def test_streaming_matches_recomputation(small_truth, small_cohort):
    cohort, _ = small_cohort
    for rec in cohort.patients[:6]:
        tr = score_trajectory(small_truth, rec)
        last_of_time = np.append(np.diff(rec.times) > 0, True)
        for j in np.flatnonzero(last_of_time):
            prefix = rec.truncated(rec.times[j])
            l0 = class_conditional_log_likelihood(prefix, 0, small_truth)
            l1 = class_conditional_log_likelihood(prefix, 1, small_truth)
            assert tr.risk[j] == pytest.approx(posterior_risk(l0, l1, small_truth.prior_icu), abs=1e-9)


def test_stream_and_batch_agree(small_truth, small_cohort):
    cohort, _ = small_cohort
    batch = score_cohort(small_truth, cohort)
    for rec, b in zip(cohort, batch):
        s = score_trajectory(small_truth, rec)
        np.testing.assert_array_equal(s.times, b.times)
        np.testing.assert_allclose(s.risk, b.risk, rtol=1e-9, atol=1e-12)


def test_batch_is_thread_invariant(small_truth, small_cohort):
    cohort, _ = small_cohort
    a = score_cohort(small_truth, cohort, threads=1)
    b = score_cohort(small_truth, cohort, threads=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.risk, y.risk)


def test_deteriorating_stays_score_higher(small_truth, small_cohort):
    cohort, _ = small_cohort
    final = np.array([t.risk[-1] for t in score_cohort(small_truth, cohort)])
    labels = cohort.labels()
    assert np.median(final[labels == 1]) > np.median(final[labels == 0])


def test_gamma_fixed_and_order_enforced(small_truth, small_cohort):
    cohort, _ = small_cohort
    rec = cohort.patients[0]
    s = open_session(small_truth, rec.profile)
    g0 = s.gamma.copy()
    for ev in rec.events[:3]:
        r = observe(s, ev)
        assert 0.0 <= r <= 1.0
    np.testing.assert_array_equal(s.gamma, g0)
    with pytest.raises(ValueError, match="earlier"):
        observe(s, MeasurementEvent(0, rec.times[2] - 0.5, 0.0))
    with pytest.raises(ValueError):
        observe(s, MeasurementEvent(99, rec.times[2], 0.0))


def test_clock_tick(small_truth, small_cohort):
    cohort, _ = small_cohort
    rec = cohort.patients[1]
    s = open_session(small_truth, rec.profile)
    for ev in rec.events[:2]:
        observe(s, ev)
    r = tick(s, s.time)
    assert r == pytest.approx(s.risk)
    later = tick(s, s.time + 5.0)
    assert 0.0 <= later <= 1.0 and s.n_slots == censored_slots(rec.times[1] + 5.0)
    with pytest.raises(ValueError):
        tick(s, 0.0)


def test_traces_csv(tmp_path, small_truth, small_cohort):
    cohort, _ = small_cohort
    traces = score_cohort(small_truth, cohort.subset(range(2)))
    path = tmp_path / "scores.csv"
    write_traces_csv(traces, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["patient_id", "time", "risk"]
    assert len(rows) == 1 + sum(len(t.times) for t in traces)
    assert float(rows[1][2]) == traces[0].risk[0]
