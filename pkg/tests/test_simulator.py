import time

import numpy as np
import pytest

from conftest import random_epoch
from wardrisk.cohort import DEFAULT_STREAMS, Vocabulary, dumps_cohort
from wardrisk.kernel import assemble_covariance
from wardrisk.likelihood import StreamStandardizer
from wardrisk.mixture import GatingParams, ModelParams
from wardrisk.simulator import (
    ProfileLaw,
    SimConfig,
    benchmark_params,
    paper_scale_params,
    read_truth,
    recovery_params,
    sample_cohort,
    sample_patient,
    write_truth,
)
from wardrisk.trajectory import DurationParams, InitialEpochDist, TrajectoryModel


def unit_params(epochs, pi, D, prior=0.5, t_max=1):
    """Identity standardization, no gating, every epoch lasting exactly ``t_max`` hours when t_max == 1."""
    K = len(epochs)
    vocab = Vocabulary()
    F = 2 + sum(vocab.cardinalities().values())
    model = TrajectoryModel(epochs, DurationParams(np.full(K, 2.0), np.full(K, 0.5), t_max), InitialEpochDist(pi))
    std = StreamStandardizer(np.zeros(D), np.ones(D))
    return ModelParams(((model,), (model,)), GatingParams.zeros(1, F), prior, vocab, 60.0, 16.0, std,
                       DEFAULT_STREAMS[:D])


def test_same_seed_same_bytes():
    cfg = SimConfig(40, 9, benchmark_params(1))
    a, ta = sample_cohort(cfg)
    b, tb = sample_cohort(cfg)
    assert dumps_cohort(a) == dumps_cohort(b)
    assert ta == tb
    c, _ = sample_cohort(SimConfig(40, 10, benchmark_params(1)))
    assert dumps_cohort(c) != dumps_cohort(a)


def test_thread_count_does_not_matter():
    cfg = SimConfig(600, 2, benchmark_params(0))
    one, _ = sample_cohort(cfg, threads=1)
    four, _ = sample_cohort(cfg, threads=4)
    assert dumps_cohort(one) == dumps_cohort(four)


def test_prefix_of_a_larger_cohort():
    small, _ = sample_cohort(SimConfig(10, 5, recovery_params(0)))
    large, _ = sample_cohort(SimConfig(300, 5, recovery_params(0)))
    assert small.patients == large.patients[:10]


def test_certain_icu_prior():
    cohort, truth = sample_cohort(SimConfig(50, 0, recovery_params(0).with_prior(1 - 1e-12)))
    assert cohort.labels().sum() == 50
    assert all(t.v == 1 for t in truth)


def test_concentrated_start_gives_single_epoch():
    rng = np.random.default_rng(0)
    eps = [random_epoch(rng, 2, 1) for _ in range(3)]
    params = unit_params(eps, [0.0, 0.0, 1.0], 2, t_max=6)
    _, truth = sample_cohort(SimConfig(30, 1, params))
    assert all(t.start_epoch == 2 and t.boundaries == () for t in truth)


def test_icu_fraction_concentrates():
    rng = np.random.default_rng(1)
    params = unit_params([random_epoch(rng, 1, 1)], [1.0], 1, prior=0.09)
    cohort, _ = sample_cohort(SimConfig(10_000, 3, params, interval=(0.5, 0.5)))
    assert abs(cohort.labels().mean() - 0.09) <= 0.01


def test_epoch_covariance_matches_kernel_monte_carlo():
    rng = np.random.default_rng(2)
    D = 2
    ep = random_epoch(rng, D, 1)
    params = unit_params([ep], [1.0], D)
    n = 10_000
    cohort, _ = sample_cohort(SimConfig(n, 4, params, interval=(0.25, 0.25), asynchronous=False))
    # every stay lasts one hour with four panel draws spaced 0.25 h apart
    X = np.vstack([r.values for r in cohort])
    rec = cohort.patients[0]
    rel = rec.times - rec.times[0]
    C = assemble_covariance(rec.streams, rel, np.zeros(len(rel), dtype=np.int64), {0: ep})
    mean = ep.mean[rec.streams]
    se_mean = np.sqrt(np.diag(C) / n)
    assert np.all(np.abs(X.mean(axis=0) - mean) <= 3 * se_mean)
    S = np.cov(X, rowvar=False)
    se_cov = np.sqrt((np.outer(np.diag(C), np.diag(C)) + C**2) / n)
    assert np.all(np.abs(S - C) <= 3 * se_cov)


def test_cross_epoch_samples_uncorrelated():
    rng = np.random.default_rng(3)
    ep = random_epoch(rng, 1, 1, ls=(5.0, 8.0))
    params = unit_params([ep, ep], [1.0, 0.0], 1)
    n = 5000
    cohort, truth = sample_cohort(SimConfig(n, 6, params, interval=(0.5, 0.5)))
    assert all(t.boundaries == (1,) for t in truth)
    last0 = np.array([r.values[r.times < 1.0][-1] for r in cohort])
    first1 = np.array([r.values[r.times >= 1.0][0] for r in cohort])
    within = np.array([r.values[r.times < 1.0][0] for r in cohort])
    assert abs(np.corrcoef(last0, first1)[0, 1]) < 4 / np.sqrt(n)
    # same-epoch neighbours are strongly correlated under a long length scale
    assert np.corrcoef(within, last0)[0, 1] > 0.2


def test_truth_is_consistent_with_record():
    p = benchmark_params(0)
    rng = np.random.default_rng(np.random.SeedSequence(0, spawn_key=(0,)))
    rec, truth = sample_patient(SimConfig(1, 0, p), rng, 0)
    assert rec.outcome == truth.v
    assert rec.endpoint_time == truth.endpoint
    assert len(truth.boundaries) == p.K - 1 - truth.start_epoch
    assert np.all(np.diff(truth.boundaries) > 0)


def test_truth_sidecar_roundtrip(tmp_path):
    _, truth = sample_cohort(SimConfig(20, 1, recovery_params(0)))
    path = tmp_path / "truth.ndjson"
    write_truth(truth, path)
    assert read_truth(path) == truth


def test_profile_law_respects_probabilities():
    vocab = Vocabulary()
    law = ProfileLaw(probs={"gender": (1.0, 0.0)})
    rng = np.random.default_rng(0)
    assert {law.sample(vocab, rng).gender for _ in range(50)} == {"F"}
    with pytest.raises(ValueError):
        ProfileLaw(probs={"gender": (1.0,)}).sample(vocab, rng)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(0, 0, recovery_params(0))
    with pytest.raises(ValueError):
        SimConfig(5, 0, recovery_params(0), interval=(0.0, 1.0))


def test_paper_scale_shape():
    p = paper_scale_params(0)
    assert (p.G, p.K, p.D, p.rank) == (4, 12, 21, 3)
    assert p.prior_icu == 0.09


def test_paper_sized_cohort_in_bounded_time():
    t0 = time.perf_counter()
    cohort, _ = sample_cohort(SimConfig(6094, 0, benchmark_params(0)))
    assert len(cohort) == 6094
    assert time.perf_counter() - t0 < 120.0
