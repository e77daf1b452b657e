"""Synthetic cohorts drawn from the generative model, with ground-truth sidecars.

Each patient uses its own RNG substream ``SeedSequence(seed, spawn_key=(i,))``,
so a cohort is identical however it is split across workers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import _parallel
from .cohort import CATEGORICAL_FIELDS, DEFAULT_STREAMS, Cohort, PatientRecord, StaticProfile, Vocabulary
from .kernel import EpochKernelParams, assemble_covariance
from .likelihood import StreamStandardizer
from .mixture import GatingParams, ModelParams, gating_probabilities
from .trajectory import DEFAULT_T_MAX, DurationParams, InitialEpochDist, TrajectoryModel

__all__ = [
    "ProfileLaw",
    "SimConfig",
    "PatientTruth",
    "sample_patient",
    "sample_cohort",
    "write_truth",
    "read_truth",
    "recovery_params",
    "benchmark_params",
    "paper_scale_params",
    "random_gating",
]


@dataclass(frozen=True)
class ProfileLaw:
    """Independent categorical fields plus a clipped normal age."""

    age_mean: float = 60.0
    age_sd: float = 16.0
    probs: Mapping[str, tuple] | None = None

    def field_probs(self, vocab: Vocabulary, name: str) -> np.ndarray:
        n = len(getattr(vocab, name))
        if self.probs is not None and name in self.probs:
            p = np.asarray(self.probs[name], dtype=float)
            if len(p) != n:
                raise ValueError(f"profile law for {name} has {len(p)} entries, vocabulary has {n}")
            return p / p.sum()
        return np.full(n, 1.0 / n)

    def sample(self, vocab: Vocabulary, rng: np.random.Generator) -> StaticProfile:
        age = float(np.clip(rng.normal(self.age_mean, self.age_sd), 18.0, 100.0))
        values = {}
        for name in CATEGORICAL_FIELDS:
            choices = getattr(vocab, name)
            values[name] = choices[int(rng.choice(len(choices), p=self.field_probs(vocab, name)))]
        return StaticProfile(age=round(age, 1), **values)


@dataclass(frozen=True)
class SimConfig:
    n: int
    seed: int
    params: ModelParams
    interval: tuple[float, float] = (1.0, 4.0)
    asynchronous: bool = True
    profile_law: ProfileLaw = field(default_factory=ProfileLaw)
    id_prefix: str = "p"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        lo, hi = self.interval
        if not 0 < lo <= hi:
            raise ValueError("observation intervals must be positive")


@dataclass(frozen=True)
class PatientTruth:
    patient_id: str
    z: int
    v: int
    start_epoch: int
    boundaries: tuple[int, ...]
    endpoint: int

    def to_dict(self) -> dict:
        return {"patient_id": self.patient_id, "z": self.z, "v": self.v, "start_epoch": self.start_epoch,
                "boundaries": list(self.boundaries), "endpoint": self.endpoint}

    @classmethod
    def from_dict(cls, d) -> "PatientTruth":
        return cls(d["patient_id"], d["z"], d["v"], d["start_epoch"], tuple(d["boundaries"]), d["endpoint"])


def _times(rng, endpoint: float, lo: float, hi: float) -> np.ndarray:
    out = []
    t = rng.uniform(0.0, lo)
    while t < endpoint:
        out.append(t)
        t += rng.uniform(lo, hi)
    return np.round(np.asarray(out, dtype=float), 6)


def sample_patient(config: SimConfig, rng: np.random.Generator, index: int = 0) -> tuple[PatientRecord, PatientTruth]:
    params = config.params
    profile = config.profile_law.sample(params.vocabulary, rng)
    y = params.encode([profile])[0]
    gamma = gating_probabilities(y, params.gating)
    z = int(rng.choice(params.G, p=gamma))
    v = int(rng.random() < params.prior_icu)
    model = params.model(v, z)
    k0 = int(rng.choice(model.K, p=model.initial.probs))
    durations = [model.durations.sample(k, rng) for k in range(k0, model.K)]
    edges = np.cumsum([0] + durations)
    endpoint = int(edges[-1])
    D = params.D
    lo, hi = config.interval
    if config.asynchronous:
        per = [_times(rng, endpoint, lo, hi) for _ in range(D)]
        times = np.concatenate(per)
        streams = np.concatenate([np.full(len(t), d, dtype=np.int64) for d, t in enumerate(per)])
    else:
        t = _times(rng, endpoint, lo, hi)
        times = np.repeat(t, D)
        streams = np.tile(np.arange(D, dtype=np.int64), len(t))
    order = np.lexsort((streams, times))
    times, streams = times[order], streams[order]
    labels = k0 + np.searchsorted(edges[1:-1], times, side="right")
    values = np.empty(len(times))
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        ep = model.epochs[k]
        C = assemble_covariance(streams[idx], times[idx], np.zeros(len(idx), dtype=np.int64), {0: ep})
        L = np.linalg.cholesky(C)
        values[idx] = ep.mean[streams[idx]] + L @ rng.standard_normal(len(idx))
    raw = params.standardizer.inverse(streams, values)
    pid = f"{config.id_prefix}{index:06d}"
    record = PatientRecord(pid, profile, streams, times, np.round(raw, 6), v, float(endpoint))
    truth = PatientTruth(pid, z, v, k0, tuple(int(b) for b in edges[1:-1]), endpoint)
    return record, truth


def sample_cohort(config: SimConfig, threads: int | None = None) -> tuple[Cohort, list[PatientTruth]]:
    def one(i):
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(i,)))
        return sample_patient(config, rng, i)

    def run(bounds):
        return [one(i) for i in range(*bounds)]

    rows = [r for part in _parallel.ordered_map(run, _parallel.chunks(config.n), threads) for r in part]
    p = config.params
    cohort = Cohort(tuple(r for r, _ in rows), p.streams, p.vocabulary)
    return cohort, [t for _, t in rows]


def write_truth(truth, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in truth:
            fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")


def read_truth(path) -> list[PatientTruth]:
    with open(path, encoding="utf-8") as fh:
        return [PatientTruth.from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# scenarios


def random_gating(G: int, vocab: Vocabulary, strength: float, rng: np.random.Generator,
                  balanced: bool = False) -> GatingParams:
    """Gaussian gating weights; ``balanced`` sets each intercept so the mean logit under uniform profiles is 0."""
    F = 2 + sum(vocab.cardinalities().values())
    W = np.zeros((G, F))
    if G > 1:
        W[1:] = strength * rng.standard_normal((G - 1, F))
        W[1:, 0] = 0.0
        if balanced:
            off = 2
            for n in vocab.cardinalities().values():
                W[1:, 0] -= W[1:, off : off + n].mean(axis=1)
                off += n
    return GatingParams(W)


def _assemble(trajectories, gating, prior_icu, streams, vocab=None) -> ModelParams:
    vocab = vocab or Vocabulary()
    std = StreamStandardizer(np.array([s.mean for s in streams]), np.array([s.sd for s in streams]))
    return ModelParams(trajectories, gating, prior_icu, vocab, 60.0, 16.0, std, streams)


def _epoch(mean, rng, D, R, scale=0.5, length_scale=6.0, noise=0.1):
    factor = np.sqrt(scale / max(R, 1)) * rng.uniform(0.4, 1.0, (D, R)) * rng.choice([-1, 1], (D, R))
    return EpochKernelParams(mean, factor, np.full(D, 0.5 * scale), length_scale, np.full(D, noise))


def recovery_params(seed: int = 0, prior_icu: float = 0.5, t_max: int = 40) -> ModelParams:
    """G=2, K=3, D=3 truth with epoch means at least 2 marginal sd apart."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x5EED,)))
    G, K, D, R = 2, 3, 3, 1
    baseline = np.array([0.0, 6.0])  # phenotype level, shared by both outcome classes
    direction = np.array([1.0, -0.6, 0.8])
    trajectories = []
    for v in (0, 1):
        row = []
        for z in range(G):
            step = 2.0 if v == 0 else -2.0
            epochs = []
            for k in range(K):
                mean = (baseline[z] + step * k) * direction
                epochs.append(_epoch(mean, rng, D, R, scale=0.4, length_scale=4.0 + k, noise=0.1))
            dur = DurationParams([4.0, 5.0, 6.0], [0.4, 0.45, 0.5], t_max)
            row.append(TrajectoryModel(epochs, dur, InitialEpochDist([0.6, 0.3, 0.1])))
        trajectories.append(tuple(row))
    gating = random_gating(G, Vocabulary(), 1.0, rng)
    return _assemble(trajectories, gating, prior_icu, DEFAULT_STREAMS[:D])


def benchmark_params(seed: int = 0, prior_icu: float = 0.09, t_max: int = 40) -> ModelParams:
    """G=2, K=3, D=3 cohort where deterioration shows only against the phenotype baseline and late in the stay."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xBE7C,)))
    G, K, D, R = 2, 3, 3, 1
    baseline = np.array([[0.0, 0.0, 0.0], [1.2, -1.0, 0.0]])
    drift = np.array([0.0, 0.5, 1.0])  # per-epoch shift for deteriorating stays
    direction = np.array([[1.0, -0.8, 0.6], [-0.8, 1.0, -0.6]])
    offset = np.array([0.0, 0.0, 0.8])  # small persistent shift, the same in every phenotype
    trajectories = []
    for v in (0, 1):
        row = []
        for z in range(G):
            epochs = []
            for k in range(K):
                mean = baseline[z] + (drift[k] * direction[z] + offset if v == 1 else -0.15 * k * direction[z])
                epochs.append(_epoch(mean, rng, D, R, scale=0.6, length_scale=4.0, noise=0.8))
            dur = DurationParams([3.0, 3.0, 3.0], [0.35, 0.35, 0.35], t_max)
            row.append(TrajectoryModel(epochs, dur, InitialEpochDist([0.7, 0.2, 0.1])))
        trajectories.append(tuple(row))
    gating = random_gating(G, Vocabulary(), 1.5, rng, balanced=True)
    return _assemble(trajectories, gating, prior_icu, DEFAULT_STREAMS[:D])


def paper_scale_params(seed: int = 0, G: int = 4, K: int = 12, rank: int = 3, prior_icu: float = 0.09,
                       t_max: int = DEFAULT_T_MAX) -> ModelParams:
    """Shape of the deployed model: 4 phenotypes, 12 epochs, all 21 streams."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x9A9E,)))
    streams = DEFAULT_STREAMS
    D = len(streams)
    trajectories = []
    for v in (0, 1):
        row = []
        for z in range(G):
            shift = 0.3 * rng.standard_normal(D)
            epochs = []
            for k in range(K):
                trend = (0.05 if v == 1 else -0.02) * k
                mean = shift + trend + 0.1 * rng.standard_normal(D)
                epochs.append(_epoch(mean, rng, D, rank, scale=0.5, length_scale=6.0, noise=0.2))
            dur = DurationParams.from_means(np.full(K, 8.0), 2.0, t_max)
            row.append(TrajectoryModel(epochs, dur, InitialEpochDist(np.full(K, 1.0 / K))))
        trajectories.append(tuple(row))
    return _assemble(trajectories, random_gating(G, Vocabulary(), 0.5, rng), prior_icu, streams)
