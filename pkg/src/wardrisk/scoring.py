"""Streaming risk score: posterior probability of deterioration after every measurement.

A :class:`ScoringSession` keeps, per (outcome, phenotype, epoch, start hour),
a Cholesky factor of the observations since that hour and extends it by one
row per event, so an update costs O(window^2) rather than a refit.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import logsumexp

from .cohort import Cohort, MeasurementEvent, PatientRecord, StaticProfile
from .likelihood import JITTER_LADDER, NumericalError
from .mixture import ModelParams, gating_log_probabilities
from .trajectory import SlotBatch, TrajectoryModel, batch_online_log_likelihood, censored_slots, model_cumulatives

__all__ = [
    "ScoreTrace",
    "ScoringSession",
    "open_session",
    "observe",
    "tick",
    "score_trajectory",
    "score_cohort",
    "posterior_risk",
    "write_traces_csv",
]

LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class ScoreTrace:
    """Risk after each event of one patient (a single ``(0, prior)`` point when there are no events)."""

    patient_id: str
    times: np.ndarray
    risk: np.ndarray
    label: int | None = None
    endpoint_time: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "risk", np.asarray(self.risk, dtype=float))
        if self.times.shape != self.risk.shape or len(self.times) == 0:
            raise ValueError("a trace needs matching, non-empty time and risk arrays")

    @property
    def max_risk(self) -> float:
        return float(self.risk.max())


def posterior_risk(log_lik_0: float, log_lik_1: float, prior_icu: float) -> float:
    """``p1 L1 / (p0 L0 + p1 L1)`` evaluated in log space."""
    if prior_icu <= 0.0:
        return 0.0
    if prior_icu >= 1.0:
        return 1.0
    a = math.log1p(-prior_icu) + log_lik_0
    b = math.log(prior_icu) + log_lik_1
    if a == -math.inf and b == -math.inf:
        raise NumericalError("both hypotheses have zero likelihood")
    if b == -math.inf:
        return 0.0
    if a == -math.inf:
        return 1.0
    # logistic of the log odds
    x = b - a
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


@njit(cache=True, nogil=True)
def _extend(L, z, m, stream, time, value, cov, inv2l2, noise, mean, jitter):
    """Append observation ``m`` (the newest) to a window factor; returns its conditional log density or NaN."""
    u = stream[m]
    t = time[m]
    for i in range(m):
        dt = t - time[i]
        s = cov[u, stream[i]] * math.exp(-dt * dt * inv2l2)
        for j in range(i):
            s -= L[i, j] * L[m, j]
        L[m, i] = s / L[i, i]
    d2 = cov[u, u] + noise[u] + jitter
    for j in range(m):
        d2 -= L[m, j] * L[m, j]
    if not (d2 > 0.0) or not math.isfinite(d2):
        return np.nan
    d = math.sqrt(d2)
    L[m, m] = d
    r = value[m] - mean[u]
    for j in range(m):
        r -= L[m, j] * z[j]
    z[m] = r / d
    return -0.5 * (z[m] * z[m] + 2.0 * math.log(d) + LOG2PI)


class _Window:
    """Growing factor for one (epoch, start hour)."""

    __slots__ = ("start", "first", "m", "L", "z", "cum", "rung")

    def __init__(self, start: int, first: int):
        self.start = start
        self.first = first  # index of the first buffered event in the window
        self.m = 0
        self.L = np.empty((8, 8))
        self.z = np.empty(8)
        self.cum = [0.0]
        self.rung = 0

    def _grow(self):
        cap = 2 * self.L.shape[0]
        L = np.empty((cap, cap))
        L[: self.m, : self.m] = self.L[: self.m, : self.m]
        z = np.empty(cap)
        z[: self.m] = self.z[: self.m]
        self.L, self.z = L, z


class _Track:
    """Forward state of one trajectory model for the current patient."""

    def __init__(self, model: TrajectoryModel):
        self.model = model
        self.K = model.K
        self.t_max = model.t_max
        self.logpmf = model.durations.log_pmf_table
        self.logsurv = model.durations.log_surv_table
        self.logpi = model.initial.log_probs()
        self.kargs = [(np.ascontiguousarray(e.task_cov), 0.5 / e.length_scale**2, np.ascontiguousarray(e.noise),
                       np.ascontiguousarray(e.mean)) for e in model.epochs]
        self.F: list[np.ndarray] = []  # forward column per slot
        self.idx: list[int] = []  # events before each slot
        self.windows: dict[int, list[_Window]] = {}  # start slot -> per-epoch windows

    def _seg(self, k: int, s0: int, s: int) -> float:
        w = self.windows[s0][k]
        return w.cum[self.idx[s] - w.first]

    def advance(self, n: int, n_events: int) -> None:
        """Open slots up to ``n - 1``; every buffered event precedes them."""
        K, t_max = self.K, self.t_max
        for s in range(len(self.F), n):
            self.idx.append(n_events)
            col = np.full(K, -np.inf)
            if s == 0:
                col[:] = self.logpi
            else:
                for k in range(1, K):
                    terms = [self.F[s - d][k - 1] + self.logpmf[k - 1, d - 1] + self._seg(k - 1, s - d, s)
                             for d in range(1, min(s, t_max) + 1) if self.F[s - d][k - 1] > -np.inf]
                    if terms:
                        col[k] = logsumexp(terms)
            self.F.append(col)
            self.windows[s] = [_Window(s, n_events) for _ in range(K)]
        for s in [s for s in self.windows if s < n - t_max]:
            del self.windows[s]

    def append(self, buf, j: int) -> None:
        """Extend every live window with buffered event ``j``."""
        stream, time, value = buf
        for s, row in self.windows.items():
            for k, w in enumerate(row):
                self._extend_window(w, k, stream, time, value, j)

    def _extend_window(self, w: _Window, k: int, stream, time, value, j: int) -> None:
        if w.m + 1 > w.L.shape[0]:
            w._grow()
        cov, inv2l2, noise, mean = self.kargs[k]
        a = w.first
        val = _extend(w.L, w.z, w.m, stream[a : j + 1], time[a : j + 1], value[a : j + 1], cov, inv2l2, noise, mean,
                      JITTER_LADDER[w.rung])
        if math.isnan(val):
            self._refactor(w, k, stream, time, value, j)
            return
        w.m += 1
        w.cum.append(w.cum[-1] + val)

    def _refactor(self, w: _Window, k: int, stream, time, value, j: int) -> None:
        cov, inv2l2, noise, mean = self.kargs[k]
        a = w.first
        m_new = j + 1 - a
        for rung in range(w.rung + 1, len(JITTER_LADDER)):
            w.rung = rung
            w.m = 0
            w.cum = [0.0]
            while w.L.shape[0] < m_new:
                w._grow()
            ok = True
            for i in range(m_new):
                val = _extend(w.L, w.z, i, stream[a : a + i + 1], time[a : a + i + 1], value[a : a + i + 1], cov,
                              inv2l2, noise, mean, JITTER_LADDER[rung])
                if math.isnan(val):
                    ok = False
                    break
                w.m += 1
                w.cum.append(w.cum[-1] + val)
            if ok:
                return
        raise NumericalError(f"window covariance not positive definite after jitter {JITTER_LADDER[-1]}")

    def log_lik(self, n: int) -> float:
        """Censored log likelihood with the horizon at ``n`` slots and all buffered events."""
        terms = []
        for s in range(max(0, n - self.t_max), n):
            col = self.F[s]
            for k in range(self.K):
                if col[k] > -np.inf:
                    w = self.windows[s][k]
                    terms.append(col[k] + self.logsurv[k, n - s - 1] + w.cum[w.m])
        return float(logsumexp(terms)) if terms else -math.inf


@dataclass(eq=False)
class ScoringSession:
    """Streaming state for one patient; not shared between threads."""

    params: ModelParams
    profile: StaticProfile
    log_gamma: np.ndarray
    prior_icu: float
    tracks: list = field(repr=False)
    streams: list = field(default_factory=list)
    times: list = field(default_factory=list)
    values: list = field(default_factory=list)
    risk: float = 0.0
    time: float = 0.0
    n_slots: int = 0

    @property
    def gamma(self) -> np.ndarray:
        return np.exp(self.log_gamma)

    @property
    def n_events(self) -> int:
        return len(self.times)

    def log_likelihoods(self) -> tuple[float, float]:
        """Class-conditional log likelihoods (v = 0, v = 1) at the current horizon."""
        G = self.params.G
        out = []
        for v in (0, 1):
            ll = np.array([self.tracks[v * G + z].log_lik(self.n_slots) for z in range(G)])
            out.append(float(logsumexp(self.log_gamma + ll)))
        return out[0], out[1]


def open_session(params: ModelParams, profile: StaticProfile, prior_icu: float | None = None) -> ScoringSession:
    """Start a patient at admission; gating is fixed here. ``prior_icu`` overrides the trained prior."""
    profile.check(params.vocabulary)
    y = params.encode([profile])[0]
    p1 = params.prior_icu if prior_icu is None else float(prior_icu)
    if not 0.0 <= p1 <= 1.0:
        raise ValueError("prior_icu must lie in [0, 1]")
    tracks = [_Track(params.model(v, z)) for v in (0, 1) for z in range(params.G)]
    return ScoringSession(params, profile, gating_log_probabilities(y, params.gating), p1, tracks, risk=p1)


def _rescore(session: ScoringSession) -> float:
    l0, l1 = session.log_likelihoods()
    if not (math.isfinite(l0) or math.isfinite(l1)):
        raise NumericalError(f"non-finite likelihood at t={session.time} (horizon {session.n_slots} h)")
    session.risk = posterior_risk(l0, l1, session.prior_icu)
    return session.risk


def observe(session: ScoringSession, event: MeasurementEvent) -> float:
    """Add one measurement (raw units) and return the updated risk."""
    stream, t, value = int(event[0]), float(event[1]), float(event[2])
    if not 0 <= stream < session.params.D:
        raise ValueError(f"stream {stream} outside 0..{session.params.D - 1}")
    if not (math.isfinite(t) and math.isfinite(value)):
        raise ValueError("event time and value must be finite")
    if t < 0 or (session.times and t < session.times[-1]):
        raise ValueError(f"event at t={t} is earlier than the last event")
    session.streams.append(stream)
    session.times.append(t)
    session.values.append(float(session.params.standardizer.transform([stream], [value])[0]))
    j = len(session.times) - 1
    n = censored_slots(t)
    buf = (np.asarray(session.streams, dtype=np.int64), np.asarray(session.times), np.asarray(session.values))
    for tr in session.tracks:
        tr.advance(n, j)
        tr.append(buf, j)
    session.n_slots = n
    session.time = t
    return _rescore(session)


def tick(session: ScoringSession, t: float) -> float:
    """Re-evaluate at clock time ``t`` with no new measurement (the in-progress epoch keeps ageing)."""
    if t < session.time:
        raise ValueError("clock cannot run backwards")
    n = censored_slots(t)
    for tr in session.tracks:
        tr.advance(n, session.n_events)
    session.n_slots = max(session.n_slots, n)
    session.time = t
    return _rescore(session)


def score_trajectory(params: ModelParams, record: PatientRecord, prior_icu: float | None = None) -> ScoreTrace:
    """Replay every event of ``record`` through a fresh session."""
    session = open_session(params, record.profile, prior_icu)
    if record.n_events == 0:
        return ScoreTrace(record.id, [0.0], [session.risk], record.outcome, record.endpoint_time)
    risk = [observe(session, ev) for ev in record.events]
    return ScoreTrace(record.id, record.times.copy(), risk, record.outcome, record.endpoint_time)


def score_cohort(params: ModelParams, cohort: Cohort, threads: int | None = None,
                 prior_icu: float | None = None) -> list[ScoreTrace]:
    """Risk after every event for every patient, computed in one batched pass per trajectory model.

    Agrees with :func:`score_trajectory` up to floating-point summation order.
    """
    p1 = params.prior_icu if prior_icu is None else float(prior_icu)
    recs = list(cohort.patients)
    obs = [params.standardizer.observations(r) for r in recs]
    n = [censored_slots(r.times[-1]) if r.n_events else 1 for r in recs]
    batch = SlotBatch.build(obs, n, params.t_max)
    lg = gating_log_probabilities(params.encode([r.profile for r in recs]), params.gating) if recs else np.zeros((0, params.G))
    per_event_lg = np.repeat(lg, np.diff(batch.pat_obs_off), axis=0)
    class_ll = []
    for v in (0, 1):
        terms = np.empty((len(batch.bank.time), params.G))
        for z in range(params.G):
            m = params.model(v, z)
            cum = model_cumulatives(batch, m, threads=threads)
            terms[:, z] = batch_online_log_likelihood(batch, m, cum, threads=threads)
        class_ll.append(logsumexp(per_event_lg + terms, axis=1) if len(terms) else np.zeros(0))
    traces = []
    for i, r in enumerate(recs):
        a, b = batch.pat_obs_off[i], batch.pat_obs_off[i + 1]
        if a == b:
            traces.append(ScoreTrace(r.id, [0.0], [p1], r.outcome, r.endpoint_time))
            continue
        risk = [posterior_risk(l0, l1, p1) for l0, l1 in zip(class_ll[0][a:b], class_ll[1][a:b])]
        traces.append(ScoreTrace(r.id, r.times.copy(), risk, r.outcome, r.endpoint_time))
    return traces


def write_traces_csv(traces, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "time", "risk"])
        for tr in traces:
            for t, r in zip(tr.times, tr.risk):
                w.writerow([tr.patient_id, repr(float(t)), repr(float(r))])
