"""Epoch process: truncated negative-binomial durations, initial-epoch law and the segmentation DP.

Time is cut into hour slots ``[h, h + 1)``. An epoch occupies a run of whole
slots; an observation at exactly an integer hour belongs to the epoch that
starts there. Epochs are indexed from 0, so a model with ``K`` epochs runs
``k0, k0 + 1, ..., K - 1``.

Two horizons are supported:

* censored (online) -- data seen up to time ``t`` occupies slots
  ``0..floor(t)``; the epoch in progress contributes ``P(duration >= elapsed)``;
* end-aligned (training) -- the stay ends with epoch ``K - 1`` completing
  exactly at the last slot boundary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np
from numba import njit
from scipy.special import logsumexp
from scipy.stats import nbinom

from . import _parallel
from .kernel import EpochKernelParams
from .likelihood import NumericalError, Observations, WindowBank, segment_log_marginal, window_cumulative

__all__ = [
    "DEFAULT_T_MAX",
    "DurationParams",
    "InitialEpochDist",
    "TrajectoryModel",
    "Segmentation",
    "SlotBatch",
    "duration_log_pmf",
    "nb_log_tables",
    "duration_log_survival",
    "censored_slots",
    "aligned_slots",
    "trajectory_log_likelihood",
    "enumerate_segmentations",
    "count_segmentations",
    "enumeration_log_likelihood",
    "segment_posteriors",
    "SegmentPosteriors",
]

DEFAULT_T_MAX = 168
MAX_ENUMERATION = 10**6
NEG_INF = -np.inf


@dataclass(frozen=True, eq=False)
class DurationParams:
    """Per-epoch negative binomial ``(r, p)``; duration ``T = 1 + X`` with ``X ~ NB(r, p)``, truncated to ``1..t_max``."""

    r: np.ndarray
    p: np.ndarray
    t_max: int = DEFAULT_T_MAX

    def __post_init__(self):
        r = np.array(self.r, dtype=float).reshape(-1)
        p = np.array(self.p, dtype=float).reshape(-1)
        if r.shape != p.shape:
            raise ValueError("r and p differ in length")
        if np.any(~(r > 0)) or np.any(~((p > 0) & (p < 1))):
            raise ValueError("need r > 0 and 0 < p < 1")
        if int(self.t_max) < 1:
            raise ValueError("t_max must be >= 1")
        r.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "t_max", int(self.t_max))
        logpmf, logsurv = nb_log_tables(r, p, self.t_max)
        logpmf.flags.writeable = False
        logsurv.flags.writeable = False
        object.__setattr__(self, "log_pmf_table", logpmf)
        object.__setattr__(self, "log_surv_table", logsurv)

    @property
    def K(self) -> int:
        return len(self.r)

    def means(self) -> np.ndarray:
        T = np.arange(1, self.t_max + 1)
        return np.exp(self.log_pmf_table) @ T

    def sample(self, k: int, rng: np.random.Generator) -> int:
        cdf = np.cumsum(np.exp(self.log_pmf_table[k]))
        return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), self.t_max - 1)) + 1

    @classmethod
    def from_means(cls, means, r=2.0, t_max: int = DEFAULT_T_MAX) -> "DurationParams":
        """Untruncated mean ``1 + r (1 - p) / p`` matched to ``means``."""
        means = np.maximum(np.asarray(means, dtype=float), 1.0 + 1e-6)
        r = np.broadcast_to(np.asarray(r, dtype=float), means.shape)
        p = r / (r + means - 1.0)
        return cls(r, np.clip(p, 1e-6, 1 - 1e-6), t_max)

    def to_dict(self) -> dict:
        return {"r": self.r.tolist(), "p": self.p.tolist(), "t_max": self.t_max}

    @classmethod
    def from_dict(cls, d) -> "DurationParams":
        return cls(d["r"], d["p"], d["t_max"])


def nb_log_tables(r, p, t_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Truncated log pmf and log survival, each of shape (len(r), t_max); column j is duration j + 1."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    T = np.arange(t_max)
    raw = nbinom.logpmf(T[None, :], r[:, None], p[:, None])
    logpmf = raw - logsumexp(raw, axis=1, keepdims=True)
    logsurv = np.logaddexp.accumulate(logpmf[:, ::-1], axis=1)[:, ::-1].copy()
    logsurv[:, 0] = 0.0
    return logpmf, logsurv


def duration_log_pmf(T: int, k: int, params: DurationParams) -> float:
    if not (isinstance(T, (int, np.integer)) and 1 <= T <= params.t_max):
        raise ValueError(f"duration {T!r} outside support 1..{params.t_max}")
    return float(params.log_pmf_table[k, T - 1])


def duration_log_survival(T_elapsed: int, k: int, params: DurationParams) -> float:
    """log P(duration >= T_elapsed)."""
    if not (isinstance(T_elapsed, (int, np.integer)) and 1 <= T_elapsed <= params.t_max):
        raise ValueError(f"elapsed duration {T_elapsed!r} outside 1..{params.t_max}")
    return float(params.log_surv_table[k, T_elapsed - 1])


@dataclass(frozen=True, eq=False)
class InitialEpochDist:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float).reshape(-1)
        if len(probs) == 0 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("initial epoch probabilities must lie on the simplex")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @property
    def K(self) -> int:
        return len(self.probs)

    def log_probs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs)

    @classmethod
    def normalized(cls, weights) -> "InitialEpochDist":
        w = np.asarray(weights, dtype=float)
        w = w / w.sum()
        # re-normalise once more so the sum is within an ulp of 1
        return cls(w / w.sum())


@dataclass(frozen=True, eq=False)
class TrajectoryModel:
    epochs: tuple[EpochKernelParams, ...]
    durations: DurationParams
    initial: InitialEpochDist

    def __post_init__(self):
        object.__setattr__(self, "epochs", tuple(self.epochs))
        K = len(self.epochs)
        if K < 1:
            raise ValueError("need at least one epoch")
        if self.durations.K != K or self.initial.K != K:
            raise ValueError("epoch, duration and initial-epoch counts disagree")
        if len({e.D for e in self.epochs}) != 1:
            raise ValueError("epochs disagree on the number of streams")

    @property
    def K(self) -> int:
        return len(self.epochs)

    @property
    def D(self) -> int:
        return self.epochs[0].D

    @property
    def t_max(self) -> int:
        return self.durations.t_max

    def to_dict(self) -> dict:
        return {
            "epochs": [e.to_dict() for e in self.epochs],
            "durations": self.durations.to_dict(),
            "initial": self.initial.probs.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "TrajectoryModel":
        return cls(
            tuple(EpochKernelParams.from_dict(e) for e in d["epochs"]),
            DurationParams.from_dict(d["durations"]),
            InitialEpochDist(d["initial"]),
        )


# ---------------------------------------------------------------------------
# slot bookkeeping


def censored_slots(t: float) -> int:
    """Number of hour slots touched by data seen up to time ``t``."""
    return int(math.floor(t)) + 1


def aligned_slots(endpoint: float, times=None) -> int:
    """Slot count of a completed stay: the epoch sequence ends at this hour boundary."""
    n = max(1, int(math.ceil(endpoint)))
    if times is not None and len(times):
        n = max(n, int(math.floor(times[-1])) + 1)
    return n


@dataclass(frozen=True, eq=False)
class SlotBatch:
    """Several patients' observations with one window per (patient, start slot)."""

    bank: WindowBank
    pat_obs_off: np.ndarray
    n_slots: np.ndarray
    slot_idx: np.ndarray
    slot_off: np.ndarray
    win_off: np.ndarray
    t_max: int

    @property
    def n_patients(self) -> int:
        return len(self.n_slots)

    @classmethod
    def build(cls, obs_list: Sequence[Observations], n_slots, t_max: int) -> "SlotBatch":
        n_slots = np.asarray(n_slots, dtype=np.int64)
        P = len(obs_list)
        lens = np.array([len(o) for o in obs_list], dtype=np.int64)
        pat_obs_off = np.zeros(P + 1, dtype=np.int64)
        np.cumsum(lens, out=pat_obs_off[1:])
        slot_off = np.zeros(P + 1, dtype=np.int64)
        np.cumsum(n_slots + 1, out=slot_off[1:])
        win_off = np.zeros(P + 1, dtype=np.int64)
        np.cumsum(n_slots, out=win_off[1:])
        slot_idx = np.empty(int(slot_off[-1]), dtype=np.int64)
        win_start = np.empty(int(win_off[-1]), dtype=np.int64)
        win_len = np.empty(int(win_off[-1]), dtype=np.int64)
        for p, o in enumerate(obs_list):
            n = int(n_slots[p])
            if len(o) and o.times[-1] >= n:
                raise ValueError("observation beyond the slot horizon")
            idx = np.searchsorted(o.times, np.arange(n + 1), side="left")
            slot_idx[slot_off[p] : slot_off[p + 1]] = idx
            s = np.arange(n)
            end = idx[np.minimum(s + t_max, n)]
            win_start[win_off[p] : win_off[p + 1]] = pat_obs_off[p] + idx[:n]
            win_len[win_off[p] : win_off[p + 1]] = end - idx[:n]
        if P:
            stream = np.concatenate([o.streams for o in obs_list])
            time = np.concatenate([o.times for o in obs_list])
            value = np.concatenate([o.values for o in obs_list])
        else:
            stream, time, value = np.zeros(0, np.int64), np.zeros(0), np.zeros(0)
        bank = WindowBank(stream, time, value, win_start, win_len)
        return cls(bank, pat_obs_off, n_slots, slot_idx, slot_off, win_off, int(t_max))

    def patient_windows(self, patients) -> np.ndarray:
        patients = np.asarray(patients, dtype=np.int64)
        if len(patients) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(self.win_off[p], self.win_off[p + 1]) for p in patients]).astype(np.int64)


def model_cumulatives(batch: SlotBatch, model: TrajectoryModel, wins=None, threads=None) -> np.ndarray:
    """Per-epoch prefix log marginals of every window, shape (K, cum_size)."""
    return np.stack([window_cumulative(batch.bank, ep, wins, threads) for ep in model.epochs])


# ---------------------------------------------------------------------------
# dynamic program


@njit(cache=True, nogil=True)
def _lae(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True, nogil=True)
def _tables(p, n_slots, slot_idx, slot_off, win_off, cum_off, cum, logpmf, logsurv, logpi, end_aligned, backward):
    K = logpi.shape[0]
    t_max = logpmf.shape[1]
    n = n_slots[p]
    so = slot_off[p]
    wo = win_off[p]
    F = np.full((K, n + 1), -np.inf)
    for k in range(K):
        F[k, 0] = logpi[k]
    for s in range(1, n):
        for k in range(1, K):
            acc = -np.inf
            for d in range(1, min(s, t_max) + 1):
                s0 = s - d
                f = F[k - 1, s0]
                if f == -np.inf:
                    continue
                seg = cum[k - 1, cum_off[wo + s0] + slot_idx[so + s] - slot_idx[so + s0]]
                acc = _lae(acc, f + logpmf[k - 1, d - 1] + seg)
            F[k, s] = acc
    term = np.full((K, n), -np.inf)
    for s in range(n):
        d = n - s
        if d > t_max:
            continue
        pos = cum_off[wo + s] + slot_idx[so + n] - slot_idx[so + s]
        for k in range(K):
            if end_aligned:
                if k == K - 1:
                    term[k, s] = logpmf[k, d - 1] + cum[k, pos]
            else:
                term[k, s] = logsurv[k, d - 1] + cum[k, pos]
    total = -np.inf
    for k in range(K):
        for s in range(n):
            if F[k, s] > -np.inf and term[k, s] > -np.inf:
                total = _lae(total, F[k, s] + term[k, s])
    B = np.full((K, n + 1), -np.inf)
    if backward:
        for s in range(n - 1, -1, -1):
            for k in range(K - 1, -1, -1):
                acc = term[k, s]
                if k < K - 1:
                    for d in range(1, min(t_max, n - 1 - s) + 1):
                        b = B[k + 1, s + d]
                        if b == -np.inf:
                            continue
                        seg = cum[k, cum_off[wo + s] + slot_idx[so + s + d] - slot_idx[so + s]]
                        acc = _lae(acc, logpmf[k, d - 1] + seg + b)
                B[k, s] = acc
    return F, term, B, total


@njit(cache=True, nogil=True)
def _dp_kernel(pats, n_slots, slot_idx, slot_off, win_off, win_len, cum_off, cum, logpmf, logsurv, logpi,
               end_aligned, want_stats, weight, prune, ll, start_post, pmf_hist, surv_hist, cw):
    K = logpi.shape[0]
    t_max = logpmf.shape[1]
    for ip in range(pats.shape[0]):
        p = pats[ip]
        F, term, B, total = _tables(p, n_slots, slot_idx, slot_off, win_off, cum_off, cum, logpmf, logsurv, logpi,
                                    end_aligned, want_stats)
        ll[p] = total
        if not want_stats:
            continue
        r = weight[p]
        if total == -np.inf or not (r > prune):
            continue
        n = n_slots[p]
        so = slot_off[p]
        wo = win_off[p]
        for k in range(K):
            if logpi[k] > -np.inf and B[k, 0] > -np.inf:
                start_post[p, k] = r * math.exp(logpi[k] + B[k, 0] - total)
        for k in range(K):
            for s in range(n):
                f = F[k, s]
                if f == -np.inf:
                    continue
                w = wo + s
                off = cum_off[w]
                base = slot_idx[so + s]
                m = win_len[w]
                wc = np.zeros(m + 1)
                if term[k, s] > -np.inf:
                    q = r * math.exp(f + term[k, s] - total)
                    wc[slot_idx[so + n] - base] += q
                    if end_aligned:
                        pmf_hist[p, k, n - s - 1] += q
                    else:
                        surv_hist[p, k, n - s - 1] += q
                if k < K - 1:
                    for d in range(1, min(t_max, n - 1 - s) + 1):
                        b = B[k + 1, s + d]
                        if b == -np.inf:
                            continue
                        cnt = slot_idx[so + s + d] - base
                        q = r * math.exp(f + logpmf[k, d - 1] + cum[k, off + cnt] + b - total)
                        wc[cnt] += q
                        pmf_hist[p, k, d - 1] += q
                acc = 0.0
                for i in range(m - 1, -1, -1):
                    acc += wc[i + 1]
                    cw[k, off + i] = acc


@njit(cache=True, nogil=True)
def _online_kernel(pats, n_slots, slot_idx, slot_off, win_off, cum_off, cum, logpmf, logsurv, logpi,
                   pat_obs_off, obs_time, out):
    K = logpi.shape[0]
    t_max = logpmf.shape[1]
    for ip in range(pats.shape[0]):
        p = pats[ip]
        F, term, B, total = _tables(p, n_slots, slot_idx, slot_off, win_off, cum_off, cum, logpmf, logsurv, logpi,
                                    False, False)
        so = slot_off[p]
        wo = win_off[p]
        for j in range(pat_obs_off[p + 1] - pat_obs_off[p]):
            nj = int(math.floor(obs_time[pat_obs_off[p] + j])) + 1
            acc = -np.inf
            for s in range(max(0, nj - t_max), nj):
                cnt = j + 1 - slot_idx[so + s]
                pos = cum_off[wo + s] + cnt
                for k in range(K):
                    if F[k, s] > -np.inf:
                        acc = _lae(acc, F[k, s] + logsurv[k, nj - s - 1] + cum[k, pos])
            out[pat_obs_off[p] + j] = acc


def _dp_args(batch: SlotBatch):
    return batch.n_slots, batch.slot_idx, batch.slot_off, batch.win_off


def _model_tables(model: TrajectoryModel):
    return (
        np.ascontiguousarray(model.durations.log_pmf_table),
        np.ascontiguousarray(model.durations.log_surv_table),
        np.ascontiguousarray(model.initial.log_probs()),
    )


def batch_log_likelihood(batch: SlotBatch, model: TrajectoryModel, cum: np.ndarray, end_aligned: bool,
                         patients=None, threads=None) -> np.ndarray:
    """Log likelihood per patient (``-inf`` where no segmentation is feasible)."""
    if model.t_max != batch.t_max:
        raise ValueError("batch and model disagree on t_max")
    P = batch.n_patients
    pats = np.arange(P, dtype=np.int64) if patients is None else np.asarray(patients, dtype=np.int64)
    ll = np.full(P, np.nan)
    logpmf, logsurv, logpi = _model_tables(model)
    K = model.K
    dummy3 = np.zeros((1, K, 1))
    dummy2 = np.zeros((1, K))
    dummyc = np.zeros((K, 1))
    w = np.zeros(1)

    def run(bounds):
        _dp_kernel(pats[bounds[0]:bounds[1]], *_dp_args(batch), batch.bank.win_len, batch.bank.cum_off, cum,
                   logpmf, logsurv, logpi, end_aligned, False, w, 0.0, ll, dummy2, dummy3, dummy3, dummyc)

    _parallel.ordered_map(run, _parallel.chunks(len(pats)), threads)
    return ll


@dataclass
class SufficientStats:
    """Posterior-weighted E-step statistics for one trajectory model."""

    start: np.ndarray  # (P, K)
    pmf_hist: np.ndarray  # (P, K, t_max), completed durations
    surv_hist: np.ndarray  # (P, K, t_max), censored elapsed durations
    c: np.ndarray  # (K, cum_size) window weights


def batch_statistics(batch: SlotBatch, model: TrajectoryModel, cum: np.ndarray, end_aligned: bool, weight,
                     patients=None, prune: float = 0.0, threads=None) -> tuple[np.ndarray, SufficientStats]:
    P = batch.n_patients
    K = model.K
    pats = np.arange(P, dtype=np.int64) if patients is None else np.asarray(patients, dtype=np.int64)
    ll = np.full(P, np.nan)
    stats = SufficientStats(
        np.zeros((P, K)), np.zeros((P, K, batch.t_max)), np.zeros((P, K, batch.t_max)),
        np.zeros((K, batch.bank.cum_size)),
    )
    logpmf, logsurv, logpi = _model_tables(model)
    weight = np.ascontiguousarray(weight, dtype=float)

    def run(bounds):
        _dp_kernel(pats[bounds[0]:bounds[1]], *_dp_args(batch), batch.bank.win_len, batch.bank.cum_off, cum,
                   logpmf, logsurv, logpi, end_aligned, True, weight, prune, ll, stats.start, stats.pmf_hist,
                   stats.surv_hist, stats.c)

    _parallel.ordered_map(run, _parallel.chunks(len(pats)), threads)
    return ll, stats


def batch_online_log_likelihood(batch: SlotBatch, model: TrajectoryModel, cum: np.ndarray, threads=None) -> np.ndarray:
    """Censored log likelihood after each observation (flat, aligned with the batch's observations)."""
    out = np.full(len(batch.bank.time), np.nan)
    logpmf, logsurv, logpi = _model_tables(model)
    pats = np.arange(batch.n_patients, dtype=np.int64)

    def run(bounds):
        _online_kernel(pats[bounds[0]:bounds[1]], *_dp_args(batch), batch.bank.cum_off, cum, logpmf, logsurv, logpi,
                       batch.pat_obs_off, batch.bank.time, out)

    _parallel.ordered_map(run, _parallel.chunks(len(pats)), threads)
    return out


def _horizon(obs: Observations, t, endpoint) -> tuple[Observations, int, bool]:
    if endpoint is not None:
        if t is not None:
            raise ValueError("give either t (censored) or endpoint (end-aligned), not both")
        return obs, aligned_slots(endpoint, obs.times), True
    if t is None:
        t = float(obs.times[-1]) if len(obs) else 0.0
    if t < 0:
        raise ValueError("t must be non-negative")
    return obs.upto(t), censored_slots(t), False


def trajectory_log_likelihood(obs: Observations, model: TrajectoryModel, t: float | None = None, *,
                              endpoint: float | None = None) -> float:
    """log P(observations | model), summed over initial epoch and boundary placements.

    With ``t`` (default: last observation time) the horizon is censored at
    ``t``; with ``endpoint`` the stay is end-aligned and must finish epoch
    ``K - 1`` at that hour.
    """
    obs, n, aligned = _horizon(obs, t, endpoint)
    batch = SlotBatch.build([obs], [n], model.t_max)
    cum = model_cumulatives(batch, model, threads=1)
    ll = float(batch_log_likelihood(batch, model, cum, aligned, threads=1)[0])
    if np.isnan(ll):
        raise NumericalError("trajectory likelihood is NaN")
    return ll


# ---------------------------------------------------------------------------
# enumeration oracle and posteriors


@dataclass(frozen=True)
class Segmentation:
    """Initial epoch and the integer hours at which each later epoch begins."""

    start_epoch: int
    boundaries: tuple[int, ...]

    def spans(self, n_slots: int) -> list[tuple[int, int, int]]:
        """``(epoch, start slot, end slot)`` per occupied epoch; the last ends at ``n_slots``."""
        starts = (0,) + self.boundaries
        ends = self.boundaries + (n_slots,)
        return [(self.start_epoch + i, a, b) for i, (a, b) in enumerate(zip(starts, ends))]

    def labels(self, times) -> np.ndarray:
        """Epoch index of each time; a time equal to a boundary goes to the later epoch."""
        return self.start_epoch + np.searchsorted(np.asarray(self.boundaries), np.asarray(times), side="right")


def count_segmentations(K: int, n_slots: int, end_aligned: bool = False) -> int:
    if end_aligned:
        return sum(math.comb(n_slots - 1, K - 1 - k0) for k0 in range(K))
    return sum(math.comb(n_slots - 1, m) for k0 in range(K) for m in range(K - k0))


def enumerate_segmentations(K: int, t: float | None = None, *, endpoint: float | None = None) -> list[Segmentation]:
    """Every admissible segmentation of a censored horizon ``t`` or an end-aligned stay ``endpoint``."""
    if (t is None) == (endpoint is None):
        raise ValueError("give exactly one of t or endpoint")
    aligned = endpoint is not None
    n = aligned_slots(endpoint) if aligned else censored_slots(t)
    total = count_segmentations(K, n, aligned)
    if total > MAX_ENUMERATION:
        raise ValueError(f"{total} segmentations exceeds the enumeration limit {MAX_ENUMERATION}")
    out = []
    for k0 in range(K):
        sizes = [K - 1 - k0] if aligned else range(K - k0)
        for m in sizes:
            for b in combinations(range(1, n), m):
                out.append(Segmentation(k0, b))
    return out


def _segmentation_terms(seg: Segmentation, obs: Observations, model: TrajectoryModel, n: int, aligned: bool):
    logpi = model.initial.log_probs()
    total = logpi[seg.start_epoch]
    spans = seg.spans(n)
    per_span = []
    for i, (k, a, b) in enumerate(spans):
        d = b - a
        last = i == len(spans) - 1
        if d > model.t_max:
            return NEG_INF, spans, []
        if last and not aligned:
            total += model.durations.log_surv_table[k, d - 1]
        else:
            total += model.durations.log_pmf_table[k, d - 1]
        mask = (obs.times >= a) & (obs.times < b)
        lm = segment_log_marginal(obs.select(mask), model.epochs[k])
        per_span.append(lm)
        total += lm
    return total, spans, per_span


def enumeration_log_likelihood(obs: Observations, model: TrajectoryModel, t: float | None = None, *,
                               endpoint: float | None = None) -> float:
    """Brute-force counterpart of :func:`trajectory_log_likelihood` (small horizons only)."""
    obs, n, aligned = _horizon(obs, t, endpoint)
    if aligned:
        segs = enumerate_segmentations(model.K, endpoint=n)
    else:
        segs = enumerate_segmentations(model.K, n - 1)
    terms = [_segmentation_terms(s, obs, model, n, aligned)[0] for s in segs]
    return float(logsumexp(terms)) if terms else NEG_INF


@dataclass(frozen=True)
class SegmentPosteriors:
    """Posterior weight of each segment hypothesis ``(epoch, start hour, end hour)``.

    In the censored case the segment ending at the horizon is the epoch still in progress.
    """

    weights: dict
    log_likelihood: float
    n_slots: int
    end_aligned: bool

    def coverage(self, time: float) -> float:
        h = math.floor(time)
        return sum(w for (k, a, b), w in self.weights.items() if a <= h < b)


def segment_posteriors(obs: Observations, model: TrajectoryModel, t: float | None = None, *,
                       endpoint: float | None = None, tol: float = 0.0) -> SegmentPosteriors:
    obs, n, aligned = _horizon(obs, t, endpoint)
    batch = SlotBatch.build([obs], [n], model.t_max)
    cum = model_cumulatives(batch, model, threads=1)
    logpmf, logsurv, logpi = _model_tables(model)
    F, term, B, total = _tables(0, *_dp_args(batch), batch.bank.cum_off, cum, logpmf, logsurv, logpi, aligned, True)
    if not np.isfinite(total):
        raise NumericalError("no feasible segmentation")
    idx = batch.slot_idx[: n + 1]
    off = batch.bank.cum_off
    weights = {}
    K = model.K
    for k in range(K):
        for s in range(n):
            if F[k, s] == NEG_INF:
                continue
            if term[k, s] > NEG_INF:
                w = math.exp(F[k, s] + term[k, s] - total)
                if w > tol:
                    weights[(k, s, n)] = w
            if k < K - 1:
                for d in range(1, min(model.t_max, n - 1 - s) + 1):
                    if B[k + 1, s + d] == NEG_INF:
                        continue
                    seg = cum[k, off[s] + idx[s + d] - idx[s]]
                    w = math.exp(F[k, s] + logpmf[k, d - 1] + seg + B[k + 1, s + d] - total)
                    if w > tol:
                        weights[(k, s, s + d)] = w
    return SegmentPosteriors(weights, float(total), n, aligned)
