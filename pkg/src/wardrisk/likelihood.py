"""Exact Gaussian log marginal likelihood of epoch segments and its gradient.

The batched routines work on *windows*: contiguous runs of time-sorted
observations that start at an epoch start hour. One Cholesky factor of a
window yields the log marginal of every prefix of it (the conditional
log-density of observation ``i`` given ``0..i-1`` is ``-0.5 (z_i^2 + 2 log L_ii
+ log 2 pi)``), which is what the segmentation dynamic program consumes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import _parallel
from .kernel import EpochKernelParams, sigmoid

__all__ = [
    "NumericalError",
    "JITTER_LADDER",
    "Observations",
    "SegmentObservations",
    "StreamStandardizer",
    "WindowBank",
    "window_cumulative",
    "window_objective",
    "gradient_to_unconstrained",
    "segment_log_marginal",
    "segment_log_marginal_grad",
]

LOG2PI = math.log(2.0 * math.pi)
JITTER_LADDER = (0.0, 1e-4, 1e-2)


class NumericalError(ArithmeticError):
    """Covariance could not be factorized even after nugget escalation, or a likelihood is not finite."""


@dataclass(frozen=True, eq=False)
class Observations:
    """Time-sorted ``(stream, time, standardized value)`` triples."""

    streams: np.ndarray
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        s = np.ascontiguousarray(self.streams, dtype=np.int64).reshape(-1)
        t = np.ascontiguousarray(self.times, dtype=np.float64).reshape(-1)
        v = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if not (len(s) == len(t) == len(v)):
            raise ValueError("observation columns differ in length")
        if len(t) and (np.any(np.diff(t) < 0) or not np.all(np.isfinite(t))):
            raise ValueError("observation times must be finite and sorted")
        if not np.all(np.isfinite(v)):
            raise ValueError("observation values must be finite")
        object.__setattr__(self, "streams", s)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.times)

    def upto(self, t: float) -> "Observations":
        m = int(np.searchsorted(self.times, t, side="right"))
        return Observations(self.streams[:m], self.times[:m], self.values[:m])

    def select(self, mask) -> "Observations":
        return Observations(self.streams[mask], self.times[mask], self.values[mask])


SegmentObservations = Observations


@dataclass(frozen=True, eq=False)
class StreamStandardizer:
    """Per-stream mean and sd learned on training values."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, records, D: int) -> "StreamStandardizer":
        s1 = np.zeros(D)
        s2 = np.zeros(D)
        n = np.zeros(D)
        for rec in records:
            np.add.at(n, rec.streams, 1.0)
            np.add.at(s1, rec.streams, rec.values)
        mean = np.divide(s1, n, out=np.zeros(D), where=n > 0)
        for rec in records:
            np.add.at(s2, rec.streams, (rec.values - mean[rec.streams]) ** 2)
        var = np.divide(s2, n, out=np.ones(D), where=n > 1)
        scale = np.sqrt(var)
        scale[~(scale > 1e-12)] = 1.0
        return cls(mean, scale)

    def transform(self, streams, values) -> np.ndarray:
        streams = np.asarray(streams, dtype=np.int64)
        return (np.asarray(values, dtype=float) - self.mean[streams]) / self.scale[streams]

    def inverse(self, streams, values) -> np.ndarray:
        streams = np.asarray(streams, dtype=np.int64)
        return np.asarray(values, dtype=float) * self.scale[streams] + self.mean[streams]

    def observations(self, record) -> Observations:
        return Observations(record.streams, record.times, self.transform(record.streams, record.values))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d) -> "StreamStandardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["scale"], dtype=float))

    @classmethod
    def identity(cls, D: int) -> "StreamStandardizer":
        return cls(np.zeros(D), np.ones(D))


# ---------------------------------------------------------------------------
# numba kernels


@njit(cache=True, nogil=True)
def _fill_cov(A, stream, time, a0, m, cov, inv2l2, noise, jitter):
    for i in range(m):
        ui = stream[a0 + i]
        ti = time[a0 + i]
        for j in range(i):
            dt = ti - time[a0 + j]
            A[i, j] = cov[ui, stream[a0 + j]] * math.exp(-dt * dt * inv2l2)
        A[i, i] = cov[ui, ui] + noise[ui] + jitter


@njit(cache=True, nogil=True)
def _fill_cov_se(A, E, stream, time, a0, m, cov, inv2l2, noise, jitter):
    """As :func:`_fill_cov`, also keeping the time-kernel values in ``E``."""
    for i in range(m):
        ui = stream[a0 + i]
        ti = time[a0 + i]
        for j in range(i):
            dt = ti - time[a0 + j]
            se = math.exp(-dt * dt * inv2l2)
            E[i, j] = se
            A[i, j] = cov[ui, stream[a0 + j]] * se
        A[i, i] = cov[ui, ui] + noise[ui] + jitter


@njit(cache=True, nogil=True)
def _cholesky_lower(A, m):
    """In-place lower Cholesky of the leading m x m block; returns the failing pivot index or -1."""
    for j in range(m):
        s = A[j, j]
        for k in range(j):
            s -= A[j, k] * A[j, k]
        if not (s > 0.0) or not math.isfinite(s):
            return j
        d = math.sqrt(s)
        A[j, j] = d
        for i in range(j + 1, m):
            s = A[i, j]
            for k in range(j):
                s -= A[i, k] * A[j, k]
            A[i, j] = s / d
    return -1


@njit(cache=True, nogil=True)
def _cum_kernel(stream, time, value, win_start, win_len, cum_off, wins, mean, cov, inv2l2, noise, jitter, cum, status):
    mmax = 0
    for idx in range(wins.shape[0]):
        mmax = max(mmax, win_len[wins[idx]])
    A = np.empty((mmax, mmax))
    z = np.empty(mmax)
    for idx in range(wins.shape[0]):
        w = wins[idx]
        a0 = win_start[w]
        m = win_len[w]
        off = cum_off[w]
        cum[off] = 0.0
        _fill_cov(A, stream, time, a0, m, cov, inv2l2, noise, jitter)
        if _cholesky_lower(A, m) >= 0:
            status[w] = 1
            continue
        status[w] = 0
        acc = 0.0
        for i in range(m):
            s = value[a0 + i] - mean[stream[a0 + i]]
            for j in range(i):
                s -= A[i, j] * z[j]
            z[i] = s / A[i, i]
            acc += -0.5 * (z[i] * z[i] + 2.0 * math.log(A[i, i]) + LOG2PI)
            cum[off + i + 1] = acc


@njit(cache=True, nogil=True)
def _grad_kernel(stream, time, value, win_start, win_len, cum_off, c, wins, mean, cov, inv2l2, noise, jitter, status):
    D = mean.shape[0]
    F = 0.0
    gmean = np.zeros(D)
    gcov = np.zeros((D, D))
    gnoise = np.zeros(D)
    glogl = 0.0
    mmax = 0
    for idx in range(wins.shape[0]):
        mmax = max(mmax, win_len[wins[idx]])
    L = np.empty((mmax, mmax))
    M = np.empty((mmax, mmax))
    S = np.empty((mmax, mmax))
    E = np.empty((mmax, mmax))
    z = np.empty(mmax)
    alpha = np.empty(mmax)
    for idx in range(wins.shape[0]):
        w = wins[idx]
        a0 = win_start[w]
        m = win_len[w]
        off = cum_off[w]
        if m == 0:
            continue
        _fill_cov_se(L, E, stream, time, a0, m, cov, inv2l2, noise, jitter)
        if _cholesky_lower(L, m) >= 0:
            status[w] = 1
            continue
        status[w] = 0
        for i in range(m):
            s = value[a0 + i] - mean[stream[a0 + i]]
            for j in range(i):
                s -= L[i, j] * z[j]
            z[i] = s / L[i, i]
            F += c[off + i] * (-0.5 * (z[i] * z[i] + 2.0 * math.log(L[i, i]) + LOG2PI))
        # rows of M = L^{-1}
        for i in range(m):
            for j in range(i + 1):
                M[i, j] = 0.0
            M[i, i] = 1.0
            for k in range(i):
                lik = L[i, k]
                for j in range(k + 1):
                    M[i, j] -= lik * M[k, j]
            inv = 1.0 / L[i, i]
            for j in range(i + 1):
                M[i, j] *= inv
        # S = sum_j wc_j alpha_j alpha_j^T - M^T diag(c) M, lower triangle; alpha_j solves the length-j prefix
        for a in range(m):
            alpha[a] = 0.0
            for b in range(a + 1):
                S[a, b] = 0.0
        for i in range(m):
            ci = c[off + i]
            if ci != 0.0:
                for a in range(i + 1):
                    t = ci * M[i, a]
                    for b in range(a + 1):
                        S[a, b] -= t * M[i, b]
            zi = z[i]
            for a in range(i + 1):
                alpha[a] += zi * M[i, a]
            wj = ci - (c[off + i + 1] if i + 1 < m else 0.0)
            if wj != 0.0:
                for a in range(i + 1):
                    t = wj * alpha[a]
                    gmean[stream[a0 + a]] += t
                    for b in range(a + 1):
                        S[a, b] += t * alpha[b]
        for a in range(m):
            ua = stream[a0 + a]
            ta = time[a0 + a]
            for b in range(a):
                g = 0.5 * S[a, b]
                ub = stream[a0 + b]
                dt = ta - time[a0 + b]
                se = E[a, b]
                gcov[ua, ub] += g * se
                gcov[ub, ua] += g * se
                glogl += 2.0 * g * cov[ua, ub] * se * dt * dt * 2.0 * inv2l2
            g = 0.5 * S[a, a]
            gnoise[ua] += g
            gcov[ua, ua] += g
    return F, gmean, gcov, glogl, gnoise


# ---------------------------------------------------------------------------
# window banks


@dataclass(frozen=True, eq=False)
class WindowBank:
    """Flat observation arrays plus windows ``[win_start, win_start + win_len)`` into them.

    ``cum_off[w]`` locates window ``w``'s ``win_len + 1`` prefix sums in the
    flat arrays returned by :func:`window_cumulative`.
    """

    stream: np.ndarray
    time: np.ndarray
    value: np.ndarray
    win_start: np.ndarray
    win_len: np.ndarray

    def __post_init__(self):
        for name, dt in (("stream", np.int64), ("time", np.float64), ("value", np.float64),
                         ("win_start", np.int64), ("win_len", np.int64)):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=dt))
        off = np.zeros(len(self.win_len) + 1, dtype=np.int64)
        np.cumsum(self.win_len + 1, out=off[1:])
        object.__setattr__(self, "cum_off", off)

    @property
    def n_windows(self) -> int:
        return len(self.win_len)

    @property
    def cum_size(self) -> int:
        return int(self.cum_off[-1])

    @classmethod
    def single(cls, obs: Observations) -> "WindowBank":
        return cls(obs.streams, obs.times, obs.values, np.array([0]), np.array([len(obs)]))


def _kernel_args(params: EpochKernelParams):
    return (
        np.ascontiguousarray(params.mean),
        np.ascontiguousarray(params.task_cov),
        0.5 / params.length_scale**2,
        np.ascontiguousarray(params.noise),
    )


def window_cumulative(bank: WindowBank, params: EpochKernelParams, wins=None, threads: int | None = None) -> np.ndarray:
    """Prefix log marginals of every window (flat, indexed by ``bank.cum_off``).

    Windows whose covariance will not factorize are retried with the jitter
    ladder; :class:`NumericalError` if the last rung fails.
    """
    if wins is None:
        wins = np.arange(bank.n_windows, dtype=np.int64)
    wins = np.ascontiguousarray(wins, dtype=np.int64)
    cum = np.zeros(bank.cum_size)
    status = np.zeros(bank.n_windows, dtype=np.int64)
    mean, cov, inv2l2, noise = _kernel_args(params)
    todo = wins
    for jitter in JITTER_LADDER:
        parts = _parallel.chunks(len(todo))

        def run(bounds, todo=todo, jitter=jitter):
            _cum_kernel(bank.stream, bank.time, bank.value, bank.win_start, bank.win_len, bank.cum_off,
                        todo[bounds[0]:bounds[1]], mean, cov, inv2l2, noise, jitter, cum, status)

        _parallel.ordered_map(run, parts, threads)
        todo = todo[status[todo] != 0]
        if len(todo) == 0:
            return cum
    raise NumericalError(
        f"{len(todo)} window(s) not positive definite after jitter {JITTER_LADDER[-1]}; "
        f"min task-cov eigenvalue {np.linalg.eigvalsh(cov).min():.3g}, length scale {params.length_scale:.3g}"
    )


def window_objective(bank: WindowBank, params: EpochKernelParams, c: np.ndarray, wins=None, threads: int | None = None):
    """Weighted prefix objective ``sum_w sum_i c[w, i] * cond_loglik[w, i]`` and its gradient.

    ``c`` is aligned with ``bank.cum_off``. Returns ``(F, gmean, gcov, glog_l,
    gnoise)`` with the gradient taken with respect to the constrained
    quantities (mean, full task covariance, log length scale, noise).
    """
    if wins is None:
        wins = np.arange(bank.n_windows, dtype=np.int64)
    wins = np.ascontiguousarray(wins, dtype=np.int64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    mean, cov, inv2l2, noise = _kernel_args(params)
    status = np.zeros(bank.n_windows, dtype=np.int64)
    D = params.D
    total = [0.0, np.zeros(D), np.zeros((D, D)), 0.0, np.zeros(D)]
    todo = wins
    for jitter in JITTER_LADDER:
        parts = _parallel.chunks(len(todo))

        def run(bounds, todo=todo, jitter=jitter):
            return _grad_kernel(bank.stream, bank.time, bank.value, bank.win_start, bank.win_len, bank.cum_off, c,
                                todo[bounds[0]:bounds[1]], mean, cov, inv2l2, noise, jitter, status)

        for part in _parallel.ordered_map(run, parts, threads):
            for i in range(5):
                total[i] = total[i] + part[i]
        todo = todo[status[todo] != 0]
        if len(todo) == 0:
            return tuple(total)
    raise NumericalError(f"{len(todo)} window(s) not positive definite after jitter {JITTER_LADDER[-1]}")


def gradient_to_unconstrained(params: EpochKernelParams, gmean, gcov, glogl, gnoise) -> np.ndarray:
    """Chain rule into the order of :meth:`EpochKernelParams.to_unconstrained`."""
    theta = params.to_unconstrained()
    D, R = params.D, params.rank
    i = D + D * R
    diag_raw = theta[i : i + D]
    noise_raw = theta[i + D + 1 :]
    gfactor = (gcov + gcov.T) @ params.factor
    gdiag = np.diag(gcov) * sigmoid(diag_raw)
    gnoise_raw = gnoise * sigmoid(noise_raw)
    return np.concatenate([gmean, gfactor.ravel(), gdiag, [glogl], gnoise_raw])


# ---------------------------------------------------------------------------
# single segment


def segment_log_marginal(obs: Observations, params: EpochKernelParams) -> float:
    """log N(values; means of each stream, epoch covariance). Empty segment gives 0."""
    if len(obs) == 0:
        return 0.0
    bank = WindowBank.single(obs)
    return float(window_cumulative(bank, params, threads=1)[-1])


def segment_log_marginal_grad(obs: Observations, params: EpochKernelParams) -> np.ndarray:
    """Analytic gradient of :func:`segment_log_marginal` in the unconstrained parameterization."""
    if len(obs) == 0:
        return np.zeros(params.n_free())
    bank = WindowBank.single(obs)
    c = np.ones(bank.cum_size)
    _, gm, gc, gl, gn = window_objective(bank, params, c, threads=1)
    return gradient_to_unconstrained(params, gm, gc, gl, gn)
