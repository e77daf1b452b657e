"""Multi-task covariance: task covariance times a squared-exponential time kernel, zero across epochs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

__all__ = [
    "NUGGET",
    "LENGTH_SCALE_BOUNDS",
    "EpochKernelParams",
    "se_kernel",
    "log_se_kernel",
    "task_cov_from_factors",
    "assemble_covariance",
    "softplus",
    "softplus_inv",
]

NUGGET = 1e-6
LENGTH_SCALE_BOUNDS = (0.25, 500.0)


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.maximum(np.asarray(y, dtype=float), 1e-300)
    # log(expm1(y)) computed stably for large and tiny y
    return np.where(y > 30.0, y + np.log1p(-np.exp(-np.minimum(y, 700.0))), np.log(np.expm1(np.minimum(y, 30.0))))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-np.logaddexp(0.0, -x))


def se_kernel(t, t_prime, length_scale: float):
    """exp(-|t - t'|^2 / (2 l^2))."""
    return np.exp(log_se_kernel(t, t_prime, length_scale))


def log_se_kernel(t, t_prime, length_scale: float):
    if length_scale <= 0:
        raise ValueError("length_scale must be positive")
    d = np.asarray(t, dtype=float) - np.asarray(t_prime, dtype=float)
    return -0.5 * d * d / (length_scale * length_scale)


def task_cov_from_factors(factor, diag) -> np.ndarray:
    """factor @ factor.T + diag(diag); symmetric PSD by construction."""
    factor = np.atleast_2d(np.asarray(factor, dtype=float))
    diag = np.asarray(diag, dtype=float)
    if factor.shape[1] > factor.shape[0]:
        raise ValueError("factor rank exceeds number of tasks")
    if np.any(diag < 0):
        raise ValueError("diag must be non-negative")
    cov = factor @ factor.T
    cov[np.diag_indices_from(cov)] += diag
    return 0.5 * (cov + cov.T)


@dataclass(frozen=True, eq=False)
class EpochKernelParams:
    """Mean, task covariance (low rank plus diagonal), length scale and noise for one epoch.

    Means and noise are in standardized stream units; the length scale is in hours.
    """

    mean: np.ndarray
    factor: np.ndarray
    diag: np.ndarray
    length_scale: float
    noise: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        D = mean.shape[0]
        factor = np.array(self.factor, dtype=float).reshape(D, -1)
        diag = np.array(self.diag, dtype=float).reshape(D)
        noise = np.array(self.noise, dtype=float).reshape(D)
        for name, arr in (("mean", mean), ("factor", factor), ("diag", diag), ("noise", noise)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if np.any(diag < 0):
            raise ValueError("diag must be non-negative")
        if np.any(noise < NUGGET * (1 - 1e-9)):
            raise ValueError(f"noise must be >= {NUGGET}")
        ls = float(self.length_scale)
        if not (np.isfinite(ls) and ls > 0):
            raise ValueError("length_scale must be positive")
        object.__setattr__(self, "length_scale", ls)

    @property
    def D(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    @property
    def task_cov(self) -> np.ndarray:
        return task_cov_from_factors(self.factor, self.diag)

    def check_bounds(self, bounds=LENGTH_SCALE_BOUNDS) -> None:
        lo, hi = bounds
        if not lo * (1 - 1e-12) <= self.length_scale <= hi * (1 + 1e-12):
            raise ValueError(f"length_scale {self.length_scale} outside [{lo}, {hi}]")

    # unconstrained vector: [mean, factor (row-major), softplus^-1(diag), log l, softplus^-1(noise - nugget)]
    def to_unconstrained(self) -> np.ndarray:
        return np.concatenate(
            [
                self.mean,
                self.factor.ravel(),
                softplus_inv(np.maximum(self.diag, 1e-12)),
                [np.log(self.length_scale)],
                softplus_inv(np.maximum(self.noise - NUGGET, 1e-12)),
            ]
        )

    @classmethod
    def from_unconstrained(cls, theta, D: int, rank: int) -> "EpochKernelParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (n_unconstrained(D, rank),):
            raise ValueError("unconstrained vector has the wrong length")
        i = 0
        mean = theta[i : i + D]
        i += D
        factor = theta[i : i + D * rank].reshape(D, rank)
        i += D * rank
        diag = softplus(theta[i : i + D])
        i += D
        ls = float(np.exp(theta[i]))
        i += 1
        noise = NUGGET + softplus(theta[i : i + D])
        return cls(mean, factor, diag, ls, noise)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "factor": self.factor.tolist(),
            "diag": self.diag.tolist(),
            "length_scale": self.length_scale,
            "noise": self.noise.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EpochKernelParams":
        D = len(d["mean"])
        factor = np.asarray(d["factor"], dtype=float).reshape(D, -1)
        return cls(d["mean"], factor, d["diag"], d["length_scale"], d["noise"])

    def n_free(self) -> int:
        return n_unconstrained(self.D, self.rank)


def n_unconstrained(D: int, rank: int) -> int:
    return D + D * rank + D + 1 + D


def assemble_covariance(streams, times, labels, params: Mapping[int, EpochKernelParams]) -> np.ndarray:
    """Covariance of observations ``(stream, time)`` labelled by epoch.

    Entry (a, b) is ``task_cov[u_a, u_b] * se(t_a, t_b)`` when both lie in the
    same epoch and exactly 0 otherwise; per-stream noise sits on the diagonal.
    """
    streams = np.asarray(streams, dtype=np.int64)
    times = np.asarray(times, dtype=float)
    labels = np.asarray(labels)
    n = len(times)
    K = np.zeros((n, n))
    for k in np.unique(labels):
        if k not in params:
            raise KeyError(f"no kernel parameters for epoch {k}")
        p = params[k]
        idx = np.flatnonzero(labels == k)
        u = streams[idx]
        t = times[idx]
        block = p.task_cov[np.ix_(u, u)] * se_kernel(t[:, None], t[None, :], p.length_scale)
        block[np.diag_indices_from(block)] += p.noise[u]
        K[np.ix_(idx, idx)] = block
    return K
