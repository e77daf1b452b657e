"""Reference computations written independently of the package internals.

They rebuild covariances entry by entry, use scipy's densities and
enumerate segmentations with itertools, so they share no code path with
the window/DP machinery they check.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_normal, nbinom


def dense_covariance(streams, times, mean_factor, diag, length_scale, noise):
    n = len(times)
    task = np.asarray(mean_factor) @ np.asarray(mean_factor).T + np.diag(diag)
    C = np.empty((n, n))
    for a in range(n):
        for b in range(n):
            C[a, b] = task[streams[a], streams[b]] * math.exp(-((times[a] - times[b]) ** 2) / (2 * length_scale**2))
        C[a, a] += noise[streams[a]]
    return C


def dense_log_marginal(streams, times, values, ep) -> float:
    """Textbook multivariate normal density of one segment."""
    if len(times) == 0:
        return 0.0
    C = dense_covariance(streams, times, ep.factor, ep.diag, ep.length_scale, ep.noise)
    mu = np.asarray(ep.mean)[np.asarray(streams)]
    return float(multivariate_normal(mean=mu, cov=C).logpdf(values))


def truncated_nb_logpmf(r: float, p: float, t_max: int) -> np.ndarray:
    """log pmf of durations 1..t_max, duration - 1 ~ NB(r, p) renormalized on the support."""
    pmf = nbinom.pmf(np.arange(t_max), r, p)
    return np.log(pmf / pmf.sum())


def brute_force_log_likelihood(streams, times, values, epochs, r, p, pi, t_max, *, t=None, endpoint=None) -> float:
    """Sum over start epoch and integer boundary hours of the joint density.

    Censored horizon ``t``: hour slots ``0..floor(t)``, the last epoch is in
    progress (survival term). End-aligned ``endpoint``: the stay ends
    epoch K-1 exactly at hour ``ceil(endpoint)`` (pmf term).
    """
    streams, times, values = map(np.asarray, (streams, times, values))
    K = len(epochs)
    if endpoint is not None:
        n = max(1, math.ceil(endpoint))
        if len(times):
            n = max(n, math.floor(times[-1]) + 1)
    else:
        keep = times <= t
        streams, times, values = streams[keep], times[keep], values[keep]
        n = math.floor(t) + 1
    logpmf = [truncated_nb_logpmf(r[k], p[k], t_max) for k in range(K)]
    terms = []
    for k0 in range(K):
        n_bounds = [K - 1 - k0] if endpoint is not None else range(K - k0)
        for m in n_bounds:
            for bounds in itertools.combinations(range(1, n), m):
                edges = (0,) + bounds + (n,)
                total = math.log(pi[k0]) if pi[k0] > 0 else -math.inf
                for i in range(len(edges) - 1):
                    k = k0 + i
                    a, b = edges[i], edges[i + 1]
                    d = b - a
                    last = i == len(edges) - 2
                    if d > t_max:
                        total = -math.inf
                        break
                    if last and endpoint is None:
                        total += logsumexp(logpmf[k][d - 1:])
                    else:
                        total += logpmf[k][d - 1]
                    sel = (times >= a) & (times < b)
                    total += dense_log_marginal(streams[sel], times[sel], values[sel], epochs[k])
                terms.append(total)
    return float(logsumexp(terms))
