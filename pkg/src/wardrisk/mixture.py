"""Phenotype-gated mixture of trajectory models: gating, likelihood, EM training and BIC selection."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax, logsumexp
from sklearn.cluster import KMeans

from .cohort import Cohort, PatientRecord, StaticEncoder, StaticProfile, StreamSpec, Vocabulary
from .kernel import LENGTH_SCALE_BOUNDS, EpochKernelParams, n_unconstrained
from .likelihood import NumericalError, Observations, StreamStandardizer, WindowBank, window_objective, gradient_to_unconstrained
from .trajectory import (
    DEFAULT_T_MAX,
    DurationParams,
    InitialEpochDist,
    SlotBatch,
    TrajectoryModel,
    aligned_slots,
    batch_log_likelihood,
    batch_statistics,
    censored_slots,
    model_cumulatives,
    nb_log_tables,
)

__all__ = [
    "GatingParams",
    "ModelParams",
    "FitReport",
    "EMConfig",
    "gating_probabilities",
    "gating_log_probabilities",
    "class_conditional_log_likelihood",
    "observed_log_likelihood",
    "phenotype_posteriors",
    "em_fit",
    "count_parameters",
    "bic",
    "select_model",
    "SelectionResult",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GatingParams:
    """Softmax gating weights ``W`` (G x F); row 0 is the reference class and stays zero."""

    W: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=float, ndmin=2)
        if not np.all(np.isfinite(W)):
            raise ValueError("gating weights must be finite")
        if np.any(W[0] != 0.0):
            raise ValueError("gating row 0 is the reference class and must be zero")
        W.flags.writeable = False
        object.__setattr__(self, "W", W)

    @property
    def G(self) -> int:
        return self.W.shape[0]

    @property
    def F(self) -> int:
        return self.W.shape[1]

    @classmethod
    def zeros(cls, G: int, F: int) -> "GatingParams":
        return cls(np.zeros((G, F)))


def gating_log_probabilities(y, gating: GatingParams) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != gating.F:
        raise ValueError(f"feature length {y.shape[-1]} != gating width {gating.F}")
    return log_softmax(y @ gating.W.T, axis=-1)


def gating_probabilities(y, gating: GatingParams) -> np.ndarray:
    """Phenotype membership probabilities for one encoded profile (or a stack of them)."""
    return np.exp(gating_log_probabilities(y, gating))


@dataclass(frozen=True, eq=False)
class ModelParams:
    """A trained model: ``trajectories[v][z]`` for outcome v in {0, 1} and phenotype z, plus gating and encoders."""

    trajectories: tuple
    gating: GatingParams
    prior_icu: float
    vocabulary: Vocabulary
    age_mean: float
    age_scale: float
    standardizer: StreamStandardizer
    streams: tuple

    def __post_init__(self):
        traj = tuple(tuple(row) for row in self.trajectories)
        object.__setattr__(self, "trajectories", traj)
        object.__setattr__(self, "streams", tuple(self.streams))
        if len(traj) != 2:
            raise ValueError("need trajectory models for both outcome classes")
        G = len(traj[0])
        if G < 1 or len(traj[1]) != G or self.gating.G != G:
            raise ValueError("phenotype counts disagree")
        shapes = {(m.K, m.D, m.epochs[0].rank, m.t_max) for row in traj for m in row}
        if len(shapes) != 1:
            raise ValueError("trajectory models disagree on K, D, rank or t_max")
        if not 0.0 < float(self.prior_icu) < 1.0:
            raise ValueError("prior_icu must lie in (0, 1)")
        object.__setattr__(self, "prior_icu", float(self.prior_icu))
        if len(self.streams) != self.D or len(self.standardizer.mean) != self.D:
            raise ValueError("stream catalog does not match the model dimension")
        if self.gating.F != self.encoder().n_features_out_:
            raise ValueError("gating width does not match the static encoding")

    def model(self, v: int, z: int) -> TrajectoryModel:
        return self.trajectories[v][z]

    @property
    def G(self) -> int:
        return len(self.trajectories[0])

    @property
    def K(self) -> int:
        return self.trajectories[0][0].K

    @property
    def D(self) -> int:
        return self.trajectories[0][0].D

    @property
    def rank(self) -> int:
        return self.trajectories[0][0].epochs[0].rank

    @property
    def t_max(self) -> int:
        return self.trajectories[0][0].t_max

    @property
    def F(self) -> int:
        return self.gating.F

    def encoder(self) -> StaticEncoder:
        return StaticEncoder.from_stats(self.vocabulary, self.age_mean, self.age_scale)

    def encode(self, profiles: Sequence[StaticProfile]) -> np.ndarray:
        return self.encoder().transform(list(profiles))

    def n_free_parameters(self) -> int:
        """Tally of free entries across the stored tensors (simplex and reference-row constraints removed)."""
        total = 0
        for row in self.trajectories:
            for m in row:
                for ep in m.epochs:
                    total += ep.mean.size + ep.factor.size + ep.diag.size + 1 + ep.noise.size
                total += m.durations.r.size + m.durations.p.size + (m.initial.probs.size - 1)
        total += self.gating.W[1:].size
        return total + 1

    def with_prior(self, prior_icu: float) -> "ModelParams":
        return replace(self, prior_icu=prior_icu)

    def to_dict(self) -> dict:
        return {
            "G": self.G,
            "K": self.K,
            "D": self.D,
            "rank": self.rank,
            "t_max": self.t_max,
            "prior_icu": self.prior_icu,
            "trajectories": [[m.to_dict() for m in row] for row in self.trajectories],
            "gating": self.gating.W.tolist(),
            "encoding": {"vocabulary": self.vocabulary.to_dict(), "age_mean": self.age_mean, "age_scale": self.age_scale},
            "standardizer": self.standardizer.to_dict(),
            "streams": [{"name": s.name, "unit": s.unit, "mean": s.mean, "sd": s.sd} for s in self.streams],
        }

    @classmethod
    def from_dict(cls, d) -> "ModelParams":
        enc = d["encoding"]
        return cls(
            trajectories=tuple(tuple(TrajectoryModel.from_dict(m) for m in row) for row in d["trajectories"]),
            gating=GatingParams(np.asarray(d["gating"], dtype=float)),
            prior_icu=d["prior_icu"],
            vocabulary=Vocabulary.from_dict(enc["vocabulary"]),
            age_mean=float(enc["age_mean"]),
            age_scale=float(enc["age_scale"]),
            standardizer=StreamStandardizer.from_dict(d["standardizer"]),
            streams=tuple(StreamSpec(s["name"], s["unit"], s["mean"], s["sd"]) for s in d["streams"]),
        )


@dataclass
class FitReport:
    trace: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    seed: int = 0
    G: int = 1
    K: int = 1
    reverted: bool = False
    rejected_gain: float | None = None  # log-likelihood change of the discarded step, when one was reverted

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "FitReport":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


@dataclass
class EMConfig:
    """Training settings. ``tol`` is the relative log-likelihood gain below which EM stops."""

    max_iter: int = 100
    tol: float = 1e-4
    seed: int = 0
    rank: int = 3
    t_max: int = DEFAULT_T_MAX
    kmeans_restarts: int = 5
    inner_maxfun: int = 25
    end_aligned: bool = True
    prune: float = 1e-12
    window_prune: float = 1e-6
    surrogate_prune: float = 1e-2
    gating_l2: float = 1e-3
    init_jitter: float = 0.1
    init_length_scale: float = 4.0
    threads: int | None = None

    def validate(self) -> "EMConfig":
        if self.max_iter < 0 or self.tol < 0 or self.rank < 0 or self.t_max < 1 or self.inner_maxfun < 1:
            raise ValueError("invalid EM configuration")
        if self.kmeans_restarts < 1:
            raise ValueError("kmeans_restarts must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def count_parameters(G: int, K: int, D: int, F: int, R: int) -> int:
    per_class = K * (D + D * R + D + 1 + D) + 2 * K + (K - 1)
    return G * 2 * per_class + (G - 1) * F + 1


# ---------------------------------------------------------------------------
# likelihood over a cohort


@dataclass
class _ClassData:
    index: np.ndarray  # cohort positions of this class
    batch: SlotBatch
    Y: np.ndarray


def _slots(rec: PatientRecord, end_aligned: bool) -> int:
    if end_aligned:
        return aligned_slots(rec.endpoint_time, rec.times)
    return censored_slots(max(rec.endpoint_time, rec.times[-1] if len(rec.times) else 0.0))


def _prepare(cohort: Cohort, std: StreamStandardizer, Y: np.ndarray, K: int, t_max: int, end_aligned: bool):
    labels = cohort.labels()
    out = []
    for v in (0, 1):
        index = np.flatnonzero(labels == v)
        recs = [cohort.patients[i] for i in index]
        obs = [std.observations(r) for r in recs]
        n = np.array([_slots(r, end_aligned) for r in recs], dtype=np.int64)
        too_long = n > K * t_max
        if np.any(too_long):
            bad = recs[int(np.argmax(too_long))]
            raise ValueError(f"patient {bad.id}: stay of {n.max()} h exceeds K * t_max = {K * t_max} h")
        out.append(_ClassData(index, SlotBatch.build(obs, n, t_max), Y[index]))
    return out


def _class_log_liks(params: ModelParams, data: Sequence[_ClassData], end_aligned: bool, threads=None):
    """Per class: (log gating + trajectory log lik) of shape (P_v, G) and the cumulative arrays."""
    out = []
    for v, cd in enumerate(data):
        lg = gating_log_probabilities(cd.Y, params.gating)
        cums = []
        L = np.empty((len(cd.index), params.G))
        for z in range(params.G):
            m = params.model(v, z)
            cum = model_cumulatives(cd.batch, m, threads=threads)
            L[:, z] = batch_log_likelihood(cd.batch, m, cum, end_aligned, threads=threads)
            cums.append(cum)
        out.append((lg + L, cums))
    return out


def _observed_total(joint, labels_count, prior_icu: float) -> tuple[float, list]:
    total = 0.0
    resp = []
    for v, (J, _) in enumerate(joint):
        lse = logsumexp(J, axis=1)
        if not np.all(np.isfinite(lse)):
            raise NumericalError(f"non-finite likelihood for {int(np.sum(~np.isfinite(lse)))} class-{v} patient(s)")
        total += float(lse.sum())
        resp.append(np.exp(J - lse[:, None]))
    n0, n1 = labels_count
    total += n1 * math.log(prior_icu) + n0 * math.log1p(-prior_icu)
    return total, resp


def observed_log_likelihood(params: ModelParams, cohort: Cohort, end_aligned: bool = True, threads=None) -> float:
    """Sum over patients of log P(V_i, observations_i | Y_i)."""
    Y = params.encode([r.profile for r in cohort])
    data = _prepare(cohort, params.standardizer, Y, params.K, params.t_max, end_aligned)
    joint = _class_log_liks(params, data, end_aligned, threads)
    return _observed_total(joint, (len(data[0].index), len(data[1].index)), params.prior_icu)[0]


def phenotype_posteriors(params: ModelParams, cohort: Cohort, end_aligned: bool = True, threads=None) -> np.ndarray:
    """P(Z_i = z | Y_i, V_i, observations_i), shape (N, G)."""
    Y = params.encode([r.profile for r in cohort])
    data = _prepare(cohort, params.standardizer, Y, params.K, params.t_max, end_aligned)
    joint = _class_log_liks(params, data, end_aligned, threads)
    _, resp = _observed_total(joint, (len(data[0].index), len(data[1].index)), params.prior_icu)
    out = np.zeros((len(cohort), params.G))
    for cd, r in zip(data, resp):
        out[cd.index] = r
    return out


def class_conditional_log_likelihood(record: PatientRecord, v: int, params: ModelParams, t: float | None = None, *,
                                     end_aligned: bool = False) -> float:
    """log sum_z gamma_z(y) P(observations | v, z).

    Censored at ``t`` (default: last event time) unless ``end_aligned``, which
    uses the record's endpoint.
    """
    from .trajectory import trajectory_log_likelihood

    y = params.encode([record.profile])[0]
    lg = gating_log_probabilities(y, params.gating)
    obs = params.standardizer.observations(record)
    terms = []
    for z in range(params.G):
        m = params.model(v, z)
        if end_aligned:
            terms.append(trajectory_log_likelihood(obs, m, endpoint=record.endpoint_time))
        else:
            terms.append(trajectory_log_likelihood(obs, m, t))
    return float(logsumexp(lg + np.array(terms)))


def bic(params: ModelParams, cohort: Cohort, log_likelihood: float | None = None, end_aligned: bool = True) -> float:
    """``-2 log L + P log N`` with N the number of patients."""
    if log_likelihood is None:
        log_likelihood = observed_log_likelihood(params, cohort, end_aligned)
    return -2.0 * log_likelihood + params.n_free_parameters() * math.log(len(cohort))


# ---------------------------------------------------------------------------
# initialization


def _binned_means(obs: Sequence[Observations], ends: np.ndarray, D: int, B: int):
    """Per patient, mean standardized value per (relative-time bin, stream); NaN where empty."""
    out = np.full((len(obs), B, D), np.nan)
    for i, o in enumerate(obs):
        if not len(o):
            continue
        b = np.minimum((o.times / max(ends[i], 1e-9) * B).astype(np.int64), B - 1)
        s = np.zeros((B, D))
        c = np.zeros((B, D))
        np.add.at(s, (b, o.streams), o.values)
        np.add.at(c, (b, o.streams), 1.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[i] = s / c
    return out


def _block_scale(X: np.ndarray) -> np.ndarray:
    X = X - X.mean(axis=0)
    tot = float(np.sqrt(np.sum(X.var(axis=0))))
    return X / tot if tot > 0 else X


def _initial_labels(Y: np.ndarray, summaries: np.ndarray, G: int, config: EMConfig) -> np.ndarray:
    if G == 1:
        return np.zeros(len(Y), dtype=np.int64)
    X = np.hstack([_block_scale(Y[:, 1:]), _block_scale(summaries)])
    km = KMeans(n_clusters=G, n_init=config.kmeans_restarts, random_state=config.seed)
    return km.fit_predict(X).astype(np.int64)


def _initialize(cohort: Cohort, data, obs_by_class, Y, G: int, K: int, D: int, R: int, config: EMConfig, std, enc):
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0x1417,)))
    B = max(K, 2)
    summaries = np.zeros((len(cohort), B * D))
    binned = []
    for v, cd in enumerate(data):
        ends = cd.batch.n_slots.astype(float)
        bm = _binned_means(obs_by_class[v], ends, D, B)
        binned.append(bm)
        centre = np.nanmean(bm, axis=0) if len(bm) else np.zeros((B, D))
        centre = np.where(np.isfinite(centre), centre, 0.0)
        filled = np.where(np.isfinite(bm), bm - centre, 0.0)
        summaries[cd.index] = filled.reshape(len(cd.index), -1)
    labels = _initial_labels(Y, summaries, G, config)

    trajectories = []
    for v, cd in enumerate(data):
        vals = np.concatenate([o.values for o in obs_by_class[v]]) if len(cd.index) else np.zeros(0)
        strs = np.concatenate([o.streams for o in obs_by_class[v]]) if len(cd.index) else np.zeros(0, np.int64)
        var = np.ones(D)
        for d in range(D):
            x = vals[strs == d]
            if len(x) > 1:
                var[d] = max(float(x.var()), 1e-3)
        stays = cd.batch.n_slots
        dbar = float(np.quantile(stays, 0.9)) / K if len(stays) else 2.0
        dbar = float(np.clip(dbar, 1.5, max(1.5, config.t_max / 2)))
        zl = labels[cd.index]
        row = []
        for z in range(G):
            bm = binned[v][zl == z]
            epochs = []
            for k in range(K):
                # epoch k is mapped onto the matching share of the (end-aligned) stay
                lo, hi = (k * B) // K, max((k * B) // K + 1, ((k + 1) * B) // K)
                with np.errstate(all="ignore"):
                    mu = np.nanmean(bm[:, lo:hi].reshape(-1, D), axis=0) if len(bm) else np.zeros(D)
                mu = np.where(np.isfinite(mu), mu, 0.0) + config.init_jitter * rng.standard_normal(D)
                factor = 0.1 * np.sqrt(var)[:, None] * rng.standard_normal((D, R))
                epochs.append(EpochKernelParams(mu, factor, 0.5 * var, config.init_length_scale, 0.5 * var))
            row.append(TrajectoryModel(epochs, DurationParams.from_means(np.full(K, dbar), 2.0, config.t_max),
                                       InitialEpochDist(np.full(K, 1.0 / K))))
        trajectories.append(tuple(row))
    Rz = np.eye(G)[labels]
    W = _fit_gating(Y, Rz, np.zeros((G, Y.shape[1])), config.gating_l2)
    return labels, trajectories, GatingParams(W)


# ---------------------------------------------------------------------------
# M-step pieces


def _gating_q(W, Y, R) -> float:
    return float(np.sum(R * log_softmax(Y @ W.T, axis=1)))


def _fit_gating(Y, R, W0, l2: float, maxiter: int = 200) -> np.ndarray:
    G, F = W0.shape
    if G == 1:
        return np.zeros((1, F))

    def f(x):
        W = np.vstack([np.zeros((1, F)), x.reshape(G - 1, F)])
        A = Y @ W.T
        ls = log_softmax(A, axis=1)
        P = np.exp(ls)
        val = -np.sum(R * ls) + 0.5 * l2 * np.sum(x * x)
        g = ((P - R).T @ Y)[1:].ravel() + l2 * x
        return val, g

    res = minimize(f, W0[1:].ravel(), jac=True, method="L-BFGS-B", options={"maxiter": maxiter})
    return np.vstack([np.zeros((1, F)), res.x.reshape(G - 1, F)])


def _duration_q(r, p, h_pmf, h_surv, t_max) -> float:
    lp, ls = nb_log_tables(r, p, t_max)
    return float(np.dot(h_pmf, lp[0]) + np.dot(h_surv, ls[0]))


def _fit_duration(r0: float, p0: float, h_pmf, h_surv, t_max: int) -> tuple[float, float]:
    if h_pmf.sum() + h_surv.sum() <= 1e-12:
        return r0, p0
    cands = [(r0, p0)]
    w = h_pmf.sum()
    if w > 1e-12:
        T = np.arange(1, t_max + 1)
        mu = float(np.dot(h_pmf, T) / w) - 1.0
        var = float(np.dot(h_pmf, (T - 1 - mu) ** 2) / w)
        mu = max(mu, 1e-3)
        if var > mu * (1 + 1e-6):
            p = mu / var
            cands.append((mu * p / (1 - p), p))
        else:
            cands.append((100.0, 100.0 / (100.0 + mu)))
    lo, hi = np.log([1e-2, 1e3]), 15.0

    def f(x):
        r, p = math.exp(x[0]), 1.0 / (1.0 + math.exp(-x[1]))
        return -_duration_q(r, p, h_pmf, h_surv, t_max)

    scored = []
    for r, p in cands:
        p = min(max(p, 1e-6), 1 - 1e-6)
        r = min(max(r, 1e-2), 1e3)
        scored.append((f([math.log(r), math.log(p / (1 - p))]), r, p))
    best = min(scored, key=lambda s: s[0])
    x0 = [math.log(best[1]), math.log(best[2] / (1 - best[2]))]
    res = minimize(f, x0, method="L-BFGS-B", bounds=[(lo[0], lo[1]), (-hi, hi)], options={"maxiter": 50})
    base = f([math.log(r0), math.log(p0 / (1 - p0))])
    if res.fun <= best[0] and res.fun <= base:
        return math.exp(res.x[0]), 1.0 / (1.0 + math.exp(-res.x[1]))
    if best[0] <= base:
        return best[1], best[2]
    return r0, p0


def _trim(bank: WindowBank, c: np.ndarray, tol: float) -> tuple[WindowBank, np.ndarray] | None:
    """Keep only windows (and window prefixes) carrying weight above ``tol``."""
    off = bank.cum_off
    pos = np.arange(bank.cum_size) - np.repeat(off[:-1], bank.win_len + 1)
    marked = np.where(c > tol, pos + 1, 0)
    m_eff = np.maximum.reduceat(marked, off[:-1]) if bank.n_windows else np.zeros(0, np.int64)
    keep = np.flatnonzero(m_eff > 0)
    if len(keep) == 0:
        return None
    m2 = m_eff[keep]
    off2 = np.zeros(len(keep) + 1, dtype=np.int64)
    np.cumsum(m2 + 1, out=off2[1:])
    src = np.repeat(off[keep], m2 + 1) + (np.arange(off2[-1]) - np.repeat(off2[:-1], m2 + 1))
    c2 = c[src]
    c2[off2[1:] - 1] = 0.0
    sub = WindowBank(bank.stream, bank.time, bank.value, bank.win_start[keep], m2)
    return sub, c2


def _fit_kernel(ep: EpochKernelParams, bank: WindowBank, c: np.ndarray, config: EMConfig) -> EpochKernelParams:
    """Raise the weighted window objective for one epoch.

    The search runs on a coarsely pruned surrogate; the step is kept only if
    the finely pruned objective improves.
    """
    exact = _trim(bank, c, config.window_prune)
    if exact is None:
        return ep
    coarse = _trim(bank, c, config.surrogate_prune) if config.surrogate_prune > config.window_prune else exact
    if coarse is None:
        coarse = exact
    D, R = ep.D, ep.rank
    il = D + D * R + D
    bounds = [(None, None)] * n_unconstrained(D, R)
    bounds[il] = tuple(np.log(LENGTH_SCALE_BOUNDS))

    def objective(sub, cs):
        def f(theta):
            try:
                p = EpochKernelParams.from_unconstrained(theta, D, R)
                F, gm, gc, gl, gn = window_objective(sub, p, cs, threads=config.threads)
                val, grad = -F, -gradient_to_unconstrained(p, gm, gc, gl, gn)
            except (NumericalError, ValueError, FloatingPointError):
                return 1e300, np.zeros_like(theta)
            if not np.isfinite(val) or not np.all(np.isfinite(grad)):
                return 1e300, np.zeros_like(theta)
            return val, grad
        return f

    theta0 = ep.to_unconstrained()
    theta0[il] = np.clip(theta0[il], *bounds[il])
    res = minimize(objective(*coarse), theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxfun": config.inner_maxfun, "maxiter": config.inner_maxfun})
    f_exact = objective(*exact)
    if f_exact(res.x)[0] < f_exact(ep.to_unconstrained())[0]:
        return EpochKernelParams.from_unconstrained(res.x, D, R)
    return ep


def _m_step(params: ModelParams, data, resp, joint, config: EMConfig) -> ModelParams:
    G, K = params.G, params.K
    new_traj = []
    for v, cd in enumerate(data):
        row = []
        cums = joint[v][1]
        for z in range(G):
            m = params.model(v, z)
            w = np.ascontiguousarray(resp[v][:, z])
            _, st = batch_statistics(cd.batch, m, cums[z], config.end_aligned, w, prune=config.prune,
                                     threads=config.threads)
            # initial epoch: closed form
            start = st.start.sum(axis=0)
            initial = InitialEpochDist.normalized(start) if start.sum() > 0 else m.initial
            q_old = float(np.dot(start, np.where(start > 0, m.initial.log_probs(), 0.0)))
            q_new = float(np.dot(start, np.where(start > 0, initial.log_probs(), 0.0)))
            if not q_new >= q_old:
                initial = m.initial
            # durations
            h_pmf = st.pmf_hist.sum(axis=0)
            h_surv = st.surv_hist.sum(axis=0)
            rp = [_fit_duration(float(m.durations.r[k]), float(m.durations.p[k]), h_pmf[k], h_surv[k], m.t_max)
                  for k in range(K)]
            durations = DurationParams([a for a, _ in rp], [b for _, b in rp], m.t_max)
            # kernels
            epochs = [_fit_kernel(m.epochs[k], cd.batch.bank, st.c[k], config) for k in range(K)]
            row.append(TrajectoryModel(epochs, durations, initial))
        new_traj.append(tuple(row))
    Y = np.vstack([cd.Y for cd in data])
    Rz = np.vstack(resp)
    W_old = params.gating.W
    W_new = _fit_gating(Y, Rz, W_old, config.gating_l2)
    if not _gating_q(W_new, Y, Rz) >= _gating_q(W_old, Y, Rz):
        W_new = W_old
    return replace(params, trajectories=tuple(new_traj), gating=GatingParams(W_new))


# ---------------------------------------------------------------------------
# EM driver


def em_fit(train: Cohort, G: int, K: int, config: EMConfig | None = None) -> tuple[ModelParams, FitReport]:
    """Generalized EM over phenotypes and segmentations, with the outcome label observed."""
    config = (config or EMConfig()).validate()
    if G < 1 or K < 1:
        raise ValueError("G and K must be >= 1")
    if len(train) == 0:
        raise ValueError("training cohort is empty")
    labels = train.labels()
    n1 = int(labels.sum())
    n0 = len(labels) - n1
    if n0 == 0 or n1 == 0:
        raise ValueError("training cohort needs both outcome classes")
    D = train.D
    R = min(config.rank, D)
    std = StreamStandardizer.fit(train.patients, D)
    enc = StaticEncoder(train.vocabulary).fit([r.profile for r in train])
    Y = enc.transform([r.profile for r in train])
    data = _prepare(train, std, Y, K, config.t_max, config.end_aligned)
    obs_by_class = [[std.observations(train.patients[i]) for i in cd.index] for cd in data]
    _, trajectories, gating = _initialize(train, data, obs_by_class, Y, G, K, D, R, config, std, enc)
    params = ModelParams(
        trajectories=tuple(trajectories),
        gating=gating,
        prior_icu=n1 / len(labels),
        vocabulary=train.vocabulary,
        age_mean=enc.age_mean_,
        age_scale=enc.age_scale_,
        standardizer=std,
        streams=train.streams,
    )
    report = FitReport(seed=config.seed, G=G, K=K)

    def e_step(p):
        joint = _class_log_liks(p, data, config.end_aligned, config.threads)
        ll, resp = _observed_total(joint, (n0, n1), p.prior_icu)
        return ll, resp, joint

    try:
        ll, resp, joint = e_step(params)
    except NumericalError as exc:
        raise NumericalError(f"initial E-step failed: {exc}") from None
    report.trace.append(ll)
    for it in range(1, config.max_iter + 1):
        candidate = _m_step(params, data, resp, joint, config)
        try:
            ll_new, resp_new, joint_new = e_step(candidate)
        except NumericalError as exc:
            raise NumericalError(f"E-step failed at iteration {it}: {exc}") from None
        report.n_iter = it
        if ll_new < ll:
            # safeguard against pruning round-off: keep the previous parameters
            report.reverted = True
            report.rejected_gain = ll_new - ll
            report.converged = True
            log.info("EM iteration %d decreased the log likelihood (%.6g); stopping", it, ll_new - ll)
            break
        gain = ll_new - ll
        params, ll, resp, joint = candidate, ll_new, resp_new, joint_new
        report.trace.append(ll)
        log.debug("EM iteration %d: log likelihood %.6f", it, ll)
        if gain <= config.tol * abs(ll):
            report.converged = True
            break
    return params, report


@dataclass
class SelectionResult:
    best: tuple[int, int]
    params: ModelParams
    report: FitReport
    table: dict  # (G, K) -> BIC

    def table_rows(self) -> list[dict]:
        return [{"G": g, "K": k, "bic": b} for (g, k), b in sorted(self.table.items())]


def select_model(train: Cohort, G_range: Sequence[int], K_range: Sequence[int],
                 config: EMConfig | None = None) -> SelectionResult:
    """Fit every (G, K) with the same seed and keep the lowest BIC.

    All candidates share one ``t_max`` so their likelihoods stay comparable.
    It is raised above ``config.t_max`` only when the smallest K could not
    otherwise span the longest training stay.
    """
    config = config or EMConfig()
    G_range, K_range = list(G_range), list(K_range)
    if not G_range or not K_range:
        raise ValueError("empty G or K range")
    longest = max((_slots(r, config.end_aligned) for r in train), default=1)
    need = -(-longest // min(K_range))
    if need > config.t_max:
        log.warning("raising t_max from %d to %d so K=%d covers a %d h stay", config.t_max, need, min(K_range), longest)
        config = replace(config, t_max=need)
    table = {}
    best = None
    for G in G_range:
        for K in K_range:
            params, report = em_fit(train, G, K, config)
            score = bic(params, train, report.trace[-1])
            table[(G, K)] = score
            log.info("G=%d K=%d BIC=%.3f", G, K, score)
            if best is None or score < best[0]:
                best = (score, (G, K), params, report)
    return SelectionResult(best[1], best[2], best[3], table)
