"""Alarm metrics over score traces, ablation baselines and the synthetic benchmark."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np
from scipy.special import logsumexp

from .cohort import Cohort, PatientRecord
from .mixture import EMConfig, ModelParams, em_fit, gating_log_probabilities
from .scoring import ScoreTrace, posterior_risk, score_cohort
from .trajectory import aligned_slots

__all__ = [
    "AlarmOutcome",
    "MetricCurve",
    "DEFAULT_GRID",
    "DISCHARGE_LOWER",
    "apply_threshold",
    "roc_curve",
    "timeliness_curve",
    "dual_threshold_eval",
    "lead_dominates",
    "timeliness_frontier",
    "TIMELINESS_OFFSETS",
    "snapshot_baseline",
    "snapshot_cohort",
    "fit_stationary",
    "stationary_baseline",
    "BenchmarkResult",
    "run_benchmark",
    "benchmark_report",
    "write_curve_csv",
    "write_curve_svg",
    "write_report_json",
    "pr_auc",
    "evaluate_traces",
]

DEFAULT_GRID = np.linspace(0.0, 1.0, 201)
DISCHARGE_LOWER = (0.01, 0.05, 0.2)


@dataclass(frozen=True)
class AlarmOutcome:
    patient_id: str
    label: int
    alarmed: bool
    alarm_time: float | None
    endpoint_time: float | None
    discharged: bool = False

    def __post_init__(self):
        if self.alarm_time is not None and self.endpoint_time is not None and self.alarm_time > self.endpoint_time + 1e-9:
            raise ValueError("alarm after the endpoint")


@dataclass(frozen=True, eq=False)
class MetricCurve:
    """Operating points ordered by threshold; ``ppv`` is NaN where no alarm fired."""

    thresholds: np.ndarray
    tpr: np.ndarray
    ppv: np.ndarray
    lead: np.ndarray | None = None
    auc: float | None = None

    def __post_init__(self):
        for name in ("thresholds", "tpr", "ppv"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.lead is not None:
            object.__setattr__(self, "lead", np.asarray(self.lead, dtype=float))
        if len(self.thresholds) > 1 and np.any(np.diff(self.thresholds) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        if np.any((self.tpr < 0) | (self.tpr > 1)):
            raise ValueError("TPR outside [0, 1]")
        ok = ~np.isnan(self.ppv)
        if np.any((self.ppv[ok] < 0) | (self.ppv[ok] > 1)):
            raise ValueError("PPV outside [0, 1]")

    def __len__(self):
        return len(self.thresholds)

    def rows(self) -> list[dict]:
        out = []
        for i in range(len(self)):
            row = {"threshold": float(self.thresholds[i]), "tpr": float(self.tpr[i]),
                   "ppv": None if np.isnan(self.ppv[i]) else float(self.ppv[i])}
            if self.lead is not None:
                row["lead_hours"] = None if np.isnan(self.lead[i]) else float(self.lead[i])
            out.append(row)
        return out

    def equals(self, other: "MetricCurve") -> bool:
        return (np.array_equal(self.thresholds, other.thresholds) and np.array_equal(self.tpr, other.tpr)
                and np.array_equal(self.ppv, other.ppv, equal_nan=True) and self.auc == other.auc)


def _labels(traces: Sequence[ScoreTrace], labels) -> np.ndarray:
    if labels is None:
        labels = [t.label for t in traces]
    y = np.asarray(labels)
    if len(y) != len(traces) or not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0/1, one per trace")
    return y.astype(np.int64)


def _first_crossings(traces, upper: float, lower: float | None):
    """Per patient: (alarm time or None, discharged flag) under the first-crossing rule."""
    out = []
    for tr in traces:
        up = np.flatnonzero(tr.risk >= upper)
        first_up = up[0] if len(up) else None
        first_dn = None
        if lower is not None:
            dn = np.flatnonzero(tr.risk < lower)
            first_dn = dn[0] if len(dn) else None
        if first_up is not None and (first_dn is None or first_up < first_dn):
            out.append((float(tr.times[first_up]), False))
        else:
            out.append((None, first_dn is not None))
    return out


def _confusion(traces, y, upper, lower=None):
    cross = _first_crossings(traces, upper, lower)
    alarmed = np.array([c[0] is not None for c in cross])
    tp = int(np.sum(alarmed & (y == 1)))
    fp = int(np.sum(alarmed & (y == 0)))
    return tp, fp, cross


def apply_threshold(traces: Sequence[ScoreTrace], threshold: float, labels=None):
    """Latching alarm at the first time the risk reaches ``threshold``; returns (TPR, PPV or None, outcomes)."""
    if not traces:
        raise ValueError("no traces")
    y = _labels(traces, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("TPR needs at least one positive patient")
    tp, fp, cross = _confusion(traces, y, threshold)
    outcomes = [AlarmOutcome(tr.patient_id, int(v), c[0] is not None, c[0], tr.endpoint_time)
                for tr, v, c in zip(traces, y, cross)]
    ppv = tp / (tp + fp) if tp + fp else None
    return tp / n_pos, ppv, outcomes


def _grid(traces, grid) -> np.ndarray:
    if grid is None:
        grid = np.concatenate([DEFAULT_GRID, [t.max_risk for t in traces]])
    g = np.unique(np.asarray(grid, dtype=float))
    return g


def pr_auc(tpr: np.ndarray, ppv: np.ndarray) -> float:
    """Trapezoid area under PPV as a function of TPR (ties in TPR keep the best PPV)."""
    ok = ~np.isnan(ppv)
    t, p = tpr[ok], ppv[ok]
    if len(t) == 0:
        return 0.0
    ut = np.unique(t)
    best = np.array([p[t == u].max() for u in ut])
    if ut[0] > 0:
        ut = np.concatenate([[0.0], ut])
        best = np.concatenate([[best[0]], best])
    if len(ut) == 1:
        return 0.0
    return float(np.sum(np.diff(ut) * 0.5 * (best[1:] + best[:-1])))


def _sweep(traces, y, grid, lower=None) -> MetricCurve:
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("curve needs at least one positive patient")
    # first crossing index per patient per threshold, vectorized over the grid
    tpr = np.empty(len(grid))
    ppv = np.empty(len(grid))
    first_up = _first_index_table(traces, grid, upper=True)
    if lower is not None:
        dn = np.array([np.flatnonzero(tr.risk < lower)[0] if np.any(tr.risk < lower) else np.iinfo(np.int64).max
                       for tr in traces])
        alarmed = first_up < dn[:, None]
    else:
        alarmed = first_up < np.iinfo(np.int64).max
    tp = (alarmed & (y[:, None] == 1)).sum(axis=0)
    fp = (alarmed & (y[:, None] == 0)).sum(axis=0)
    tpr = tp / n_pos
    with np.errstate(invalid="ignore", divide="ignore"):
        ppv = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), np.nan)
    if np.any(np.diff(tpr) > 0):
        raise AssertionError("TPR increased with the threshold")
    return MetricCurve(grid, tpr, ppv, None, pr_auc(tpr, ppv))


def _first_index_table(traces, grid, upper=True, offset: float = 0.0) -> np.ndarray:
    """``out[i, g]`` = first event index with risk >= grid[g] (int64 max when never).

    With ``offset > 0`` only events at least that many hours before the endpoint count.
    """
    big = np.iinfo(np.int64).max
    out = np.full((len(traces), len(grid)), big, dtype=np.int64)
    for i, tr in enumerate(traces):
        risk = tr.risk
        if offset > 0:
            risk = risk[: np.searchsorted(tr.times, tr.endpoint_time - offset + 1e-9, side="right")]
            if len(risk) == 0:
                continue
        run_max = np.maximum.accumulate(risk)
        idx = np.searchsorted(run_max, grid, side="left")
        hit = idx < len(run_max)
        out[i, hit] = idx[hit]
    return out


def roc_curve(traces: Sequence[ScoreTrace], labels=None, grid=None) -> MetricCurve:
    """TPR and PPV swept over thresholds, with the area under PPV(TPR)."""
    y = _labels(traces, labels)
    return _sweep(traces, y, _grid(traces, grid))


def timeliness_curve(traces: Sequence[ScoreTrace], labels=None, target_tpr: float = 0.5, grid=None,
                     offset: float = 0.0) -> MetricCurve:
    """PPV and median lead time (endpoint minus first alarm) at thresholds within one patient of ``target_tpr``.

    ``offset`` hides the last hours of every stay, forcing earlier alarms.
    """
    y = _labels(traces, labels)
    grid = _grid(traces, grid)
    n_pos = int(y.sum())
    if offset > 0 and any(t.endpoint_time is None for t in traces):
        raise ValueError("offsets need endpoint times")
    first = _first_index_table(traces, grid, offset=offset)
    big = np.iinfo(np.int64).max
    keep, tprs, ppvs, leads = [], [], [], []
    for g, thr in enumerate(grid):
        alarmed = first[:, g] < big
        tp_mask = alarmed & (y == 1)
        tp = int(tp_mask.sum())
        fp = int((alarmed & (y == 0)).sum())
        if abs(tp - target_tpr * n_pos) > 1 or tp == 0:
            continue
        lead = [traces[i].endpoint_time - traces[i].times[first[i, g]] for i in np.flatnonzero(tp_mask)]
        keep.append(thr)
        tprs.append(tp / n_pos)
        ppvs.append(tp / (tp + fp))
        leads.append(float(np.median(lead)))
    if not keep:
        raise ValueError(f"no threshold reaches TPR {target_tpr} within one patient")
    return MetricCurve(keep, tprs, ppvs, leads, None)


def dual_threshold_eval(traces: Sequence[ScoreTrace], lower: float, labels=None, upper_grid=None) -> MetricCurve:
    """Discharge at the first risk below ``lower``, alarm at the first risk at or above each upper threshold."""
    y = _labels(traces, labels)
    grid = _grid(traces, upper_grid)
    if upper_grid is None:
        grid = grid[grid > lower]
    if len(grid) == 0 or lower >= grid.min():
        raise ValueError("lower threshold must lie below every upper threshold")
    return _sweep(traces, y, grid, lower=lower)


TIMELINESS_OFFSETS = tuple(float(h) for h in range(25))


def timeliness_frontier(traces: Sequence[ScoreTrace], labels=None, target_tpr: float = 0.5,
                        offsets=TIMELINESS_OFFSETS, grid=None) -> list[tuple[float, MetricCurve]]:
    """Timeliness curves with the last ``offset`` hours hidden: earlier alarms traded for PPV."""
    out = []
    for off in offsets:
        try:
            out.append((float(off), timeliness_curve(traces, labels, target_tpr, grid, offset=off)))
        except ValueError:
            continue
    if not out:
        raise ValueError(f"no offset reaches TPR {target_tpr}")
    return out


def _points(curves) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(curves, MetricCurve):
        curves = [(0.0, curves)]
    ppv = np.concatenate([c.ppv for _, c in curves])
    lead = np.concatenate([c.lead for _, c in curves])
    return ppv, lead


def lead_dominates(full, base) -> bool:
    """True when every baseline point is beaten on lead time by a full-model point with at least its PPV.

    Either side may be one timeliness curve or a frontier of them.
    """
    f_ppv, f_lead = _points(full)
    b_ppv, b_lead = _points(base)
    for p_b, l_b in zip(b_ppv, b_lead):
        if not np.any((f_ppv >= p_b - 1e-12) & (f_lead > l_b)):
            return False
    return True


# ---------------------------------------------------------------------------
# baselines


def _snapshot_loglik(params: ModelParams, lg: np.ndarray, latest: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class log likelihoods of rows of latest standardized values (NaN where unseen)."""
    seen = ~np.isnan(latest)
    x = np.where(seen, latest, 0.0)
    out = []
    for v in (0, 1):
        terms = []
        for z in range(params.G):
            ep = params.model(v, z).epochs[0]
            var = np.diag(ep.task_cov) + ep.noise
            ll = -0.5 * ((x - ep.mean) ** 2 / var + np.log(2 * np.pi * var))
            terms.append(lg[z] + np.sum(np.where(seen, ll, 0.0), axis=1))
        out.append(logsumexp(np.stack(terms, axis=1), axis=1))
    return out[0], out[1]


def snapshot_baseline(params: ModelParams, record: PatientRecord, prior_icu: float | None = None) -> ScoreTrace:
    """Memoryless score: Bayes posterior of the latest value per stream, each treated as an independent draw.

    Uses the per-stream marginal (task variance plus noise) of a single-epoch model.
    """
    if params.K != 1:
        raise ValueError("the snapshot baseline needs single-epoch (K = 1) parameters")
    p1 = params.prior_icu if prior_icu is None else prior_icu
    if record.n_events == 0:
        return ScoreTrace(record.id, [0.0], [p1], record.outcome, record.endpoint_time)
    lg = gating_log_probabilities(params.encode([record.profile])[0], params.gating)
    z = params.standardizer.transform(record.streams, record.values)
    latest = np.full((record.n_events, params.D), np.nan)
    cur = np.full(params.D, np.nan)
    for j, (s, val) in enumerate(zip(record.streams, z)):
        cur[s] = val
        latest[j] = cur
    l0, l1 = _snapshot_loglik(params, lg, latest)
    risk = [posterior_risk(a, b, p1) for a, b in zip(l0, l1)]
    return ScoreTrace(record.id, record.times.copy(), risk, record.outcome, record.endpoint_time)


def snapshot_cohort(params: ModelParams, cohort: Cohort) -> list[ScoreTrace]:
    return [snapshot_baseline(params, r) for r in cohort]


def fit_stationary(train: Cohort, config: EMConfig | None = None) -> ModelParams:
    """The one-size-fits-all ablation: one phenotype, one epoch.

    A single epoch must span whole stays, so its duration support is widened
    to twice the longest training stay when ``config.t_max`` is shorter.
    """
    config = config or EMConfig()
    longest = max((aligned_slots(r.endpoint_time, r.times) for r in train), default=1)
    t_max = max(config.t_max, 2 * longest)
    return em_fit(train, 1, 1, dataclasses.replace(config, t_max=t_max))[0]


def stationary_baseline(model: ModelParams | Cohort, record: PatientRecord, config: EMConfig | None = None) -> ScoreTrace:
    """Sequential scoring under a G = 1, K = 1 model (trained here when given a cohort)."""
    from .scoring import score_trajectory

    params = fit_stationary(model, config) if isinstance(model, Cohort) else model
    if params.G != 1 or params.K != 1:
        raise ValueError("the stationary baseline needs G = 1, K = 1 parameters")
    return score_trajectory(params, record)


# ---------------------------------------------------------------------------
# benchmark


METHODS = ("full", "stationary", "snapshot")


@dataclass
class BenchmarkResult:
    seed: int
    roc: dict = field(default_factory=dict)  # method -> MetricCurve
    timeliness: dict = field(default_factory=dict)  # method -> MetricCurve | None
    discharge: dict = field(default_factory=dict)  # (method, lower) -> MetricCurve

    def auc(self, method: str) -> float:
        return self.roc[method].auc

    def report(self) -> dict:
        return benchmark_report(self)


def _timeliness_or_none(traces):
    try:
        return timeliness_curve(traces)
    except ValueError:
        return None


def evaluate_traces(traces_by_method: dict, seed: int = 0) -> BenchmarkResult:
    res = BenchmarkResult(seed)
    for name, traces in traces_by_method.items():
        res.roc[name] = roc_curve(traces)
        res.timeliness[name] = _timeliness_or_none(traces)
        for lo in DISCHARGE_LOWER:
            res.discharge[(name, lo)] = dual_threshold_eval(traces, lo)
    return res


def run_benchmark(train: Cohort, test: Cohort, G: int, K: int, config: EMConfig | None = None,
                  threads: int | None = None, full: ModelParams | None = None,
                  stationary: ModelParams | None = None) -> tuple[BenchmarkResult, dict]:
    """Train the full model and the stationary ablation, score the test cohort with all three methods."""
    config = config or EMConfig()
    if full is None:
        full = em_fit(train, G, K, config)[0]
    if stationary is None:
        stationary = fit_stationary(train, config)
    traces = {
        "full": score_cohort(full, test, threads),
        "stationary": score_cohort(stationary, test, threads),
        "snapshot": snapshot_cohort(stationary, test),
    }
    return evaluate_traces(traces, config.seed), {"full": full, "stationary": stationary}


def _num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


def benchmark_report(res: BenchmarkResult) -> dict:
    """Rows of metrics, one column per method."""
    rows = {"AUC (ICU admission)": {m: _num(res.roc[m].auc) for m in res.roc}}
    for lo in DISCHARGE_LOWER:
        rows[f"AUC (Discharge at {lo:g})"] = {m: _num(res.discharge[(m, lo)].auc) for m in res.roc}
    lead_row, ppv_row = {}, {}
    for m, curve in res.timeliness.items():
        if curve is None:
            lead_row[m] = ppv_row[m] = None
            continue
        i = int(np.argmax(curve.ppv))
        lead_row[m] = _num(curve.lead[i])
        ppv_row[m] = _num(curve.ppv[i])
    rows["Median lead time at TPR 50% (h)"] = lead_row
    rows["PPV at TPR 50%"] = ppv_row
    return {"seed": res.seed, "columns": list(res.roc), "rows": rows}


# ---------------------------------------------------------------------------
# export


def write_curve_csv(curve: MetricCurve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["threshold", "tpr", "ppv"] + (["lead_hours"] if curve.lead is not None else [])
        w.writerow(header)
        for row in curve.rows():
            w.writerow(["" if row[h] is None else repr(row[h]) for h in header])


def write_curve_svg(curve: MetricCurve, path, title: str = "", x: str = "tpr", y: str = "ppv") -> None:
    """Self-contained line plot of one curve (no plotting library needed)."""
    xs = getattr(curve, x)
    ys = getattr(curve, y) if y != "lead" else curve.lead
    ok = ~(np.isnan(xs) | np.isnan(ys))
    xs, ys = xs[ok], ys[ok]
    order = np.argsort(xs, kind="stable")
    xs, ys = xs[order], ys[order]
    W, H, pad = 420, 320, 48
    x_hi = max(1.0, float(xs.max()) if len(xs) else 1.0) if x != "lead" else float(xs.max() if len(xs) else 1.0)
    y_hi = 1.0 if y != "lead" else max(1.0, float(ys.max()) if len(ys) else 1.0)

    def px(v):
        return pad + (W - 2 * pad) * v / x_hi

    def py(v):
        return H - pad - (H - 2 * pad) * v / y_hi

    pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xs, ys))
    label = title + (f" (AUC {curve.auc:.3f})" if curve.auc is not None else "")
    svg = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-size="12">{escape(x.upper())}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {H / 2})">'
        f"{escape(y.upper())}</text>",
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="13">{escape(label)}</text>',
        f'<text x="{pad}" y="{H - pad + 14}" font-size="10" text-anchor="middle">0</text>',
        f'<text x="{W - pad}" y="{H - pad + 14}" font-size="10" text-anchor="middle">{x_hi:g}</text>',
        f'<text x="{pad - 6}" y="{pad + 4}" font-size="10" text-anchor="end">{y_hi:g}</text>',
        f'<polyline fill="none" stroke="#1f5fa8" stroke-width="2" points="{pts}"/>',
        "</svg>",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(svg) + "\n")


def write_report_json(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
