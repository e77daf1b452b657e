"""A scikit-learn style face over training and scoring.

Inputs are cohorts (or sequences of patient records) rather than feature
matrices, so this plays with ``get_params``/``clone`` but not with pipelines
that expect arrays.
"""
from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .cohort import Cohort, PatientRecord
from .mixture import EMConfig, bic, em_fit, observed_log_likelihood
from .scoring import score_cohort

__all__ = ["WardRiskClassifier"]


def _as_cohort(X, like: Cohort | None = None) -> Cohort:
    if isinstance(X, Cohort):
        return X
    records = tuple(X)
    if not all(isinstance(r, PatientRecord) for r in records):
        raise TypeError("expected a Cohort or a sequence of PatientRecord")
    if like is None:
        return Cohort(records)
    return Cohort(records, like.streams, like.vocabulary)


class WardRiskClassifier(ClassifierMixin, BaseEstimator):
    """Phenotype-mixture trajectory model with the outcome posterior as its score.

    ``predict_proba`` reports the risk after the last event of each record.
    """

    def __init__(self, n_phenotypes: int = 2, n_epochs: int = 3, rank: int = 3, t_max: int = 168,
                 max_iter: int = 100, tol: float = 1e-4, seed: int = 0, threshold: float = 0.5,
                 threads: int | None = None):
        self.n_phenotypes = n_phenotypes
        self.n_epochs = n_epochs
        self.rank = rank
        self.t_max = t_max
        self.max_iter = max_iter
        self.tol = tol
        self.seed = seed
        self.threshold = threshold
        self.threads = threads

    def _config(self) -> EMConfig:
        names = {f.name for f in fields(EMConfig)}
        kw = {k: v for k, v in self.get_params().items() if k in names}
        return EMConfig(**kw)

    def fit(self, X, y=None):
        cohort = _as_cohort(X)
        if y is not None and not np.array_equal(np.asarray(y), cohort.labels()):
            raise ValueError("y disagrees with the outcome labels stored in the records")
        self.params_, self.fit_report_ = em_fit(cohort, self.n_phenotypes, self.n_epochs, self._config())
        self.classes_ = np.array([0, 1])
        self.streams_ = cohort.streams
        self.vocabulary_ = cohort.vocabulary
        return self

    def _check(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("WardRiskClassifier is not fitted")

    def score_traces(self, X):
        self._check()
        return score_cohort(self.params_, _as_cohort(X, self._like()), self.threads)

    def _like(self) -> Cohort:
        return Cohort((), self.streams_, self.vocabulary_)

    def predict_proba(self, X) -> np.ndarray:
        risk = np.array([tr.risk[-1] for tr in self.score_traces(X)])
        return np.column_stack([1.0 - risk, risk])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(np.int64)

    def log_likelihood(self, X) -> float:
        self._check()
        return observed_log_likelihood(self.params_, _as_cohort(X, self._like()), threads=self.threads)

    def bic(self, X) -> float:
        self._check()
        return bic(self.params_, _as_cohort(X, self._like()))
