"""Early-warning risk scores from ward vital-sign trajectories.

A mixture of phenotype-specific, piecewise-stationary multi-task Gaussian
process trajectories, trained by EM and scored online with Bayes' rule.
"""
from .cohort import Cohort, PatientRecord, StaticProfile, StreamSpec, Vocabulary, parse_cohort, write_cohort
from .estimator import WardRiskClassifier
from .evaluation import dual_threshold_eval, roc_curve, run_benchmark, timeliness_curve
from .kernel import EpochKernelParams
from .likelihood import NumericalError
from .mixture import EMConfig, FitReport, ModelParams, bic, em_fit, select_model
from .persistence import load_model, save_model
from .scoring import observe, open_session, score_cohort, score_trajectory
from .simulator import SimConfig, sample_cohort

__version__ = "0.1.0"

__all__ = [
    "Cohort",
    "PatientRecord",
    "StaticProfile",
    "StreamSpec",
    "Vocabulary",
    "parse_cohort",
    "write_cohort",
    "WardRiskClassifier",
    "dual_threshold_eval",
    "roc_curve",
    "run_benchmark",
    "timeliness_curve",
    "EpochKernelParams",
    "NumericalError",
    "EMConfig",
    "FitReport",
    "ModelParams",
    "bic",
    "em_fit",
    "select_model",
    "load_model",
    "save_model",
    "observe",
    "open_session",
    "score_cohort",
    "score_trajectory",
    "SimConfig",
    "sample_cohort",
]
