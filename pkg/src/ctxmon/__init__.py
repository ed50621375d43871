"""Context-aware safety monitoring for robot-assisted surgery kinematics.

A gesture classifier supplies the operational context; per-gesture error
detectors score sliding windows of kinematics and raise alerts.
"""
__version__ = "0.1.0"

from .classifiers import DetectorLibrary, ErrorDetector, GestureClassifier, train_error_detectors  # noqa: E402
from .config import ConfigError, ExperimentConfig  # noqa: E402
from .experiment import E2EConfig, build_e2e_corpus, load_corpus, make_loso_folds, run_e2e  # noqa: E402
from .faults import FaultSpec, dtw_distance, failure_oracle, inject, run_campaign  # noqa: E402
from .kinematics import FeatureSubset, GestureSegment, SlidingWindowSpec, Trajectory, load_trajectory  # noqa: E402
from .metrics import js_divergence, roc_auc  # noqa: E402
from .monitor import StreamingMonitor, evaluate_pipeline, run_monitor  # noqa: E402
from .simulator import SimParams, generate_block_transfer  # noqa: E402
from .task_model import MarkovChain, estimate_markov  # noqa: E402

__all__ = [
    "DetectorLibrary", "ErrorDetector", "GestureClassifier", "train_error_detectors",
    "ConfigError", "ExperimentConfig",
    "E2EConfig", "build_e2e_corpus", "load_corpus", "make_loso_folds", "run_e2e",
    "FaultSpec", "dtw_distance", "failure_oracle", "inject", "run_campaign",
    "FeatureSubset", "GestureSegment", "SlidingWindowSpec", "Trajectory", "load_trajectory",
    "js_divergence", "roc_auc",
    "StreamingMonitor", "evaluate_pipeline", "run_monitor",
    "SimParams", "generate_block_transfer",
    "MarkovChain", "estimate_markov",
]
