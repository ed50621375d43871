"""LOSO folds, the synthetic end-to-end corpus and the two-stage experiment runner."""
from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .classifiers import GestureClassifier, train_error_detectors
from .faults import (
    CARTESIAN_POSITION,
    GRASPER,
    GRASPER_ANGLE,
    FaultSpec,
    OracleParams,
    calibrate_dtw_threshold,
    run_one,
)
from .kinematics import FeatureSubset, SlidingWindowSpec, Trajectory, arm_offset, load_trajectory
from .metrics import ConfusionCounts, confusion_metrics, roc_curve
from .monitor import MODES, AlertTiming, MonitorReport, evaluate_pipeline, pooled_sample_auc, reaction_summary
from .simulator import OPERATOR_STYLES, SimParams, generate_block_transfer
from .utils import derive_seed

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- folds


@dataclass
class Fold:
    test_group: str
    train: np.ndarray
    test: np.ndarray


def make_loso_folds(corpus: Sequence[Trajectory] | Sequence[str]) -> list[Fold]:
    """One fold per distinct group; each fold tests exactly that group."""
    groups = [t if isinstance(t, str) else t.group for t in corpus]
    if any(g is None or g == "" for g in groups):
        raise ValueError("every trajectory needs a group id for LOSO folds")
    uniq = sorted(set(groups))
    if len(uniq) < 2:
        raise ValueError("LOSO needs at least two groups")
    g = np.asarray(groups)
    return [Fold(u, np.flatnonzero(g != u), np.flatnonzero(g == u)) for u in uniq]


def load_corpus(directory, format="csv", sample_rate_hz=None) -> list[Trajectory]:
    """Every trajectory in ``directory``, ordered by file name.

    ``csv`` reads the canonical files written by :func:`save_trajectory`.
    ``jigsaws`` expects the dataset layout (``kinematics/AllGestures`` and
    ``transcriptions``); demos without a transcription are skipped and the
    group is the super-trial number, the last digit of the trial id.
    """
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory not found: {d}")
    if format == "csv":
        paths = sorted(p for p in d.glob("*.csv"))
        corpus = [load_trajectory(p, "csv") for p in paths]
    elif format == "jigsaws":
        kin = d / "kinematics" / "AllGestures"
        tra = d / "transcriptions"
        corpus = []
        for p in sorted(kin.glob("*.txt")):
            t_path = tra / p.name
            if not t_path.exists():
                continue
            t = load_trajectory(p, "jigsaws", sample_rate_hz=sample_rate_hz, transcription=t_path)
            m = re.search(r"(\d+)$", p.stem)
            t.group = str(int(m.group(1)) % 10) if m else ""
            corpus.append(t)
    else:
        raise ValueError(f"unknown corpus format {format!r}")
    if not corpus:
        raise FileNotFoundError(f"no trajectories found in {d}")
    return corpus


# ---------------------------------------------------------------- end-to-end corpus


@dataclass
class E2EFaultMix:
    """Scenario mix for the end-to-end corpus.

    Every fault starts shortly after the onset of its target gesture and
    persists to the end of that gesture, so the perturbation is visible in
    the gesture it makes unsafe.
    """

    p_blockdrop: float = 0.50
    p_dropoff: float = 0.50
    p_cartesian: float = 0.0
    onset_fraction: tuple = (0.0, 0.0)
    open_target: tuple = (1.0, 1.6)
    closed_target: tuple = (0.3, 0.4)
    cart_delta: tuple = (20000.0, 40000.0)
    theta: float = 0.005
    # logged kinematics of an injected set-point still carry sensor noise
    measurement_noise: bool = True


@dataclass
class E2EConfig:
    n_demos: int = 100
    fault_fraction: float = 0.5
    operators: tuple = ("A", "B")
    seed: int = 0
    sample_rate_hz: float = 100.0
    arm: str = "R"
    mix: E2EFaultMix = field(default_factory=E2EFaultMix)
    window: int = 10
    detector_subset: str = "CG"
    gesture_subset: str = "All"
    gesture_params: dict = field(default_factory=lambda: {
        "subset": "All", "mode": "stateful", "window": 5, "lstm_units": (64, 32), "fc_units": 32, "lr": 3e-3,
        "batch_size": 4, "max_epochs": 30, "patience": 10,
    })
    detector_params: dict = field(default_factory=lambda: {
        "kind": "conv", "filters": (32, 16), "kernel": 5, "lstm_units": (16, 8), "fc_units": (16, 8),
        "dropout": 0.2, "lr": 1e-3, "batch_size": 64, "max_epochs": 30, "patience": 5, "class_weight": None,
    })
    min_samples: int = 50
    boundary_margin: int = 0
    persistence_k: int = 3
    threshold: float = 0.5
    dtw_calibration_demos: int = 20

    def to_dict(self):
        return asdict(self)


def _segment(traj, gid):
    return next(s for s in traj.segments if s.gesture_id == gid)


def draw_e2e_fault(traj: Trajectory, rng: np.random.Generator, mix: E2EFaultMix, arm="R"):
    """One scenario for ``traj``: ``(kind, [FaultSpec])``."""
    T = len(traj)
    kind = rng.choice(["blockdrop", "dropoff", "cartesian"], p=[mix.p_blockdrop, mix.p_dropoff, mix.p_cartesian])
    if kind == "blockdrop":
        seg = _segment(traj, int(rng.choice([5, 6])))
    else:
        seg = _segment(traj, 11)
    n = len(seg)
    start = seg.start_index + int(rng.uniform(*mix.onset_fraction) * n)
    frac = start / T
    dur = (seg.end_index + 1 - start) / T
    if kind == "blockdrop":
        spec = FaultSpec(GRASPER_ANGLE, frac, dur, float(rng.uniform(*mix.open_target)), theta=mix.theta, arm=arm)
    elif kind == "dropoff":
        spec = FaultSpec(GRASPER_ANGLE, frac, dur, float(rng.uniform(*mix.closed_target)), theta=mix.theta, arm=arm)
    else:
        spec = FaultSpec(CARTESIAN_POSITION, frac, dur, float(rng.uniform(*mix.cart_delta)), arm=arm)
    return str(kind), [spec]


def add_measurement_noise(traj: Trajectory, specs: Sequence[FaultSpec], sigma: float,
                          rng: np.random.Generator) -> Trajectory:
    """Gaussian noise on the grasper channel inside every grasper-fault window.

    Labels and metadata are untouched; Cartesian faults already ride on the
    noisy recorded positions and are left alone.
    """
    out = traj.copy()
    for spec in specs:
        if spec.variable != GRASPER_ANGLE:
            continue
        a, b = spec.window(len(traj))
        col = arm_offset(spec.arm) + GRASPER
        out.data[a:b, col] += rng.normal(0.0, sigma, b - a)
    return out


def sim_params(cfg: E2EConfig, i: int) -> SimParams:
    """Simulator parameters of demo ``i``; operators alternate."""
    op = cfg.operators[i % len(cfg.operators)]
    return SimParams(seed=derive_seed(cfg.seed, "demo", i), operator=op, sample_rate_hz=cfg.sample_rate_hz,
                     active_arm=cfg.arm)


def simulate_corpus(cfg: E2EConfig) -> list[Trajectory]:
    return [generate_block_transfer(sim_params(cfg, i)) for i in range(cfg.n_demos)]


def build_e2e_corpus(cfg: E2EConfig, oracle: OracleParams | None = None, base=None):
    """Simulate ``n_demos`` demonstrations, inject faults into a fixed fraction
    and label them with the failure oracle.

    ``base`` replaces the simulated fault-free demos when given.  Returns
    ``(corpus, info)``; ``info`` lists the scenario of every demo.
    """
    base = simulate_corpus(cfg) if base is None else list(base)
    n = len(base)
    oracle = oracle or OracleParams(arm=cfg.arm)
    if oracle.dtw_threshold is None:
        oracle.dtw_threshold = calibrate_dtw_threshold(
            base[:cfg.dtw_calibration_demos], oracle, SimParams().noise["position"], seed=derive_seed(cfg.seed, "dtw"))
    rng = np.random.default_rng(derive_seed(cfg.seed, "faults"))
    faulted = set(rng.choice(n, int(round(cfg.fault_fraction * n)), replace=False).tolist())
    corpus, info = [], []
    for i, t in enumerate(base):
        if i not in faulted:
            corpus.append(t)
            info.append({"demo": t.name, "scenario": "none", "events": []})
            continue
        kind, specs = draw_e2e_fault(t, np.random.default_rng(derive_seed(cfg.seed, "fault", i)), cfg.mix, oracle.arm)
        labeled, events = run_one(t, specs, oracle)
        if cfg.mix.measurement_noise:
            sigma = SimParams().noise["grasper"] * OPERATOR_STYLES[t.group][1]
            labeled = add_measurement_noise(labeled, specs, sigma, np.random.default_rng(derive_seed(cfg.seed, "meas", i)))
        corpus.append(labeled)
        info.append({"demo": t.name, "scenario": kind, "events": [e.kind for e in events]})
    return corpus, {"dtw_threshold": oracle.dtw_threshold, "demos": info}


# ---------------------------------------------------------------- runner


def pool_reports(reports: Sequence[MonitorReport], mode: str) -> dict:
    """Aggregate per-fold reports by pooling gesture-level outcomes."""
    scores, labels, counts, timings, acc_hits, acc_tot = [], [], ConfusionCounts(), [], 0.0, 0
    samples = []
    for r in reports:
        samples.extend(r.sample_scores)
        a = r.aggregate
        counts = counts + ConfusionCounts(a["tp"], a["fp"], a["tn"], a["fn"])
        scores.extend(s["score"] for s in r.segments)
        labels.extend(s["unsafe"] for s in r.segments)
        timings.extend(r.timings)
        if r.gesture_accuracy is not None:
            n = sum(d.get("n_labelled", 0) for d in r.per_demo)
            acc_hits += r.gesture_accuracy * n
            acc_tot += n
    roc = roc_curve(scores, labels) if scores else None
    react = [t["reaction_t"] for t in timings]
    pos = sum(1 for v in react if v is not None and v > 0)
    return {
        "mode": mode,
        **counts.to_dict(),
        **confusion_metrics(counts),
        "AUC": pooled_sample_auc(samples),
        "AUC_gesture": None if roc is None else roc.auc,
        "reaction": reaction_summary([AlertTiming(**t) for t in timings]),
        "early_detection_pct": 100.0 * pos / len(react) if react else None,
        "gesture_accuracy": acc_hits / acc_tot if acc_tot else None,
    }


def run_e2e(cfg: E2EConfig, corpus=None, modes=MODES, keep_models=False):
    """LOSO-by-operator two-stage experiment.

    For each fold the gesture classifier and detector library are trained
    on the training operators and every mode is evaluated on the held-out
    operator.  Returns a dict with per-fold and pooled results.
    """
    if corpus is None:
        corpus, _ = build_e2e_corpus(cfg)
    folds = make_loso_folds(corpus)
    out = {"folds": [], "pooled": {}, "models": []}
    per_mode = {m: [] for m in modes}
    for k, fold in enumerate(folds):
        train = [corpus[i] for i in fold.train]
        test = [corpus[i] for i in fold.test]
        gparams = dict(cfg.gesture_params)
        gparams["subset"] = cfg.gesture_subset
        gparams["seed"] = derive_seed(cfg.seed, "gesture", k)
        clf = GestureClassifier(**gparams).fit(train)
        lib = train_error_detectors(train, SlidingWindowSpec(cfg.window, 1), FeatureSubset.coerce(cfg.detector_subset),
                                    cfg.detector_params, cfg.min_samples, derive_seed(cfg.seed, "detectors", k),
                                    gesture_model=clf, boundary_margin=cfg.boundary_margin)
        lib.threshold = cfg.threshold
        lib.persistence_k = cfg.persistence_k
        fold_out = {"test_group": fold.test_group, "n_train": len(train), "n_test": len(test), "reports": {}}
        for m in modes:
            rep = evaluate_pipeline(lib, test, m)
            per_mode[m].append(rep)
            fold_out["reports"][m] = rep
        out["folds"].append(fold_out)
        if keep_models:
            out["models"].append(lib)
    out["pooled"] = {m: pool_reports(per_mode[m], m) for m in modes}
    return out
