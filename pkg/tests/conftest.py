import time

import numpy as np
import pytest

from ctxmon.classifiers import GestureClassifier, train_error_detectors
from ctxmon.experiment import E2EConfig, build_e2e_corpus, run_e2e
from ctxmon.kinematics import CG, N_FEATURES, GestureSegment, SlidingWindowSpec, Trajectory
from ctxmon.simulator import SimParams, generate_block_transfer

# criterion id -> (passed, detail); printed at the end of the session
ACCEPTANCE = {}

TINY_GESTURE = {"lstm_units": (16,), "fc_units": 16, "lr": 1e-2, "batch_size": 4, "max_epochs": 8, "patience": 4}
TINY_DETECTOR = {"kind": "conv", "filters": (8, 4), "kernel": 3, "fc_units": (8,), "lr": 3e-3,
                 "batch_size": 64, "max_epochs": 4, "patience": 3, "class_weight": None}


def record(criterion, passed, detail=""):
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0]), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


def make_traj(T=40, segments=None, rate=100.0, fill=0.0, **kw):
    """Constant trajectory with optional (gesture, start, end[, unsafe]) segments."""
    segs = [GestureSegment(*s) for s in (segments or [])]
    return Trajectory(np.full((T, N_FEATURES), fill), rate, segs, **kw)


@pytest.fixture(scope="session")
def demos():
    """Eight fault-free demonstrations, four per operator style."""
    return [generate_block_transfer(SimParams(seed=100 + i, operator="AB"[i % 2])) for i in range(8)]


@pytest.fixture(scope="session")
def small_corpus():
    cfg = E2EConfig(n_demos=12, seed=3)
    corpus, info = build_e2e_corpus(cfg)
    return corpus, info


@pytest.fixture(scope="session")
def small_library(small_corpus):
    corpus, _ = small_corpus
    clf = GestureClassifier(**TINY_GESTURE, seed=1).fit(corpus)
    lib = train_error_detectors(corpus, SlidingWindowSpec(10, 1), CG, TINY_DETECTOR, min_samples=50, seed=2,
                                gesture_model=clf)
    return lib


@pytest.fixture(scope="session")
def e2e():
    """The default desk-scale end-to-end experiment (100 demos, LOSO by operator)."""
    cfg = E2EConfig()
    t0 = time.perf_counter()
    corpus, info = build_e2e_corpus(cfg)
    res = run_e2e(cfg, corpus, keep_models=True)
    res["runtime_s"] = time.perf_counter() - t0
    res["corpus"] = corpus
    res["info"] = info
    return res
