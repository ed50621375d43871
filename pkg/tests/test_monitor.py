import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxmon.classifiers import ShapeError
from ctxmon.faults import BLOCK_DROP
from ctxmon.kinematics import GestureSegment, N_FEATURES
from ctxmon.monitor import (
    MODES,
    AlertTiming,
    MonitorAlert,
    PersistenceFilter,
    StreamingMonitor,
    early_detection_pct,
    evaluate_pipeline,
    gesture_level_aggregate,
    reaction_time,
    run_monitor,
    run_monitor_batch,
    write_alert_log,
)

from conftest import make_traj


# ---------------------------------------------------------------- gesture-level rule


def test_one_hot_sample_makes_gesture_unsafe():
    scores = np.zeros(500)
    scores[123] = 0.9
    seg_scores, pred = gesture_level_aggregate(scores, [GestureSegment(5, 0, 499)])
    assert pred.tolist() == [True] and seg_scores[0] == 0.9
    _, pred = gesture_level_aggregate(np.full(500, 0.49), [GestureSegment(5, 0, 499)])
    assert pred.tolist() == [False]


def test_unscored_samples_are_ignored():
    scores = np.full(10, np.nan)
    scores[2] = 0.7
    segs = [GestureSegment(1, 0, 4), GestureSegment(2, 5, 9)]
    seg_scores, pred = gesture_level_aggregate(scores, segs)
    assert seg_scores.tolist() == [0.7, 0.0] and pred.tolist() == [True, False]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=20, max_size=20), st.floats(0, 1), st.floats(0, 1))
def test_threshold_sweep_is_monotone(scores, t1, t2):
    lo, hi = sorted((t1, t2))
    segs = [GestureSegment(g, 4 * g, 4 * g + 3) for g in range(5)]
    _, p_lo = gesture_level_aggregate(scores, segs, lo)
    _, p_hi = gesture_level_aggregate(scores, segs, hi)
    assert np.all(p_hi <= p_lo)


# ---------------------------------------------------------------- timing


def _timed(onset_idx=None):
    t = make_traj(300, [(5, 0, 99), (6, 100, 299, True)], rate=100.0)
    if onset_idx is not None:
        t.meta["injection_start_index"] = onset_idx
    return t


def test_reaction_time_sign_convention():
    t = _timed()  # actual = segment onset at 1000 ms
    late = MonitorAlert(1057.0, 6, 0.9, 105, 100)
    recs = reaction_time([late], t)
    assert recs[0].actual_t == 1000.0 and recs[0].reaction_t == -57.0
    t2 = _timed(onset_idx=250)  # actual 2500 ms
    early = MonitorAlert(2000.0, 6, 0.9, 200, 191 + 9)
    assert reaction_time([early], t2)[0].reaction_t == 500.0
    for r in recs:
        assert r.reaction_t == r.actual_t - r.detected_t


def test_reaction_time_first_alert_wins_and_misses():
    t = _timed()
    alerts = [MonitorAlert(1500.0, 6, 0.9, 150, 141), MonitorAlert(1200.0, 6, 0.9, 120, 111),
              MonitorAlert(500.0, 5, 0.9, 50, 41)]
    recs = reaction_time(alerts, t)
    assert len(recs) == 1 and recs[0].detected_t == 1200.0
    miss = reaction_time([], t)
    assert miss[0].detected_t is None and miss[0].reaction_t is None
    # injection onset before the segment clips to the segment start
    assert reaction_time([], _timed(onset_idx=10))[0].actual_t == 1000.0


def test_early_detection_percentage():
    def rec(v):
        return AlertTiming("d", 6, 0.0, None if v is None else -v, v)

    assert early_detection_pct([rec(5.0), rec(-3.0)]) == 50.0
    assert early_detection_pct([rec(-1.0), rec(None)]) == 0.0
    assert early_detection_pct([]) is None


def test_persistence_filter():
    f = PersistenceFilter(3)
    out = [f.push(x) for x in [1, 1, 2, 2, 1, 2, 2, 2, 3]]
    assert out == [1, 1, 1, 1, 1, 1, 1, 2, 2]


# ---------------------------------------------------------------- streaming


@pytest.fixture(scope="module")
def probe_demos(small_corpus):
    corpus, info = small_corpus
    return [corpus[0], corpus[1], next(t for t in corpus if any(s.unsafe for s in t.segments))]


@pytest.mark.parametrize("mode", MODES)
def test_stream_equals_batch(small_library, probe_demos, mode):
    for t in probe_demos:
        s = run_monitor(small_library, t, mode)
        b = run_monitor_batch(small_library, t, mode)
        assert s.scores.tobytes() == b.scores.tobytes()
        assert np.array_equal(s.routed, b.routed) and np.array_equal(s.predicted, b.predicted)
        assert s.provenance == b.provenance
        assert s.alerts == b.alerts


def test_no_lookahead_on_prefixes(small_library, probe_demos):
    t = probe_demos[2]
    full = run_monitor(small_library, t, "predicted_gestures")
    w = small_library.window.w
    for cut in (w, 137, len(t) // 2):
        part = run_monitor(small_library, t.copy(data=t.data[:cut], segments=[]), "predicted_gestures")
        n_win = cut - w + 1
        assert part.scores[:n_win].tobytes() == full.scores[:n_win].tobytes()
        assert part.alerts == [a for a in full.alerts if a.sample_index < cut]


def test_incremental_push(small_library, probe_demos):
    t = probe_demos[0]
    mon = StreamingMonitor(small_library, "ground_truth_gestures", t.sample_rate_hz)
    lab = t.gesture_labels()
    ref = run_monitor_batch(small_library, t, "ground_truth_gestures")
    w = small_library.window.w
    for i, row in enumerate(t.data[:60]):
        r = mon.push(row, lab[i])
        if i < w - 1:
            assert r.score is None and r.window_start is None
        else:
            assert r.window_start == i - w + 1 and r.score == ref.scores[i - w + 1]
    with pytest.raises(ShapeError):
        mon.push(np.zeros(N_FEATURES - 1))


def test_mode_validation(small_library):
    with pytest.raises(ValueError):
        StreamingMonitor(small_library, "oracle")


def test_report_is_deterministic(tmp_path, small_library, small_corpus):
    corpus, _ = small_corpus
    a = evaluate_pipeline(small_library, corpus[:3], "predicted_gestures")
    b = evaluate_pipeline(small_library, corpus[:3], "predicted_gestures")
    ja = json.dumps(a.to_dict(), sort_keys=True)
    assert ja == json.dumps(b.to_dict(), sort_keys=True)
    assert a.table(include_latency=False) == b.table(include_latency=False)
    assert 0 <= (a.early_detection_pct or 0) <= 100
    assert "latency_ms_mean" not in a.to_dict() and a.latency_ms_mean > 0
    write_alert_log(a.alerts, tmp_path / "alerts.csv")
    rows = list(csv.reader(open(tmp_path / "alerts.csv")))
    assert rows[0] == ["demo", "sample_index", "t_ms", "gesture", "score"] and len(rows) == len(a.alerts) + 1


# ---------------------------------------------------------------- end to end


def _fold_demo_traces(e2e, mode="predicted_gestures"):
    """``(demo, scenario, trace, lib)`` for every held-out demo, using its fold's models."""
    scen = {d["demo"]: d for d in e2e["info"]["demos"]}
    by_name = {t.name: t for t in e2e["corpus"]}
    for fold, lib in zip(e2e["folds"], e2e["models"]):
        rep = fold["reports"][mode]
        for row in rep.per_demo:
            t = by_name[row["demo"]]
            yield t, scen[t.name], rep, lib


@pytest.mark.slow
def test_fault_free_demos_rarely_alert(e2e):
    flagged = total = 0
    for t, info, rep, _ in _fold_demo_traces(e2e):
        if info["scenario"] != "none":
            continue
        segs = [s for s in rep.segments if s["demo"] == t.name]
        flagged += sum(s["score"] >= rep.threshold for s in segs)
        total += len(segs)
    assert total > 0
    assert flagged / total <= 0.15


@pytest.mark.slow
def test_block_drop_demos_alert_inside_unsafe_span(e2e):
    n = 0
    for t, info, rep, _ in _fold_demo_traces(e2e):
        if BLOCK_DROP not in info["events"]:
            continue
        n += 1
        spans = [(s.start_index, s.end_index) for s in t.segments if s.unsafe]
        hits = [a for a in rep.alerts if a["demo"] == t.name
                and any(lo <= a["window_start"] <= hi for lo, hi in spans)]
        assert hits, t.name
    assert n > 0
