import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxmon.faults import (
    BLOCK_DROP,
    CARTESIAN_POSITION,
    DROPOFF_FAILURE,
    GRASPER_ANGLE,
    FailureEvent,
    FaultSpec,
    GridCell,
    InjectionError,
    OracleError,
    OracleParams,
    dtw_distance,
    failure_oracle,
    inject,
    inject_cartesian_fault,
    inject_grasper_fault,
    label_erroneous_gestures,
    run_campaign,
    table3_grid,
)
from ctxmon.kinematics import GRASPER, N_PER_ARM, N_FEATURES, Trajectory

from conftest import make_traj

RG = N_PER_ARM + GRASPER


def brute_dtw(a, b):
    """Minimum cost over every monotone alignment path, enumerated recursively."""
    a = [np.atleast_1d(np.asarray(x, float)) for x in a]
    b = [np.atleast_1d(np.asarray(x, float)) for x in b]
    n, m = len(a), len(b)
    best = math.inf

    def walk(i, j, acc):
        nonlocal best
        acc += float(np.linalg.norm(a[i] - b[j]))
        if i == n - 1 and j == m - 1:
            best = min(best, acc)
            return
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)

    walk(0, 0, 0.0)
    return best


# ---------------------------------------------------------------- injection


def test_grasper_ramp_reaches_target_after_70_samples():
    t = make_traj(200, fill=0.5)
    out = inject_grasper_fault(t, FaultSpec(GRASPER_ANGLE, 0.0, 1.0, 1.2, theta=0.01))
    g = out.data[:, RG]
    assert np.argmax(np.isclose(g, 1.2, atol=1e-12)) == 69  # 70th sample
    assert g[68] < 1.2
    assert np.all(g[69:] == 1.2)


def test_grasper_ramp_clamps_and_follows_sign():
    t = make_traj(20, fill=0.5)
    out = inject_grasper_fault(t, FaultSpec(GRASPER_ANGLE, 0.0, 0.5, 0.6, theta=1.0))
    assert out.data[0, RG] == 0.6
    down = inject_grasper_fault(t, FaultSpec(GRASPER_ANGLE, 0.0, 0.5, 0.3, theta=0.1))
    np.testing.assert_allclose(down.data[:3, RG], [0.4, 0.3, 0.3])


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 80), st.floats(0.0, 0.6), st.floats(0.05, 0.4), st.floats(0.0, 2.0),
       st.floats(0.0, 9000.0), st.integers(0, 1000))
def test_injection_is_local(T, start, dur, s_prime, delta, seed):
    data = np.random.default_rng(seed).normal(size=(T, N_FEATURES))
    t = Trajectory(data, 100.0)
    for spec in (FaultSpec(GRASPER_ANGLE, start, dur, s_prime, theta=0.01),
                 FaultSpec(CARTESIAN_POSITION, start, dur, delta, arm="L")):
        out = inject(t, spec)
        a, b = spec.window(T)
        outside = np.r_[0:a, b:T]
        assert out.data[outside].tobytes() == data[outside].tobytes()
        touched = set(np.flatnonzero((out.data != data).any(axis=0)))
        allowed = {RG} if spec.variable == GRASPER_ANGLE else {0, 1, 2}
        assert touched <= allowed


def test_window_outside_trajectory_raises():
    with pytest.raises(InjectionError):
        FaultSpec(GRASPER_ANGLE, 0.8, 0.3, 1.0)
    with pytest.raises(InjectionError):
        FaultSpec(GRASPER_ANGLE, 0.1, 0.3, 1.0, theta=0.0)
    with pytest.raises(InjectionError):
        FaultSpec(CARTESIAN_POSITION, 0.1, 0.3, -1.0)
    with pytest.raises(InjectionError):
        inject_grasper_fault(make_traj(10), FaultSpec(CARTESIAN_POSITION, 0.1, 0.3, 1.0))


def test_cartesian_offsets():
    t = make_traj(50)
    out = inject_cartesian_fault(t, FaultSpec(CARTESIAN_POSITION, 0.2, 0.5, 3000.0))
    a, b = FaultSpec(CARTESIAN_POSITION, 0.2, 0.5, 3000.0).window(50)
    end = out.data[b - 1, N_PER_ARM:N_PER_ARM + 3]
    np.testing.assert_allclose(end, 1732.05, atol=0.01)
    assert abs(np.linalg.norm(end - t.data[b - 1, N_PER_ARM:N_PER_ARM + 3]) - 3000.0) <= 3000.0 * 1e-6
    same = inject_cartesian_fault(t, FaultSpec(CARTESIAN_POSITION, 0.2, 0.5, 0.0))
    assert same.data.tobytes() == t.data.tobytes()


# ---------------------------------------------------------------- DTW


def test_dtw_examples():
    assert dtw_distance([1, 2, 3], [1, 2, 3]) == 0.0
    assert dtw_distance([1, 2, 3], [1, 2, 2, 3]) == 0.0
    assert dtw_distance([0, 0], [1, 1]) == 2.0
    with pytest.raises(ValueError):
        dtw_distance([], [1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6),
       st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_dtw_matches_brute_force(a, b):
    d = dtw_distance(a, b)
    assert d == pytest.approx(brute_dtw(a, b), abs=1e-9)
    assert d == pytest.approx(dtw_distance(b, a), abs=1e-9)
    assert d >= 0 and dtw_distance(a, a) == 0.0


def test_dtw_vector_points():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    assert dtw_distance(a, b) == pytest.approx(brute_dtw(a, b), abs=1e-9)


# ---------------------------------------------------------------- oracle


def _start_in(traj, gid, offset=1):
    seg = next(s for s in traj.segments if s.gesture_id == gid)
    return (seg.start_index + offset) / len(traj)


def test_wide_opening_during_carry_drops_block(demos):
    params = OracleParams()
    for d in demos:
        f0 = _start_in(d, 5)
        spec = FaultSpec(GRASPER_ANGLE, f0, 0.5, 1.55, theta=0.005)
        ev = failure_oracle(inject(d, spec), d, params)
        assert [e.kind for e in ev] == [BLOCK_DROP]
        assert ev[0].gesture_id in (5, 6)


def test_closed_grasper_through_drop_fails_dropoff(demos):
    params = OracleParams()
    for d in demos:
        f0 = _start_in(d, 6)
        spec = FaultSpec(GRASPER_ANGLE, f0, 1.0 - f0, 0.35, theta=0.005)
        ev = failure_oracle(inject(d, spec), d, params)
        assert [e.kind for e in ev] == [DROPOFF_FAILURE]
        assert ev[0].gesture_id == 11


def test_fault_free_has_no_events(demos):
    for d in demos:
        assert failure_oracle(d, d, OracleParams(dtw_threshold=1.0)) == []


def test_oracle_needs_annotations(demos):
    bare = demos[0].copy(segments=[])
    with pytest.raises(OracleError):
        failure_oracle(bare, demos[0], OracleParams())


def test_large_cartesian_deviation_fails_dropoff(demos):
    d = demos[0]
    spec = FaultSpec(CARTESIAN_POSITION, _start_in(d, 6), 0.4, 60000.0)
    ev = failure_oracle(inject(d, spec), d, OracleParams(dtw_threshold=500.0))
    assert [e.kind for e in ev] == [DROPOFF_FAILURE]


def test_block_drop_incidence_is_monotone_in_target(demos):
    params = OracleParams()
    grid = np.round(np.arange(0.3, 1.61, 0.1), 2)
    for d in demos[:4]:
        f0 = _start_in(d, 5)
        drops = [any(e.kind == BLOCK_DROP for e in
                     failure_oracle(inject(d, FaultSpec(GRASPER_ANGLE, f0, 0.5, s, theta=0.005)), d, params))
                 for s in grid]
        assert drops == sorted(drops)


# ---------------------------------------------------------------- labelling


def _five_segment():
    return make_traj(50, [(12, 0, 9), (2, 10, 19), (5, 20, 29), (6, 30, 39), (11, 40, 49)])


def test_labelling_marks_overlap():
    t = _five_segment()
    spec = FaultSpec(GRASPER_ANGLE, 0.5, 0.3, 1.5)  # starts at sample 25, inside G5
    out = label_erroneous_gestures(t, spec, [FailureEvent(BLOCK_DROP, 350.0, 6, 35)])
    assert [s.gesture_id for s in out.segments if s.unsafe] == [5, 6]
    assert out.segments[3].error_codes == [BLOCK_DROP]


def test_labelling_without_events_marks_nothing():
    out = label_erroneous_gestures(_five_segment(), FaultSpec(GRASPER_ANGLE, 0.5, 0.3, 1.5), [])
    assert not any(s.unsafe for s in out.segments)


def test_event_on_boundary_sample_belongs_to_inclusive_segment():
    t = _five_segment()
    spec = FaultSpec(GRASPER_ANGLE, 0.5, 0.1, 1.5)  # sample 25, inside G5
    out = label_erroneous_gestures(t, spec, [FailureEvent(BLOCK_DROP, 290.0, 5, 29)])
    assert [s.gesture_id for s in out.segments if s.unsafe] == [5]
    assert out.segments[2].error_codes == [BLOCK_DROP]
    out = label_erroneous_gestures(t, spec, [FailureEvent(BLOCK_DROP, 300.0, 6, 30)])
    assert [s.gesture_id for s in out.segments if s.unsafe] == [5, 6]
    assert out.segments[2].error_codes == [] and out.segments[3].error_codes == [BLOCK_DROP]


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 0.7), st.floats(0.05, 0.3), st.integers(0, 49))
def test_labelling_soundness(start, dur, ev_idx):
    t = _five_segment()
    spec = FaultSpec(GRASPER_ANGLE, start, dur, 1.5)
    out = label_erroneous_gestures(t, spec, [FailureEvent(BLOCK_DROP, ev_idx * 10.0, 0, ev_idx)])
    a, b = spec.window(50)
    for seg in out.segments:
        if seg.unsafe:
            hits_fault = seg.start_index < b and seg.end_index >= a
            hits_event = seg.contains(ev_idx)
            spans = min(a, ev_idx) <= seg.end_index and seg.start_index <= ev_idx
            assert hits_fault or hits_event or spans


# ---------------------------------------------------------------- campaigns


def test_empty_grid_gives_empty_result(demos):
    res = run_campaign([], demos, seed=0, params=OracleParams())
    assert res.counts == [] and res.runs == []


def test_campaign_determinism_and_counts(tmp_path, demos):
    cells = table3_grid(3)
    a = run_campaign(cells, demos, 11, OracleParams(), out_dir=tmp_path / "a")
    b = run_campaign(cells, demos, 11, OracleParams())
    assert a.counts == b.counts
    assert [r.events for r in a.runs] == [r.events for r in b.runs]
    for c in a.counts:
        assert c["n_blockdrop"] <= c["n_injections"] and c["n_dropoff"] <= c["n_injections"]
        assert c["n_failed"] <= c["n_injections"]
    a.write_report(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0][-3:] == ["n_injections", "n_blockdrop", "n_dropoff"]
    assert len(rows) == len(cells) + 1
    assert all(r.path and r.path.endswith(".csv") for r in a.runs)


def test_high_target_cell_drops_often(demos):
    cell = GridCell((1.5, 1.6), (0.55, 0.70), (3000.0, 6000.0), (0.50, 0.60), 20)
    res = run_campaign([cell], demos, 5, OracleParams())
    assert res.rates(0)["blockdrop"] >= 0.85
