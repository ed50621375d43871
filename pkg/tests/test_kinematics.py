import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxmon.kinematics import (
    ALL,
    CG,
    CSV_HEADER,
    FEATURE_NAMES,
    N_FEATURES,
    ConfigurationError,
    FeatureSubset,
    GestureSegment,
    KinematicsSample,
    KinematicsScaler,
    NormStats,
    ParseError,
    SlidingWindowSpec,
    Trajectory,
    TrajectoryError,
    load_trajectory,
    load_transcription,
    save_trajectory,
    select_features,
    window_array,
    windows,
    zscore_normalize,
)

from conftest import make_traj


def _write_rows(path, rows, header=FEATURE_NAMES):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- loading


def test_three_rows_at_30hz_get_derived_timestamps(tmp_path):
    p = tmp_path / "t.csv"
    _write_rows(p, [[float(i)] * N_FEATURES for i in range(3)])
    t = load_trajectory(p, sample_rate_hz=30.0)
    assert len(t) == 3
    np.testing.assert_allclose(t.t_ms, [0.0, 33.333333, 66.666667], atol=1e-5)


def test_transcription_line_becomes_segment(tmp_path):
    p = tmp_path / "tr.txt"
    p.write_text("130 202 G2\n203 400 G3\n")
    segs = load_transcription(p)
    assert segs[0].gesture_id == 2 and segs[0].start_index == 130 and segs[0].end_index == 202
    assert len(segs) == 2


def test_transcription_overlap_is_structural_error(tmp_path):
    p = tmp_path / "tr.txt"
    p.write_text("10 20 G1\n15 30 G2\n")
    with pytest.raises(TrajectoryError):
        load_transcription(p)


def test_empty_file_is_structural_error(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(TrajectoryError):
        load_trajectory(p, sample_rate_hz=30.0)
    p.write_text(",".join(FEATURE_NAMES) + "\n")
    with pytest.raises(TrajectoryError):
        load_trajectory(p, sample_rate_hz=30.0)


def test_malformed_rows_report_row_number(tmp_path):
    p = tmp_path / "m.csv"
    _write_rows(p, [[0.0] * N_FEATURES, [0.0] * (N_FEATURES - 1)])
    with pytest.raises(ParseError) as exc:
        load_trajectory(p, sample_rate_hz=30.0)
    assert exc.value.row == 3
    _write_rows(p, [[0.0] * N_FEATURES, ["x"] + [0.0] * (N_FEATURES - 1)])
    with pytest.raises(ParseError, match="row 3"):
        load_trajectory(p, sample_rate_hz=30.0)


def test_non_monotone_timestamps_rejected(tmp_path):
    p = tmp_path / "n.csv"
    _write_rows(p, [[0.0] + [0.0] * N_FEATURES, [10.0] + [0.0] * N_FEATURES, [10.0] + [0.0] * N_FEATURES],
                header=["t_ms", *FEATURE_NAMES])
    with pytest.raises(TrajectoryError):
        load_trajectory(p)


def test_explicit_timestamp_column_sets_rate(tmp_path):
    p = tmp_path / "ts.csv"
    _write_rows(p, [[10.0 * i] + [0.0] * N_FEATURES for i in range(4)], header=["t_ms", *FEATURE_NAMES])
    t = load_trajectory(p)
    assert t.sample_rate_hz == pytest.approx(100.0)
    np.testing.assert_array_equal(t.t_ms, [0.0, 10.0, 20.0, 30.0])


def test_jigsaws_rows_map_slave_columns(tmp_path):
    rows = np.arange(3 * 76, dtype=float).reshape(3, 76)
    kin = tmp_path / "k.txt"
    kin.write_text("\n".join(" ".join(f"{v:.1f}" for v in r) for r in rows) + "\n")
    tr = tmp_path / "tr.txt"
    tr.write_text("0 2 G1\n")
    t = load_trajectory(kin, "jigsaws", transcription=tr)
    assert t.sample_rate_hz == 30.0 and t.source == "jigsaws"
    # left slave block starts at column 38: pos, rot, then the gripper stored last in JIGSAWS
    np.testing.assert_array_equal(t.data[0, 0:12], rows[0, 38:50])
    assert t.data[0, 12] == rows[0, 56]
    np.testing.assert_array_equal(t.data[0, 13:19], rows[0, 50:56])
    assert t.data[0, 19 + 12] == rows[0, 75]
    assert t.segments[0].gesture_id == 1


def test_unknown_format_is_configuration_error(tmp_path):
    p = tmp_path / "x.csv"
    _write_rows(p, [[0.0] * N_FEATURES])
    with pytest.raises(ConfigurationError):
        load_trajectory(p, format="hdf5")


def test_trajectory_invariants():
    with pytest.raises(TrajectoryError):
        make_traj(10, [(2, 0, 5), (5, 5, 9)])
    with pytest.raises(TrajectoryError):
        make_traj(10, [(2, 0, 10)])
    with pytest.raises(TrajectoryError):
        GestureSegment(2, 5, 4)
    with pytest.raises(TrajectoryError):
        Trajectory(np.zeros((3, 37)), 30.0)


def test_sample_view_fields():
    row = np.arange(N_FEATURES, dtype=float)
    s = KinematicsSample(0.0, row)
    np.testing.assert_array_equal(s.position("L"), [0, 1, 2])
    assert s.rotation("R").shape == (3, 3)
    assert s.grasper_angle("R") == 31.0
    np.testing.assert_array_equal(s.angular_velocity("L"), [16, 17, 18])
    row[12] = np.nan
    with pytest.raises(TrajectoryError):
        KinematicsSample(0.0, row)


# ---------------------------------------------------------------- round trip


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2 ** 32 - 1))
def test_csv_round_trip_is_bit_exact(tmp_path_factory, T, seed):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(T, N_FEATURES)) * 10.0 ** rng.integers(-8, 8, size=(T, N_FEATURES))
    cut = int(rng.integers(0, T))
    segs = [GestureSegment(2, 0, cut, True, ["BlockDrop"])]
    if cut + 1 < T:
        segs.append(GestureSegment(5, cut + 1, T - 1))
    t = Trajectory(data, 47.0, segs, name="rt", group="B", meta={"k": [1, 2]})
    p = tmp_path_factory.mktemp("rt") / "rt.csv"
    save_trajectory(t, p)
    u = load_trajectory(p)
    assert u.data.tobytes() == t.data.tobytes()
    assert [s.to_dict() for s in u.segments] == [s.to_dict() for s in t.segments]
    assert (u.sample_rate_hz, u.group, u.meta) == (47.0, "B", {"k": [1, 2]})


def test_csv_header_and_labels(tmp_path):
    t = make_traj(4, [(12, 0, 1), (2, 2, 3, True)])
    p = save_trajectory(t, tmp_path / "h.csv")
    lines = p.read_text().splitlines()
    assert lines[0].split(",") == CSV_HEADER
    assert lines[3].endswith(",2,1")
    # labels alone (no sidecar) rebuild the segments
    (tmp_path / "h.meta.json").unlink()
    u = load_trajectory(p)
    assert [(s.gesture_id, s.start_index, s.end_index, s.unsafe) for s in u.segments] == \
        [(12, 0, 1, False), (2, 2, 3, True)]


# ---------------------------------------------------------------- windows and subsets


def test_window_counts():
    t = make_traj(100)
    assert len(list(windows(t, SlidingWindowSpec(5, 1), ALL))) == 96
    assert len(list(windows(make_traj(10), SlidingWindowSpec(10, 1), CG))) == 1
    assert list(windows(make_traj(4), SlidingWindowSpec(5, 1), CG)) == []


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.integers(1, 15), st.integers(1, 7))
def test_window_count_formula(T, w, s):
    spec = SlidingWindowSpec(w, s)
    X = np.arange(T * 2, dtype=float).reshape(T, 2)
    W, starts = window_array(X, spec)
    expected = (T - w) // s + 1 if T >= w else 0
    assert len(W) == len(starts) == expected == spec.count(T)
    for k, st_ in enumerate(starts):
        np.testing.assert_array_equal(W[k], X[st_:st_ + w])


def test_windows_are_consecutive_projected_samples():
    rng = np.random.default_rng(0)
    t = Trajectory(rng.normal(size=(12, N_FEATURES)), 100.0)
    out = list(windows(t, SlidingWindowSpec(4, 3), CG))
    assert [s for s, _ in out] == [0, 3, 6]
    np.testing.assert_array_equal(out[1][1], t.data[3:7][:, list(CG.indices)].ravel())


def test_feature_subset_sizes_and_order():
    assert len(CG) == 8 and len(ALL) == 38 and len(FeatureSubset.named("CRG")) == 26
    assert CG.indices == (0, 1, 2, 12, 19, 20, 21, 31)
    rot = FeatureSubset.named("R")
    row = np.arange(N_FEATURES, dtype=float)
    assert len(select_features(row, rot)) == 18
    np.testing.assert_array_equal(select_features(KinematicsSample(0.0, row), CG), CG.indices)
    assert FeatureSubset.coerce("C,G") == CG
    with pytest.raises(ConfigurationError):
        FeatureSubset.custom([0, 38])
    with pytest.raises(ConfigurationError):
        FeatureSubset.custom([1, 1])
    with pytest.raises(ConfigurationError):
        FeatureSubset.named("XYZ")


def test_window_spec_rejects_nonpositive():
    with pytest.raises(ConfigurationError):
        SlidingWindowSpec(0, 1)
    with pytest.raises(ConfigurationError):
        SlidingWindowSpec(3, 0)


# ---------------------------------------------------------------- normalisation


def test_zscore_constant_column_and_moments():
    rng = np.random.default_rng(1)
    a = Trajectory(rng.normal(5.0, 3.0, size=(200, N_FEATURES)), 100.0)
    b = Trajectory(rng.normal(-2.0, 0.5, size=(150, N_FEATURES)), 100.0)
    a.data[:, 7] = 4.2
    b.data[:, 7] = 4.2
    out, stats = zscore_normalize([a, b])
    X = np.concatenate([t.data for t in out])
    assert np.all(X[:, 7] == 0.0)
    cols = [c for c in range(N_FEATURES) if c != 7]
    np.testing.assert_allclose(X[:, cols].mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(X[:, cols].std(axis=0), 1.0, atol=1e-6)
    # stats from training data are reused on test data
    test_out, same = zscore_normalize([b], stats)
    assert same is stats
    np.testing.assert_array_equal(test_out[0].data, out[1].data)


def test_zscore_identity_stats():
    t = Trajectory(np.random.default_rng(2).normal(size=(5, N_FEATURES)), 100.0)
    out, _ = zscore_normalize([t], NormStats(np.zeros(N_FEATURES), np.ones(N_FEATURES)))
    np.testing.assert_array_equal(out[0].data, t.data)
    with pytest.raises(TrajectoryError):
        zscore_normalize([])


def test_scaler_is_a_transformer():
    X = np.random.default_rng(3).normal(2.0, 4.0, size=(50, 10, 8))
    sc = KinematicsScaler().fit(X)
    Z = sc.transform(X)
    np.testing.assert_allclose(Z.reshape(-1, 8).mean(axis=0), 0.0, atol=1e-9)
    with pytest.raises(ConfigurationError):
        sc.transform(X[..., :7])
