"""Trajectory data model, CSV/JIGSAWS ingestion and windowing.

A trajectory is stored as a dense ``(T, 38)`` float64 matrix.  Each arm
contributes 19 columns in a fixed order: position (3), rotation matrix
(9, row-major), grasper angle (1), linear velocity (3), angular velocity (3).
Left arm columns come first.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

N_PER_ARM = 19
N_FEATURES = 2 * N_PER_ARM
ARMS = ("L", "R")

_FIELD_NAMES = (
    ["px", "py", "pz"]
    + [f"r{i}{j}" for i in range(1, 4) for j in range(1, 4)]
    + ["ga", "vx", "vy", "vz", "wx", "wy", "wz"]
)
FEATURE_NAMES = [f"{arm}_{name}" for arm in ARMS for name in _FIELD_NAMES]
CSV_HEADER = ["t_ms", *FEATURE_NAMES, "gesture", "unsafe"]

# per-arm offsets
POS = slice(0, 3)
ROT = slice(3, 12)
GRASPER = 12
LINVEL = slice(13, 16)
ANGVEL = slice(16, 19)

EPS = 1e-8


class TrajectoryError(ValueError):
    """Structural problem with a trajectory or its annotations."""


class ParseError(TrajectoryError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ConfigurationError(ValueError):
    pass


def arm_offset(arm: str) -> int:
    arm = arm[0].upper()
    if arm not in ARMS:
        raise ConfigurationError(f"unknown arm {arm!r}")
    return 0 if arm == "L" else N_PER_ARM


def _arm_indices(families: Sequence[str]) -> list[int]:
    per_arm = {
        "C": list(range(0, 3)),
        "R": list(range(3, 12)),
        "G": [GRASPER],
        "V": list(range(13, 16)),
        "W": list(range(16, 19)),
    }
    idx = []
    for base in (0, N_PER_ARM):
        for fam in families:
            idx.extend(base + i for i in per_arm[fam])
    return idx


@dataclass(frozen=True)
class FeatureSubset:
    """Column selection over the 38 kinematic features.

    Named subsets use the letters C (Cartesian), R (rotation), G (grasper),
    V (linear velocity) and W (angular velocity); ``All`` is every column.
    """

    name: str
    indices: tuple[int, ...]

    def __post_init__(self):
        idx = self.indices
        if len(set(idx)) != len(idx):
            raise ConfigurationError(f"duplicate indices in feature subset {self.name}")
        if any(i < 0 or i >= N_FEATURES for i in idx):
            raise ConfigurationError(f"feature index out of range in subset {self.name}")

    def __len__(self):
        return len(self.indices)

    @classmethod
    def named(cls, name: str) -> "FeatureSubset":
        key = name.replace(",", "").replace(" ", "").upper()
        if key == "ALL":
            return cls("All", tuple(range(N_FEATURES)))
        if not key or any(c not in "CRGVW" for c in key):
            raise ConfigurationError(f"unknown feature subset {name!r}")
        return cls(key, tuple(_arm_indices(key)))

    @classmethod
    def custom(cls, indices: Sequence[int], name: str = "custom") -> "FeatureSubset":
        return cls(name, tuple(int(i) for i in indices))

    @classmethod
    def coerce(cls, value) -> "FeatureSubset":
        if isinstance(value, FeatureSubset):
            return value
        if isinstance(value, str):
            return cls.named(value)
        return cls.custom(value)


ALL = FeatureSubset.named("All")
CRG = FeatureSubset.named("CRG")
CG = FeatureSubset.named("CG")


@dataclass(frozen=True)
class SlidingWindowSpec:
    w: int
    s: int = 1

    def __post_init__(self):
        if self.w < 1 or self.s < 1:
            raise ConfigurationError("window length and stride must be >= 1")

    def count(self, n_samples: int) -> int:
        if n_samples < self.w:
            return 0
        return (n_samples - self.w) // self.s + 1


@dataclass
class GestureSegment:
    gesture_id: int
    start_index: int
    end_index: int  # inclusive
    unsafe: bool = False
    error_codes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.start_index > self.end_index:
            raise TrajectoryError(
                f"segment G{self.gesture_id} starts after it ends "
                f"({self.start_index} > {self.end_index})"
            )

    def __len__(self):
        return self.end_index - self.start_index + 1

    def contains(self, index: int) -> bool:
        return self.start_index <= index <= self.end_index

    def to_dict(self):
        return {
            "gesture_id": self.gesture_id,
            "start_index": self.start_index,
            "end_index": self.end_index,
            "unsafe": self.unsafe,
            "error_codes": list(self.error_codes),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            int(d["gesture_id"]),
            int(d["start_index"]),
            int(d["end_index"]),
            bool(d.get("unsafe", False)),
            list(d.get("error_codes", [])),
        )


@dataclass
class KinematicsSample:
    """One robot state; a structured view of a 38-wide row."""

    timestamp: float
    row: np.ndarray

    def __post_init__(self):
        self.row = np.asarray(self.row, dtype=np.float64)
        if self.row.shape != (N_FEATURES,):
            raise TrajectoryError(f"expected {N_FEATURES} features, got {self.row.shape}")
        for arm in ARMS:
            if not math.isfinite(self.grasper_angle(arm)):
                raise TrajectoryError("grasper angle must be finite")

    def _arm(self, arm):
        o = arm_offset(arm)
        return self.row[o:o + N_PER_ARM]

    def position(self, arm):
        return self._arm(arm)[POS]

    def rotation(self, arm):
        return self._arm(arm)[ROT].reshape(3, 3)

    def grasper_angle(self, arm):
        return float(self._arm(arm)[GRASPER])

    def linear_velocity(self, arm):
        return self._arm(arm)[LINVEL]

    def angular_velocity(self, arm):
        return self._arm(arm)[ANGVEL]


@dataclass
class Trajectory:
    data: np.ndarray
    sample_rate_hz: float
    segments: list[GestureSegment] = field(default_factory=list)
    source: str = "synthetic"
    length_unit: str = "device"
    timestamps: np.ndarray | None = None
    name: str = ""
    group: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != N_FEATURES:
            raise TrajectoryError(f"trajectory data must be (T, {N_FEATURES}), got {self.data.shape}")
        if not self.sample_rate_hz > 0:
            raise TrajectoryError("sample rate must be positive")
        if self.source not in ("jigsaws", "synthetic"):
            raise TrajectoryError(f"unknown source {self.source!r}")
        if self.timestamps is not None:
            ts = np.asarray(self.timestamps, dtype=np.float64)
            if ts.shape != (len(self.data),):
                raise TrajectoryError("timestamp column length mismatch")
            if len(ts) > 1 and not np.all(np.diff(ts) > 0):
                raise TrajectoryError("timestamps must be strictly increasing")
            self.timestamps = ts
        self.validate_segments()

    def validate_segments(self):
        prev_end = -1
        for seg in self.segments:
            if seg.start_index <= prev_end:
                raise TrajectoryError("gesture segments overlap or are out of order")
            if seg.end_index >= len(self.data) or seg.start_index < 0:
                raise TrajectoryError(
                    f"segment G{seg.gesture_id} [{seg.start_index}, {seg.end_index}] "
                    f"outside sample range of {len(self.data)}"
                )
            prev_end = seg.end_index

    def __len__(self):
        return len(self.data)

    @property
    def dt_ms(self) -> float:
        return 1000.0 / self.sample_rate_hz

    @property
    def t_ms(self) -> np.ndarray:
        if self.timestamps is not None:
            return self.timestamps
        return np.arange(len(self.data)) * self.dt_ms

    def sample(self, i: int) -> KinematicsSample:
        return KinematicsSample(float(self.t_ms[i]), self.data[i])

    def gesture_labels(self, fill: int = -1) -> np.ndarray:
        labels = np.full(len(self.data), fill, dtype=np.int64)
        for seg in self.segments:
            labels[seg.start_index:seg.end_index + 1] = seg.gesture_id
        return labels

    def unsafe_labels(self) -> np.ndarray:
        labels = np.zeros(len(self.data), dtype=np.int64)
        for seg in self.segments:
            if seg.unsafe:
                labels[seg.start_index:seg.end_index + 1] = 1
        return labels

    def segment_at(self, index: int) -> GestureSegment | None:
        for seg in self.segments:
            if seg.contains(index):
                return seg
        return None

    def copy(self, **changes) -> "Trajectory":
        out = replace(
            self,
            data=self.data.copy(),
            segments=[GestureSegment.from_dict(s.to_dict()) for s in self.segments],
            meta=json.loads(json.dumps(self.meta)),
            timestamps=None if self.timestamps is None else self.timestamps.copy(),
        )
        for k, v in changes.items():
            setattr(out, k, v)
        out.__post_init__()
        return out

    def features(self, subset) -> np.ndarray:
        subset = FeatureSubset.coerce(subset)
        return self.data[:, list(subset.indices)]


def select_features(sample: KinematicsSample | np.ndarray, subset) -> np.ndarray:
    subset = FeatureSubset.coerce(subset)
    row = sample.row if isinstance(sample, KinematicsSample) else np.asarray(sample)
    return row[list(subset.indices)]


def windows(traj: Trajectory, spec: SlidingWindowSpec, subset) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(start_index, window)`` pairs; each window is ``(w * |subset|,)``."""
    X = traj.features(subset)
    for start in range(0, spec.count(len(X)) * spec.s, spec.s):
        yield start, X[start:start + spec.w].ravel()


def window_array(X: np.ndarray, spec: SlidingWindowSpec) -> tuple[np.ndarray, np.ndarray]:
    """Stack windows of a ``(T, d)`` matrix into ``(n, w, d)`` plus their start indices."""
    n = spec.count(len(X))
    starts = np.arange(n) * spec.s
    if n == 0:
        return np.empty((0, spec.w, X.shape[1])), starts
    view = np.lib.stride_tricks.sliding_window_view(X, spec.w, axis=0)  # (T-w+1, d, w)
    return np.ascontiguousarray(view[starts].transpose(0, 2, 1)), starts


# ---------------------------------------------------------------- normalisation


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X):
        return (X - self.mean) / np.maximum(self.std, EPS)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def _exact_mean(X):
    # constant columns keep their value so they map to exactly zero
    const = np.ptp(X, axis=0) == 0
    return np.where(const, X[0], X.mean(axis=0))


def zscore_normalize(corpus: Sequence[Trajectory], stats: NormStats | None = None):
    """Standardise every feature; statistics come from ``corpus`` unless given."""
    if not corpus:
        raise TrajectoryError("cannot normalise an empty corpus")
    if stats is None:
        stacked = np.concatenate([t.data for t in corpus])
        stats = NormStats(_exact_mean(stacked), stacked.std(axis=0))
    out = [t.copy(data=stats.apply(t.data)) for t in corpus]
    return out, stats


class KinematicsScaler(TransformerMixin, BaseEstimator):
    """Per-feature z-scoring of ``(n, d)`` or ``(n, w, d)`` arrays."""

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        flat = X.reshape(-1, X.shape[-1])
        self.mean_ = _exact_mean(flat)
        self.scale_ = np.maximum(flat.std(axis=0), EPS)
        self.n_features_in_ = X.shape[-1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features_in_:
            raise ConfigurationError(
                f"expected {self.n_features_in_} features, got {X.shape[-1]}"
            )
        return (X - self.mean_) / self.scale_

    @property
    def stats(self) -> NormStats:
        return NormStats(self.mean_, self.scale_)


# ---------------------------------------------------------------- persistence


def _fmt(x: float) -> str:
    return repr(float(x))


def save_trajectory(traj: Trajectory, path) -> Path:
    """Write the canonical CSV plus a ``.meta.json`` sidecar."""
    path = Path(path)
    gest = traj.gesture_labels()
    unsafe = traj.unsafe_labels()
    t_ms = traj.t_ms
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i, row in enumerate(traj.data):
            w.writerow([_fmt(t_ms[i]), *map(_fmt, row), int(gest[i]), int(unsafe[i])])
    meta = {
        "sample_rate_hz": traj.sample_rate_hz,
        "source": traj.source,
        "length_unit": traj.length_unit,
        "name": traj.name,
        "group": traj.group,
        "explicit_timestamps": traj.timestamps is not None,
        "segments": [s.to_dict() for s in traj.segments],
        "meta": traj.meta,
    }
    sidecar(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def _segments_from_columns(gest: np.ndarray, unsafe: np.ndarray) -> list[GestureSegment]:
    segs = []
    start = 0
    for i in range(1, len(gest) + 1):
        if i == len(gest) or gest[i] != gest[start]:
            if gest[start] >= 0:
                segs.append(GestureSegment(int(gest[start]), start, i - 1, bool(unsafe[start:i].any())))
            start = i
    return segs


def _load_csv(path: Path, sample_rate_hz) -> Trajectory:
    meta = {}
    if sidecar(path).exists():
        meta = json.loads(sidecar(path).read_text(encoding="utf-8"))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TrajectoryError(f"{path}: empty file")
        has_t = header[0] == "t_ms"
        has_labels = header[-2:] == ["gesture", "unsafe"]
        n_expected = N_FEATURES + has_t + 2 * has_labels
        if len(header) != n_expected:
            raise ParseError(f"header has {len(header)} columns, expected {n_expected}", 1)
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != n_expected:
                raise ParseError(f"expected {n_expected} fields, got {len(rec)}", lineno)
            try:
                rows.append([float(v) for v in rec])
            except ValueError as exc:
                raise ParseError(f"non-numeric value ({exc})", lineno) from None
    if not rows:
        raise TrajectoryError(f"{path}: no samples")
    arr = np.asarray(rows, dtype=np.float64)
    t = arr[:, 0] if has_t else None
    body = arr[:, int(has_t):int(has_t) + N_FEATURES]
    rate = sample_rate_hz or meta.get("sample_rate_hz")
    if t is not None and len(t) > 1 and not np.all(np.diff(t) > 0):
        raise TrajectoryError(f"{path}: timestamps not strictly increasing")
    if rate is None:
        if t is None or len(t) < 2:
            raise TrajectoryError(f"{path}: sample rate unknown")
        rate = 1000.0 / float(np.median(np.diff(t)))
    if "segments" in meta:
        segments = [GestureSegment.from_dict(s) for s in meta["segments"]]
    elif has_labels:
        segments = _segments_from_columns(arr[:, -2].astype(np.int64), arr[:, -1].astype(np.int64))
    else:
        segments = []
    explicit = meta.get("explicit_timestamps", t is not None and not meta)
    return Trajectory(
        body,
        float(rate),
        segments,
        source=meta.get("source", "synthetic"),
        length_unit=meta.get("length_unit", "device"),
        timestamps=t if explicit else None,
        name=meta.get("name", path.stem),
        group=meta.get("group", ""),
        meta=meta.get("meta", {}),
    )


# JIGSAWS kinematics rows: 76 columns, master L/R then slave L/R; each block of 19
# is pos(3), rot(9), linear vel(3), angular vel(3), gripper angle(1).
_JIGSAWS_BLOCK = list(range(0, 12)) + [18] + list(range(12, 18))
JIGSAWS_SLAVE_COLUMNS = [38 + i for i in _JIGSAWS_BLOCK] + [57 + i for i in _JIGSAWS_BLOCK]


def load_transcription(path, gesture_prefix="G") -> list[GestureSegment]:
    segs = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3 or not parts[2].startswith(gesture_prefix):
            raise ParseError(f"bad transcription line {line!r}", lineno)
        try:
            start, end, gid = int(parts[0]), int(parts[1]), int(parts[2][len(gesture_prefix):])
        except ValueError:
            raise ParseError(f"bad transcription line {line!r}", lineno) from None
        if segs and start <= segs[-1].end_index:
            raise TrajectoryError(f"transcription line {lineno}: frames overlap or go backwards")
        segs.append(GestureSegment(gid, start, end))
    return segs


def _load_jigsaws(path: Path, sample_rate_hz, column_map, transcription) -> Trajectory:
    cols = list(column_map) if column_map is not None else JIGSAWS_SLAVE_COLUMNS
    if len(cols) != N_FEATURES:
        raise ConfigurationError(f"column map must name {N_FEATURES} columns")
    rows = []
    width = None
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if width is None:
            width = len(parts)
        if len(parts) != width:
            raise ParseError(f"expected {width} fields, got {len(parts)}", lineno)
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise ParseError(f"non-numeric value ({exc})", lineno) from None
    if not rows:
        raise TrajectoryError(f"{path}: empty file")
    arr = np.asarray(rows, dtype=np.float64)
    if max(cols) >= arr.shape[1]:
        raise ParseError(f"column map needs {max(cols) + 1} columns, file has {arr.shape[1]}", 1)
    segments = load_transcription(transcription) if transcription else []
    return Trajectory(
        arr[:, cols],
        float(sample_rate_hz or 30.0),
        segments,
        source="jigsaws",
        name=path.stem,
    )


def load_trajectory(path, format="csv", column_map=None, sample_rate_hz=None,
                    transcription=None) -> Trajectory:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "csv":
        return _load_csv(path, sample_rate_hz)
    if format == "jigsaws":
        return _load_jigsaws(path, sample_rate_hz, column_map, transcription)
    raise ConfigurationError(f"unknown trajectory format {format!r}")
