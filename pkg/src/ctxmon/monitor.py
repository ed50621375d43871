"""Online two-stage monitor and its evaluation.

Every sample goes through stage 1 (gesture) and a causal persistence filter
that fixes the routing gesture of that sample.  Once the window starting at
sample ``s`` is complete (at sample ``s + w - 1``) stage 2 scores it with the
detector of the gesture routed at ``s``.  Scores are attributed to the window
start, the same window-to-gesture rule used for training; alerts carry the
time the window completed.
"""
from __future__ import annotations

import csv
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .classifiers import DetectorLibrary, compute_jitter, segment_predictions
from .kinematics import N_FEATURES, SlidingWindowSpec, Trajectory, window_array
from .metrics import ConfusionCounts, confusion_metrics, roc_auc, roc_curve
from .nn.functional import ShapeError

MODES = ("predicted_gestures", "ground_truth_gestures", "baseline")


@dataclass
class MonitorAlert:
    detected_t: float
    gesture_id: int
    score: float
    sample_index: int       # sample at which the window completed
    window_start: int
    provenance: str = ""


@dataclass
class MonitorTrace:
    """Per-sample outputs of one monitor pass, indexed by window start."""

    scores: np.ndarray          # NaN where no complete window starts
    routed: np.ndarray          # routing gesture per sample (0 = baseline mode, -1 = none)
    predicted: np.ndarray       # raw stage-1 argmax (-1 when stage 1 is bypassed)
    provenance: list
    alerts: list
    latency_ms: np.ndarray


class PersistenceFilter:
    """Causal label smoother: switch only after ``k`` identical new labels."""

    def __init__(self, k=3):
        self.k = k
        self.current = None
        self.run_label = None
        self.run = 0

    def push(self, label):
        if self.current is None:
            self.current = label
        if label == self.run_label:
            self.run += 1
        else:
            self.run_label, self.run = label, 1
        if label != self.current and self.run >= self.k:
            self.current = label
        return self.current


@dataclass
class StepResult:
    index: int
    routed: int
    predicted: int
    window_start: int | None = None
    score: float | None = None
    provenance: str = ""
    alert: MonitorAlert | None = None


class StreamingMonitor:
    """Incremental monitor for one stream.

    ``mode`` selects the routing source: stage-1 predictions, supplied
    ground-truth labels (``push(row, gesture=...)``), or the context-free
    baseline.
    """

    def __init__(self, library: DetectorLibrary, mode="predicted_gestures", sample_rate_hz=100.0):
        if mode not in MODES:
            raise ValueError(f"unknown monitor mode {mode!r}")
        if mode == "predicted_gestures" and library.gesture_model is None:
            raise ValueError("predicted_gestures mode needs a library with a gesture model")
        self.lib = library
        self.mode = mode
        self.dt = 1000.0 / sample_rate_hz
        self.idx = list(library.subset.indices)
        self.w = library.window.w
        self.reset()

    def reset(self):
        self.t = 0
        self.rows = deque(maxlen=self.w)
        self.routes = deque(maxlen=self.w)
        self.filter = PersistenceFilter(self.lib.persistence_k)
        self.gstream = self.lib.gesture_model.stream() if self.mode == "predicted_gestures" else None

    def push(self, row, gesture=None, t_ms=None) -> StepResult:
        """Consume one raw feature row and score the window that just completed."""
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (N_FEATURES,):
            raise ShapeError(f"monitor expects {N_FEATURES} features per sample, got {row.shape}")
        i = self.t
        self.t += 1
        t_ms = i * self.dt if t_ms is None else t_ms
        pred = -1
        if self.mode == "predicted_gestures":
            probs = self.gstream.push(row)
            pred = int(self.lib.gesture_model.classes_[int(np.argmax(probs))])
            routed = int(self.filter.push(pred))
        elif self.mode == "ground_truth_gestures":
            routed = -1 if gesture is None else int(gesture)
        else:
            routed = 0
        self.rows.append(row[self.idx])
        self.routes.append(routed)
        res = StepResult(i, routed, pred)
        if len(self.rows) < self.w:
            return res
        s, g = i - self.w + 1, self.routes[0]
        res.window_start = s
        if g < 0:
            return res
        window = np.stack(self.rows)[None]
        sc = self.lib.score_baseline(window) if self.mode == "baseline" else self.lib.score_window(g, window)
        res.score, res.provenance = sc.value, sc.provenance
        if sc.unsafe:
            res.alert = MonitorAlert(float(t_ms), int(g), sc.value, i, s, sc.provenance)
        return res


def _empty_trace(n):
    return MonitorTrace(np.full(n, np.nan), np.full(n, -1), np.full(n, -1), [""] * n, [], np.zeros(n))


def run_monitor(library: DetectorLibrary, traj: Trajectory, mode="predicted_gestures") -> MonitorTrace:
    """Stream a whole trajectory through a fresh monitor, timing every sample."""
    if traj.data.shape[1] != N_FEATURES:
        raise ShapeError(f"trajectory has {traj.data.shape[1]} features, expected {N_FEATURES}")
    mon = StreamingMonitor(library, mode, traj.sample_rate_hz)
    truth = traj.gesture_labels() if mode == "ground_truth_gestures" else None
    t_ms = traj.t_ms
    out = _empty_trace(len(traj))
    for i, row in enumerate(traj.data):
        t0 = time.perf_counter()
        r = mon.push(row, None if truth is None else truth[i], t_ms[i])
        out.latency_ms[i] = (time.perf_counter() - t0) * 1000.0
        out.routed[i], out.predicted[i] = r.routed, r.predicted
        if r.score is not None:
            out.scores[r.window_start] = r.score
            out.provenance[r.window_start] = r.provenance
        if r.alert is not None:
            out.alerts.append(r.alert)
    return out


def run_monitor_batch(library: DetectorLibrary, traj: Trajectory, mode="predicted_gestures") -> MonitorTrace:
    """Same outputs as :func:`run_monitor` computed from the complete trajectory.

    Routing is computed for the whole stream first and every window is cut
    from the full feature matrix; used to check that the streaming path
    never looks ahead.
    """
    n = len(traj)
    out = _empty_trace(n)
    lib = library
    if mode == "predicted_gestures":
        probs = lib.gesture_model.predict_proba_stream(traj)
        pred = lib.gesture_model.classes_[probs.argmax(axis=1)]
        filt = PersistenceFilter(lib.persistence_k)
        routed = np.array([filt.push(int(p)) for p in pred])
        out.predicted[:] = pred
    elif mode == "ground_truth_gestures":
        routed = traj.gesture_labels()
    else:
        routed = np.zeros(n, dtype=int)
    out.routed[:] = routed
    W, starts = window_array(traj.features(lib.subset), SlidingWindowSpec(lib.window.w, 1))
    t_ms = traj.t_ms
    for win, s in zip(W, starts):
        e = s + lib.window.w - 1
        g = int(routed[s])
        if g < 0:
            continue
        sc = lib.score_baseline(win[None]) if mode == "baseline" else lib.score_window(g, win[None])
        out.scores[s] = sc.value
        out.provenance[s] = sc.provenance
        if sc.unsafe:
            out.alerts.append(MonitorAlert(float(t_ms[e]), g, sc.value, int(e), int(s), sc.provenance))
    return out


# ---------------------------------------------------------------- gesture-level evaluation


def gesture_level_aggregate(scores, segments, threshold=0.5):
    """Segment score = max sample score inside it (0 if none); unsafe iff >= threshold.

    Returns ``(segment_scores, predicted_unsafe)`` arrays aligned with ``segments``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    seg_scores = np.zeros(len(segments))
    for k, seg in enumerate(segments):
        part = scores[seg.start_index:seg.end_index + 1]
        part = part[~np.isnan(part)]
        seg_scores[k] = part.max() if len(part) else 0.0
    return seg_scores, seg_scores >= threshold


@dataclass
class AlertTiming:
    demo: str
    gesture_id: int
    actual_t: float
    detected_t: float | None
    reaction_t: float | None


def reaction_time(alerts: Sequence[MonitorAlert], traj: Trajectory, demo=None):
    """Reaction-time records for every unsafe segment of ``traj``.

    actual_t is the injection start clipped to the segment (segment onset
    when no injection is recorded); detected_t is the first alert inside
    the segment (alerts belong to the segment holding their window start;
    the detection time is when that window completed).  Unalerted segments
    get ``None`` and count as misses.
    """
    t_ms = traj.t_ms
    inj = traj.meta.get("injection_start_index")
    recs = []
    for seg in traj.segments:
        if not seg.unsafe:
            continue
        a = seg.start_index if inj is None else min(max(int(inj), seg.start_index), seg.end_index)
        actual = float(t_ms[a])
        hits = [al for al in alerts if seg.start_index <= al.window_start <= seg.end_index]
        if hits:
            det = min(hits, key=lambda al: al.sample_index).detected_t
            recs.append(AlertTiming(demo or traj.name, seg.gesture_id, actual, det, actual - det))
        else:
            recs.append(AlertTiming(demo or traj.name, seg.gesture_id, actual, None, None))
    return recs


def reaction_summary(timings: Sequence[AlertTiming]) -> dict:
    vals = np.array([t.reaction_t for t in timings if t.reaction_t is not None])
    return {
        "mean_ms": float(vals.mean()) if len(vals) else None,
        "std_ms": float(vals.std()) if len(vals) else None,
        "n_detected": int(len(vals)),
        "n_missed": int(sum(t.reaction_t is None for t in timings)),
    }


def early_detection_pct(timings: Sequence[AlertTiming]) -> float | None:
    """Percent of unsafe occurrences whose reaction time is positive (misses count)."""
    if not timings:
        return None
    pos = sum(1 for t in timings if t.reaction_t is not None and t.reaction_t > 0)
    return 100.0 * pos / len(timings)


@dataclass
class MonitorReport:
    mode: str
    threshold: float
    aggregate: dict
    per_demo: list
    reaction: dict
    early_detection_pct: float | None
    roc: dict | None
    gesture_accuracy: float | None
    jitter: dict | None
    timings: list = field(default_factory=list)
    alerts: list = field(default_factory=list)
    segments: list = field(default_factory=list)
    latency_ms_mean: float | None = None
    # per-demo (scores, labels) over scored samples; kept for pooling, not serialised
    sample_scores: list = field(default_factory=list, repr=False)

    def to_dict(self, include_latency=False):
        d = asdict(self)
        d.pop("sample_scores")
        if not include_latency:
            d.pop("latency_ms_mean")
        return d

    def table(self, include_latency=True) -> str:
        """Human-readable summary row set."""
        a = self.aggregate

        def f(v, fmt="{:.3f}"):
            return "-" if v is None else fmt.format(v)

        rows = [
            ("Mode", self.mode),
            ("AUC", f(a.get("AUC"))),
            ("AUC (gesture level)", f(a.get("AUC_gesture"))),
            ("F1", f(a.get("F1"))),
            ("TPR", f(a.get("TPR"))),
            ("TNR", f(a.get("TNR"))),
            ("PPV", f(a.get("PPV"))),
            ("NPV", f(a.get("NPV"))),
            ("Avg. react time (ms)", f(self.reaction.get("mean_ms"), "{:.0f}")),
            ("React time std (ms)", f(self.reaction.get("std_ms"), "{:.0f}")),
            ("Early detection (%)", f(self.early_detection_pct, "{:.2f}")),
            ("Gesture accuracy", f(self.gesture_accuracy)),
        ]
        if include_latency:
            rows.append(("Compute time / sample (ms)", f(self.latency_ms_mean, "{:.3f}")))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"


def evaluate_pipeline(library: DetectorLibrary, corpus: Sequence[Trajectory], mode="predicted_gestures",
                      threshold=None) -> MonitorReport:
    """Run the monitor over every labelled demo.

    F1 and the confusion rates are computed at gesture level.  AUC is the
    sample-level ROC area pooled over demos (each scored sample labelled with
    the safety flag of its gesture); the gesture-level AUC over segment
    scores is reported alongside as ``AUC_gesture``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    thr = library.threshold if threshold is None else threshold
    all_scores, all_labels, per_demo, timings, alerts = [], [], [], [], []
    lat, hit, tot, samples = [], 0, 0, []
    jit_recs, seg_recs = [], []
    total = ConfusionCounts()
    for traj in corpus:
        tr = run_monitor(library, traj, mode)
        lat.append(tr.latency_ms)
        seg_scores, pred = gesture_level_aggregate(tr.scores, traj.segments, thr)
        truth = np.array([s.unsafe for s in traj.segments], dtype=bool)
        c = ConfusionCounts.from_labels(truth, pred)
        total = total + c
        all_scores.append(seg_scores)
        all_labels.append(truth)
        seg_recs.extend({"demo": traj.name, "gesture": seg.gesture_id, "start_index": seg.start_index,
                         "end_index": seg.end_index, "unsafe": bool(seg.unsafe), "score": float(v)}
                        for seg, v in zip(traj.segments, seg_scores))
        recs = reaction_time(tr.alerts, traj)
        timings.extend(recs)
        ok_s = ~np.isnan(tr.scores)
        sc, sl = tr.scores[ok_s], traj.unsafe_labels()[ok_s].astype(bool)
        samples.append((sc, sl))
        row = {"demo": traj.name, **c.to_dict(), **confusion_metrics(c), "AUC": roc_auc(sc, sl)}
        if mode == "predicted_gestures":
            lab = traj.gesture_labels()
            ok = lab > 0
            hit += int((tr.predicted[ok] == lab[ok]).sum())
            tot += int(ok.sum())
            row["gesture_accuracy"] = float((tr.predicted[ok] == lab[ok]).mean()) if ok.any() else None
            row["n_labelled"] = int(ok.sum())
            psegs, _ = segment_predictions(tr.predicted, library.persistence_k)
            jit_recs.extend(compute_jitter(psegs, traj.segments, traj.t_ms).records)
        per_demo.append(row)
        alerts.extend({"demo": traj.name, "t_ms": a.detected_t, "gesture": a.gesture_id,
                       "score": a.score, "sample_index": a.sample_index,
                       "window_start": a.window_start} for a in tr.alerts)
    scores = np.concatenate(all_scores) if all_scores else np.empty(0)
    labels = np.concatenate(all_labels) if all_labels else np.empty(0, dtype=bool)
    roc = roc_curve(scores, labels) if len(scores) else None
    agg = {**total.to_dict(), **confusion_metrics(total), "AUC": pooled_sample_auc(samples),
           "AUC_gesture": None if roc is None else roc.auc,
           "n_gestures": int(len(labels)), "n_unsafe": int(labels.sum())}
    jitter = None
    if jit_recs:
        v = np.array([r["jitter_ms"] for r in jit_recs])
        jitter = {"mean_ms": float(v.mean()), "mean_abs_ms": float(np.abs(v).mean()), "n": int(len(v))}
    return MonitorReport(
        mode=mode, threshold=float(thr), aggregate=agg, per_demo=per_demo,
        reaction=reaction_summary(timings), early_detection_pct=early_detection_pct(timings),
        roc=None if roc is None else roc.to_dict(),
        gesture_accuracy=(hit / tot) if tot else None, jitter=jitter,
        timings=[asdict(t) for t in timings], alerts=alerts, segments=seg_recs,
        latency_ms_mean=float(np.concatenate(lat).mean()) if lat else None,
        sample_scores=samples,
    )


def pooled_sample_auc(samples) -> float | None:
    """Sample-level AUC over the concatenation of per-demo ``(scores, labels)``."""
    if not samples:
        return None
    return roc_auc(np.concatenate([s for s, _ in samples]), np.concatenate([lab for _, lab in samples]))


def write_alert_log(alerts, path):
    """CSV alert log with columns t_ms, gesture, score (plus demo and sample index)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["demo", "sample_index", "t_ms", "gesture", "score"])
        for a in alerts:
            if isinstance(a, MonitorAlert):
                a = {"demo": "", "sample_index": a.sample_index, "t_ms": a.detected_t,
                     "gesture": a.gesture_id, "score": a.score}
            w.writerow([a["demo"], a["sample_index"], repr(float(a["t_ms"])), a["gesture"], repr(float(a["score"]))])
