"""Gesture classifier (stage 1), per-gesture error detectors (stage 2) and the
context-free baseline, wrapped as scikit-learn style estimators."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .kinematics import (
    CG,
    ConfigurationError,
    FeatureSubset,
    GestureSegment,
    NormStats,
    SlidingWindowSpec,
    Trajectory,
    window_array,
)
from .nn import ModelConfig, Sequential, TrainConfig, fit
from .nn.bundle import decode_bundle, encode_bundle
from .nn.functional import ShapeError, softmax
from .task_model import BLOCK_TRANSFER, N_GESTURE_CLASSES, GestureVocabulary
from .utils import derive_seed

log = logging.getLogger(__name__)

LIBRARY_FORMAT = 1


class RoutingError(KeyError):
    pass


# ---------------------------------------------------------------- model builders


def build_gesture_model(input_dim, lstm_units=(64, 32), fc_units=32, n_classes=N_GESTURE_CLASSES,
                        dropout=0.0, seed=0, windowed=False, window=None) -> Sequential:
    """Stacked LSTM, a ReLU fully-connected layer and a softmax head.

    ``windowed=True`` builds the variant that reads a fixed window and emits
    one distribution per window instead of one per step.
    """
    if not lstm_units:
        raise ConfigurationError("gesture model needs at least one recurrent layer")
    layers = []
    for i, u in enumerate(lstm_units):
        last = i == len(lstm_units) - 1
        layers.append({"kind": "lstm", "units": int(u), "return_sequences": not (windowed and last)})
    if fc_units:
        layers.append({"kind": "dense", "units": int(fc_units), "activation": "relu"})
    if dropout:
        layers.append({"kind": "dropout", "rate": float(dropout)})
    cfg = ModelConfig(layers=layers, input_dim=int(input_dim), output_dim=int(n_classes),
                      input_len=int(window) if windowed else None, loss="softmax", seed=int(seed))
    return Sequential(cfg)


def build_detector_model(input_dim, window, kind="conv", filters=(32, 16), kernel=3,
                         lstm_units=(16, 8), fc_units=(16, 8), batchnorm=True, dropout=0.0,
                         seed=0) -> Sequential:
    """Binary window classifier: 1-D conv (or LSTM) stack, dense head, one logit."""
    layers = []
    if kind == "conv":
        for f in filters:
            layers.append({"kind": "conv1d", "filters": int(f), "kernel": int(kernel)})
            if batchnorm:
                layers.append({"kind": "batchnorm"})
            layers.append({"kind": "relu"})
        layers.append({"kind": "flatten"})
    elif kind == "lstm":
        for i, u in enumerate(lstm_units):
            layers.append({"kind": "lstm", "units": int(u),
                           "return_sequences": i < len(lstm_units) - 1})
    else:
        raise ConfigurationError(f"unknown detector kind {kind!r}")
    for u in fc_units:
        layers.append({"kind": "dense", "units": int(u), "activation": "relu"})
        if dropout:
            layers.append({"kind": "dropout", "rate": float(dropout)})
    cfg = ModelConfig(layers=layers, input_dim=int(input_dim), output_dim=1, input_len=int(window),
                      loss="sigmoid", seed=int(seed))
    return Sequential(cfg)


# ---------------------------------------------------------------- persistence helpers


def _jsonable_params(est):
    out = {}
    for k, v in est.get_params().items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _restore_params(cls, params):
    fixed = {}
    for k, v in params.items():
        fixed[k] = tuple(v) if isinstance(v, list) else v
    return cls(**fixed)


def _split(n, val_fraction, seed):
    """Deterministic train/validation index split; tiny sets validate on themselves."""
    idx = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n))
    if n < 2 or n_val < 1:
        return idx, idx
    n_val = min(n_val, n - 1)
    return np.sort(idx[n_val:]), np.sort(idx[:n_val])


# ---------------------------------------------------------------- stage 1


class GestureClassifier(ClassifierMixin, BaseEstimator):
    """Per-sample gesture recogniser.

    In the default ``stateful`` mode the network consumes one sample per
    step and carries its recurrent state along the trajectory; training runs
    on whole trajectories (zero state at the first sample), exactly as at
    inference.  ``windowed`` mode classifies each sample from the trailing
    ``window`` samples instead.
    """

    def __init__(self, lstm_units=(64, 32), fc_units=32, n_classes=N_GESTURE_CLASSES, subset="All",
                 mode="stateful", window=5, lr=1e-3, batch_size=4, max_epochs=60, patience=10,
                 decay_every=20, decay_factor=0.5, val_fraction=0.2, dropout=0.0, seed=0):
        self.lstm_units = lstm_units
        self.fc_units = fc_units
        self.n_classes = n_classes
        self.subset = subset
        self.mode = mode
        self.window = window
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.decay_every = decay_every
        self.decay_factor = decay_factor
        self.val_fraction = val_fraction
        self.dropout = dropout
        self.seed = seed

    # -- data preparation

    def _features(self, traj: Trajectory):
        X = traj.features(self.subset_)
        return self.norm_.apply(X)

    def _sequences(self, trajs):
        """Padded ``(B, T, d)`` inputs, one-hot targets and masks."""
        T = max(len(t) for t in trajs)
        d = len(self.subset_)
        X = np.zeros((len(trajs), T, d))
        Y = np.zeros((len(trajs), T, self.n_classes))
        M = np.zeros((len(trajs), T))
        for i, t in enumerate(trajs):
            lab = t.gesture_labels()
            X[i, :len(t)] = self._features(t)
            ok = lab > 0
            Y[i, np.flatnonzero(ok), lab[ok] - 1] = 1.0
            M[i, :len(t)] = ok
        return X, Y, M

    def _padded(self, X):
        w = self.window
        return np.concatenate([np.repeat(X[:1], w - 1, axis=0), X]) if w > 1 else X

    def _windows(self, trajs):
        xs, ys = [], []
        spec = SlidingWindowSpec(self.window, 1)
        for t in trajs:
            W, _ = window_array(self._padded(self._features(t)), spec)
            lab = t.gesture_labels()
            ok = lab > 0
            xs.append(W[ok])
            y = np.zeros((int(ok.sum()), self.n_classes))
            y[np.arange(len(y)), lab[ok] - 1] = 1.0
            ys.append(y)
        return np.concatenate(xs), np.concatenate(ys)

    # -- estimator API

    def fit(self, X: Sequence[Trajectory], y=None):
        trajs = list(X)
        if not trajs:
            raise ValueError("cannot fit a gesture classifier on an empty corpus")
        if self.mode not in ("stateful", "windowed"):
            raise ConfigurationError(f"unknown gesture classifier mode {self.mode!r}")
        self.subset_ = FeatureSubset.coerce(self.subset)
        stacked = np.concatenate([t.features(self.subset_) for t in trajs])
        self.norm_ = NormStats(stacked.mean(axis=0), stacked.std(axis=0))
        self.n_features_in_ = len(self.subset_)
        self.classes_ = np.arange(1, self.n_classes + 1)
        windowed = self.mode == "windowed"
        self.model_ = build_gesture_model(self.n_features_in_, self.lstm_units, self.fc_units,
                                          self.n_classes, self.dropout, self.seed, windowed, self.window)
        tr, va = _split(len(trajs), self.val_fraction, derive_seed(self.seed, "split"))
        if windowed:
            Xtr, Ytr = self._windows([trajs[i] for i in tr])
            Xva, Yva = self._windows([trajs[i] for i in va])
            train, val = (Xtr, Ytr), (Xva, Yva)
        else:
            train = self._sequences([trajs[i] for i in tr])
            val = self._sequences([trajs[i] for i in va])
        cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                          patience=self.patience, decay_every=self.decay_every,
                          decay_factor=self.decay_factor, seed=self.seed)
        self.model_, self.history_ = fit(self.model_, train, val, cfg)
        return self

    def stream(self) -> "GestureStream":
        check_is_fitted(self, "model_")
        return GestureStream(self)

    def predict_proba_stream(self, traj: Trajectory) -> np.ndarray:
        """One probability vector per sample; state is reset at the first sample."""
        check_is_fitted(self, "model_")
        if traj.data.shape[1] <= max(self.subset_.indices):
            raise ShapeError("trajectory has fewer features than the classifier expects")
        s = self.stream()
        return np.stack([s.push(row) for row in traj.data]) if len(traj) else np.empty((0, self.n_classes))

    def predict_stream(self, traj: Trajectory) -> np.ndarray:
        return self.classes_[self.predict_proba_stream(traj).argmax(axis=1)]

    def predict(self, X):
        return [self.predict_stream(t) for t in X]

    def score(self, X, y=None):
        """Per-sample accuracy over every labelled sample in ``X``."""
        hit = tot = 0
        for t in X:
            lab = t.gesture_labels()
            ok = lab > 0
            hit += int((self.predict_stream(t)[ok] == lab[ok]).sum())
            tot += int(ok.sum())
        return hit / tot if tot else float("nan")

    # -- persistence

    def to_bytes(self) -> bytes:
        check_is_fitted(self, "model_")
        meta = {"estimator": "GestureClassifier", "params": _jsonable_params(self),
                "subset": {"name": self.subset_.name, "indices": list(self.subset_.indices)},
                "history": {k: v for k, v in self.history_.items()}}
        return encode_bundle(self.model_, self.norm_.to_dict(), meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GestureClassifier":
        b = decode_bundle(blob)
        if b.metadata.get("estimator") != "GestureClassifier":
            raise ConfigurationError("bundle does not hold a gesture classifier")
        est = _restore_params(cls, b.metadata["params"])
        est.subset_ = FeatureSubset(b.metadata["subset"]["name"], tuple(b.metadata["subset"]["indices"]))
        est.norm_ = NormStats.from_dict(b.norm)
        est.n_features_in_ = len(est.subset_)
        est.classes_ = np.arange(1, est.n_classes + 1)
        est.model_ = b.model
        est.history_ = b.metadata.get("history", {})
        return est


class GestureStream:
    """Incremental stage-1 inference: push one raw 38-feature row at a time."""

    def __init__(self, clf: GestureClassifier):
        self.clf = clf
        self.idx = list(clf.subset_.indices)
        self.reset()

    def reset(self):
        self.states = self.clf.model_.initial_state(1)
        self.buf = []

    def push(self, row) -> np.ndarray:
        clf = self.clf
        x = clf.norm_.apply(np.asarray(row, dtype=np.float64)[self.idx])
        if clf.mode == "stateful":
            logits, self.states = clf.model_.step(x[None, :], self.states)
            return softmax(logits)[0]
        if not self.buf:
            self.buf = [x] * (clf.window - 1)
        self.buf.append(x)
        self.buf = self.buf[-clf.window:]
        return softmax(clf.model_.forward(np.stack(self.buf)[None]))[0]


def train_gesture_classifier(corpus: Sequence[Trajectory], folds, params: dict | None = None):
    """Train one classifier per fold; returns ``(models, per_fold_accuracy, mean)``.

    ``folds`` is a sequence of ``(train_indices, test_indices)``.
    """
    params = dict(params or {})
    models, accs = [], []
    for k, (tr, te) in enumerate(folds):
        if len(tr) == 0 or len(te) == 0:
            raise ValueError(f"fold {k} has an empty train or test set")
        clf = GestureClassifier(**params).fit([corpus[i] for i in tr])
        models.append(clf)
        accs.append(clf.score([corpus[i] for i in te]))
    return models, accs, float(np.mean(accs))


# ---------------------------------------------------------------- boundaries and jitter


def segment_predictions(labels, k: int = 3, t_ms=None):
    """Split a label stream into segments, ignoring flicker shorter than ``k``.

    A new segment opens at the first sample whose label differs from the
    current one and then holds for at least ``k`` consecutive samples.
    Returns ``(segments, detections)`` where ``detections`` maps each gesture
    to the onset times (ms, or indices when ``t_ms`` is None) of its segments.
    """
    if k < 1:
        raise ValueError("persistence k must be >= 1")
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        return [], {}
    times = np.arange(n) if t_ms is None else np.asarray(t_ms)
    starts = [0]
    cur = labels[0]
    i = 1
    while i < n:
        if labels[i] != cur and i + k <= n and np.all(labels[i:i + k] == labels[i]):
            starts.append(i)
            cur = labels[i]
            i += k
            continue
        i += 1
    segs, det = [], {}
    for j, s in enumerate(starts):
        e = starts[j + 1] - 1 if j + 1 < len(starts) else n - 1
        g = int(labels[s])
        segs.append(GestureSegment(g, s, e))
        det.setdefault(g, []).append(float(times[s]))
    return segs, det


@dataclass
class JitterReport:
    per_gesture: dict
    mean: float | None
    mean_abs: float | None
    records: list = field(default_factory=list)
    unmatched: list = field(default_factory=list)

    def to_dict(self):
        return {"per_gesture": {str(k): v for k, v in self.per_gesture.items()}, "mean": self.mean,
                "mean_abs": self.mean_abs, "records": self.records, "unmatched": self.unmatched}


def compute_jitter(predicted: Sequence[GestureSegment], truth: Sequence[GestureSegment], t_ms) -> JitterReport:
    """Truth onset minus matched predicted onset (ms); positive means early.

    Each truth segment is matched to the predicted segment of the same
    gesture with the nearest onset.
    """
    t_ms = np.asarray(t_ms, dtype=np.float64)
    recs, unmatched = [], []
    for seg in truth:
        cands = [p for p in predicted if p.gesture_id == seg.gesture_id]
        if not cands:
            unmatched.append({"gesture": seg.gesture_id, "onset_ms": float(t_ms[seg.start_index])})
            continue
        t0 = t_ms[seg.start_index]
        best = min(cands, key=lambda p: (abs(t_ms[p.start_index] - t0), p.start_index))
        recs.append({"gesture": seg.gesture_id, "truth_ms": float(t0),
                     "detected_ms": float(t_ms[best.start_index]),
                     "jitter_ms": float(t0 - t_ms[best.start_index])})
    per = {}
    for r in recs:
        per.setdefault(r["gesture"], []).append(r["jitter_ms"])
    per = {g: float(np.mean(v)) for g, v in sorted(per.items())}
    vals = np.array([r["jitter_ms"] for r in recs])
    return JitterReport(per, float(vals.mean()) if len(vals) else None,
                        float(np.abs(vals).mean()) if len(vals) else None, recs, unmatched)


# ---------------------------------------------------------------- stage 2


def detector_windows(corpus: Sequence[Trajectory], spec: SlidingWindowSpec, subset):
    """All windows of the corpus with their gesture and unsafe labels.

    A window belongs to the segment containing its first sample; windows
    starting outside every segment are dropped.  Returns
    ``(X (n, w, d), gesture (n,), unsafe (n,), traj_index (n,), start (n,))``.
    """
    subset = FeatureSubset.coerce(subset)
    xs, gs, us, ti, st = [], [], [], [], []
    for k, t in enumerate(corpus):
        W, starts = window_array(t.features(subset), spec)
        g = t.gesture_labels()[starts]
        u = t.unsafe_labels()[starts]
        ok = g > 0
        xs.append(W[ok])
        gs.append(g[ok])
        us.append(u[ok])
        ti.append(np.full(int(ok.sum()), k))
        st.append(starts[ok])
    if not xs:
        return (np.empty((0, spec.w, len(subset))),) + tuple(np.empty(0, dtype=int) for _ in range(4))
    return (np.concatenate(xs), np.concatenate(gs), np.concatenate(us).astype(int),
            np.concatenate(ti), np.concatenate(st))


class ErrorDetector(ClassifierMixin, BaseEstimator):
    """Binary erroneous-window classifier over ``(n, w, d)`` raw windows."""

    def __init__(self, kind="conv", filters=(32, 16), kernel=3, lstm_units=(16, 8), fc_units=(16, 8),
                 batchnorm=True, dropout=0.0, lr=1e-3, batch_size=64, max_epochs=40, patience=8,
                 decay_every=20, decay_factor=0.5, val_fraction=0.2, class_weight="balanced",
                 threshold=0.5, seed=0):
        self.kind = kind
        self.filters = filters
        self.kernel = kernel
        self.lstm_units = lstm_units
        self.fc_units = fc_units
        self.batchnorm = batchnorm
        self.dropout = dropout
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.decay_every = decay_every
        self.decay_factor = decay_factor
        self.val_fraction = val_fraction
        self.class_weight = class_weight
        self.threshold = threshold
        self.seed = seed

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3:
            raise ShapeError(f"detector expects (n, w, d) windows, got shape {X.shape}")
        if hasattr(self, "n_features_in_") and X.shape[1:] != (self.window_, self.n_features_in_):
            raise ShapeError(f"detector expects windows of shape {(self.window_, self.n_features_in_)}, "
                             f"got {X.shape[1:]}")
        return X

    def fit(self, X, y, groups=None):
        """``groups`` (e.g. the source demonstration of each window) keeps
        related windows on one side of the validation split."""
        X = self._check(X)
        y = np.asarray(y, dtype=np.float64).ravel()
        if len(X) != len(y):
            raise ValueError("X and y lengths differ")
        if len(X) < 2:
            raise ValueError("detector needs at least two windows")
        self.window_, self.n_features_in_ = X.shape[1], X.shape[2]
        flat = X.reshape(-1, X.shape[2])
        self.norm_ = NormStats(flat.mean(axis=0), flat.std(axis=0))
        self.classes_ = np.array([0, 1])
        self.degenerate_ = bool(len(np.unique(y)) < 2)
        self.n_train_ = int(len(y))
        self.pos_rate_ = float(y.mean())
        Xn = self.norm_.apply(X)
        if self.class_weight == "balanced" and not self.degenerate_:
            wpos = 0.5 / self.pos_rate_
            wneg = 0.5 / (1 - self.pos_rate_)
            wts = np.where(y > 0.5, wpos, wneg)
        else:
            wts = np.ones(len(y))
        self.model_ = build_detector_model(self.n_features_in_, self.window_, self.kind, self.filters,
                                           self.kernel, self.lstm_units, self.fc_units, self.batchnorm,
                                           self.dropout, self.seed)
        if groups is None:
            tr, va = _split(len(y), self.val_fraction, derive_seed(self.seed, "split"))
        else:
            groups = np.asarray(groups)
            ug = np.unique(groups)
            gtr, gva = _split(len(ug), self.val_fraction, derive_seed(self.seed, "split"))
            va_mask = np.isin(groups, ug[gva])
            if len(gva) == len(ug) or not va_mask.any() or va_mask.all():
                va_mask = np.ones(len(y), dtype=bool)
                tr = va = np.arange(len(y))
            else:
                tr, va = np.flatnonzero(~va_mask), np.flatnonzero(va_mask)
        cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                          patience=self.patience, decay_every=self.decay_every,
                          decay_factor=self.decay_factor, seed=self.seed)
        Y = y[:, None]
        self.model_, self.history_ = fit(self.model_, (Xn[tr], Y[tr], wts[tr]), (Xn[va], Y[va], wts[va]), cfg)
        return self

    def decision_scores(self, X) -> np.ndarray:
        """Probability of the erroneous class for each window, shape ``(n,)``."""
        check_is_fitted(self, "model_")
        X = self._check(X)
        return self.model_.predict_proba(self.norm_.apply(X))[:, 0]

    def predict_proba(self, X):
        p = self.decision_scores(X)
        return np.stack([1 - p, p], axis=1)

    def predict(self, X):
        return (self.decision_scores(X) >= self.threshold).astype(int)

    def to_bytes(self) -> bytes:
        check_is_fitted(self, "model_")
        meta = {"estimator": "ErrorDetector", "params": _jsonable_params(self),
                "degenerate": self.degenerate_, "n_train": self.n_train_, "pos_rate": self.pos_rate_,
                "history": self.history_}
        return encode_bundle(self.model_, self.norm_.to_dict(), meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ErrorDetector":
        b = decode_bundle(blob)
        if b.metadata.get("estimator") != "ErrorDetector":
            raise ConfigurationError("bundle does not hold an error detector")
        est = _restore_params(cls, b.metadata["params"])
        est.model_ = b.model
        est.norm_ = NormStats.from_dict(b.norm)
        est.window_ = b.model.config.input_len
        est.n_features_in_ = b.model.config.input_dim
        est.classes_ = np.array([0, 1])
        est.degenerate_ = b.metadata["degenerate"]
        est.n_train_ = b.metadata["n_train"]
        est.pos_rate_ = b.metadata["pos_rate"]
        est.history_ = b.metadata.get("history", {})
        return est


@dataclass
class ErrorScore:
    value: float
    gesture_id: int
    provenance: str
    threshold: float = 0.5

    @property
    def unsafe(self) -> bool:
        return self.value >= self.threshold


@dataclass
class DetectorLibrary:
    """Routing table from gestures to detectors plus the stage-1 model.

    Gestures with their own detector route to it; every other vocabulary
    gesture falls back to the baseline when ``fallback == "baseline"``.
    """

    detectors: dict
    baseline: ErrorDetector | None
    window: SlidingWindowSpec
    subset: FeatureSubset
    gesture_model: GestureClassifier | None = None
    vocabulary: GestureVocabulary = BLOCK_TRANSFER
    threshold: float = 0.5
    min_samples: int = 50
    fallback: str = "baseline"
    persistence_k: int = 3

    def __post_init__(self):
        if self.fallback not in ("baseline", "none"):
            raise ConfigurationError(f"unknown fallback policy {self.fallback!r}")
        if self.fallback == "baseline" and self.baseline is None:
            raise ConfigurationError("baseline fallback requested but no baseline detector given")

    def route(self, gesture_id: int):
        """``(detector, provenance)`` for a gesture."""
        gid = int(gesture_id)
        if gid in self.detectors:
            return self.detectors[gid], f"G{gid}"
        if self.fallback == "baseline":
            return self.baseline, "baseline"
        raise RoutingError(f"no detector for gesture G{gid} and no fallback")

    def routing_table(self) -> dict:
        out = {}
        for g in self.vocabulary.ids:
            try:
                out[g] = self.route(g)[1]
            except RoutingError:
                out[g] = None
        return out

    @property
    def degenerate(self) -> list:
        return sorted(g for g, d in self.detectors.items() if d.degenerate_)

    def score_window(self, gesture_id: int, window) -> ErrorScore:
        det, prov = self.route(gesture_id)
        p = float(det.decision_scores(window)[0])
        return ErrorScore(p, int(gesture_id), prov, self.threshold)

    def score_baseline(self, window) -> ErrorScore:
        if self.baseline is None:
            raise RoutingError("library has no baseline detector")
        return ErrorScore(float(self.baseline.decision_scores(window)[0]), 0, "baseline", self.threshold)

    # -- persistence

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = {}
        for g in sorted(self.detectors):
            name = f"detector_G{g}.bundle"
            (d / name).write_bytes(self.detectors[g].to_bytes())
            files[str(g)] = name
        manifest = {
            "format": LIBRARY_FORMAT,
            "window": {"w": self.window.w, "s": self.window.s},
            "subset": {"name": self.subset.name, "indices": list(self.subset.indices)},
            "vocabulary": {"name": self.vocabulary.name, "ids": list(self.vocabulary.ids)},
            "threshold": self.threshold,
            "min_samples": self.min_samples,
            "fallback": self.fallback,
            "persistence_k": self.persistence_k,
            "routing": {str(g): p for g, p in self.routing_table().items()},
            "degenerate": self.degenerate,
            "detectors": files,
            "baseline": None,
            "gesture_model": None,
        }
        if self.baseline is not None:
            (d / "baseline.bundle").write_bytes(self.baseline.to_bytes())
            manifest["baseline"] = "baseline.bundle"
        if self.gesture_model is not None:
            (d / "gesture_model.bundle").write_bytes(self.gesture_model.to_bytes())
            manifest["gesture_model"] = "gesture_model.bundle"
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return d

    @classmethod
    def load(cls, directory) -> "DetectorLibrary":
        d = Path(directory)
        m = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        if m.get("format") != LIBRARY_FORMAT:
            raise ConfigurationError(f"detector library format {m.get('format')} not supported")
        dets = {int(g): ErrorDetector.from_bytes((d / f).read_bytes()) for g, f in m["detectors"].items()}
        base = ErrorDetector.from_bytes((d / m["baseline"]).read_bytes()) if m["baseline"] else None
        gm = GestureClassifier.from_bytes((d / m["gesture_model"]).read_bytes()) if m["gesture_model"] else None
        return cls(dets, base, SlidingWindowSpec(**m["window"]),
                   FeatureSubset(m["subset"]["name"], tuple(m["subset"]["indices"])), gm,
                   GestureVocabulary(tuple(m["vocabulary"]["ids"]), m["vocabulary"]["name"]),
                   m["threshold"], m["min_samples"], m["fallback"], m["persistence_k"])


def train_baseline_detector(corpus: Sequence[Trajectory], window=SlidingWindowSpec(10, 1), subset=CG,
                            params: dict | None = None, seed=0) -> ErrorDetector:
    """One detector over every window regardless of gesture."""
    X, _, u, ti, _ = detector_windows(corpus, window, subset)
    p = dict(params or {})
    p["seed"] = derive_seed(seed, "baseline")
    return ErrorDetector(**p).fit(X, u, groups=ti)


def _near_gesture(corpus, ti, st, gid, margin):
    """Mask of windows whose start lies within ``margin`` samples of a ``gid`` sample."""
    out = np.zeros(len(st), dtype=bool)
    for k, t in enumerate(corpus):
        rows = np.flatnonzero(ti == k)
        if not len(rows):
            continue
        hit = (t.gesture_labels() == gid).astype(int)
        # dilate the indicator by margin samples on both sides
        near = np.convolve(hit, np.ones(2 * margin + 1, dtype=int), mode="same") > 0
        out[rows] = near[st[rows]]
    return out


def train_error_detectors(corpus: Sequence[Trajectory], window=SlidingWindowSpec(10, 1), subset=CG,
                          params: dict | None = None, min_samples=50, seed=0,
                          vocabulary: GestureVocabulary = BLOCK_TRANSFER, baseline: ErrorDetector | None = None,
                          gesture_model: GestureClassifier | None = None, per_gesture: dict | None = None,
                          fallback="baseline", boundary_margin=0) -> DetectorLibrary:
    """Train one detector per gesture with at least ``min_samples`` windows.

    ``per_gesture`` optionally overrides detector parameters for single
    gestures.  The baseline is trained here unless one is passed in.

    With ``boundary_margin > 0`` each detector also sees, as negatives, the
    windows of neighbouring gestures that start within that many samples of
    one of its segments.  Those are the windows a lagging or early gesture
    classifier routes to it, and they are not erroneous executions of its
    gesture.  The ``min_samples`` rule still counts only the gesture's own
    windows.
    """
    subset = FeatureSubset.coerce(subset)
    X, g, u, ti, st = detector_windows(corpus, window, subset)
    dets = {}
    for gid in vocabulary.ids:
        own = g == gid
        sel = own | _near_gesture(corpus, ti, st, gid, boundary_margin) if boundary_margin > 0 else own
        n = int(own.sum())
        if n < min_samples:
            log.info("G%d: %d windows < %d, routed to baseline", gid, n, min_samples)
            continue
        p = dict(params or {})
        p.update((per_gesture or {}).get(gid, {}))
        p["seed"] = derive_seed(seed, "detector", gid)
        y = np.where(own, u, 0)
        det = ErrorDetector(**p).fit(X[sel], y[sel], groups=ti[sel])
        if det.degenerate_:
            log.warning("G%d detector trained on a single class (degenerate)", gid)
        dets[gid] = det
    if baseline is None and fallback == "baseline":
        baseline = train_baseline_detector(corpus, window, subset, params, seed)
    return DetectorLibrary(dets, baseline, window, subset, gesture_model, vocabulary,
                           min_samples=min_samples, fallback=fallback)
