"""Classification metrics and divergence analysis between error distributions."""
from __future__ import annotations

import csv
import itertools
import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


class DivergenceError(ValueError):
    pass


# ---------------------------------------------------------------- confusion metrics


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @classmethod
    def from_labels(cls, y_true, y_pred):
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        return cls(int((t & p).sum()), int((~t & p).sum()), int((~t & ~p).sum()), int((t & ~p).sum()))

    def to_dict(self):
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def _ratio(a, b):
    return a / b if b > 0 else None


def confusion_metrics(c: ConfusionCounts) -> dict:
    """TPR, TNR, PPV, NPV, F1 and accuracy; a zero denominator gives ``None``."""
    tpr = _ratio(c.tp, c.tp + c.fn)
    ppv = _ratio(c.tp, c.tp + c.fp)
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    return {
        "TPR": tpr,
        "TNR": _ratio(c.tn, c.tn + c.fp),
        "PPV": ppv,
        "NPV": _ratio(c.tn, c.tn + c.fn),
        "F1": f1,
        "ACC": _ratio(c.tp + c.tn, c.total),
    }


def micro_average(counts: Sequence[ConfusionCounts]) -> dict:
    """Metrics of the summed counts."""
    total = ConfusionCounts()
    for c in counts:
        total = total + c
    return confusion_metrics(total)


# ---------------------------------------------------------------- ROC


@dataclass
class RocResult:
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def to_dict(self):
        return {"auc": self.auc, "fpr": self.fpr.tolist(), "tpr": self.tpr.tolist(),
                "thresholds": self.thresholds.tolist()}


def roc_curve(scores, labels) -> RocResult | None:
    """Threshold sweep over the distinct scores (descending) with trapezoidal area.

    Tied scores move the curve diagonally, which counts tied pos/neg pairs as
    one half.  Returns ``None`` when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    P, N = int(y.sum()), int((~y).sum())
    if P == 0 or N == 0:
        return None
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / P]
    fpr = np.r_[0.0, fp / N]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
    return RocResult(auc, fpr, tpr, np.r_[np.inf, s[last]])


def roc_auc(scores, labels) -> float | None:
    r = roc_curve(scores, labels)
    return None if r is None else r.auc


# ---------------------------------------------------------------- KDE


@dataclass
class DensityEstimate:
    samples: np.ndarray
    bandwidth: np.ndarray
    dims: np.ndarray

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def d(self):
        return self.samples.shape[1]


def scott_bandwidth(samples: np.ndarray) -> np.ndarray:
    n, d = samples.shape
    return samples.std(axis=0, ddof=1) * n ** (-1.0 / (d + 4))


def kde_fit(samples, jitter=1e-6, seed=0) -> DensityEstimate:
    """Product-Gaussian KDE with per-dimension Scott bandwidths.

    Zero-variance dimensions are dropped with a warning; when every
    dimension is constant a tiny jitter keeps the estimate well defined.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2 or X.shape[1] < 1:
        raise ValueError("KDE needs at least 2 samples of dimension >= 1")
    sd = X.std(axis=0, ddof=1)
    keep = np.flatnonzero(sd > 0)
    if len(keep) < X.shape[1]:
        dropped = sorted(set(range(X.shape[1])) - set(keep.tolist()))
        if len(keep) == 0:
            rng = np.random.default_rng(seed)
            X = X + rng.normal(scale=jitter, size=X.shape)
            keep = np.arange(X.shape[1])
        else:
            warnings.warn(f"dropping zero-variance KDE dimensions {dropped}", RuntimeWarning, stacklevel=2)
    Xk = X[:, keep]
    return DensityEstimate(Xk, scott_bandwidth(Xk), keep)


def kde_eval(est: DensityEstimate, points, chunk=4096) -> np.ndarray:
    """Density at ``points`` (``(m, d)`` in the original dimensions, or the kept ones)."""
    P = np.asarray(points, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    if P.shape[1] != est.d:
        P = P[:, est.dims]
    h = est.bandwidth
    norm = 1.0 / (est.n * np.prod(h) * (2 * np.pi) ** (est.d / 2))
    out = np.empty(len(P))
    for a in range(0, len(P), chunk):
        z = (P[a:a + chunk, None, :] - est.samples[None]) / h
        out[a:a + chunk] = np.exp(-0.5 * (z * z).sum(axis=2)).sum(axis=1) * norm
    return out


# ---------------------------------------------------------------- JSD


def _xlog2(p, q):
    out = np.zeros_like(p)
    # subnormal p can make the mixture underflow to 0; those terms are negligible
    m = (p > 0) & (q > 0)
    out[m] = p[m] * np.log2(p[m] / q[m])
    return out


def jsd_discrete(p, q) -> float:
    """Base-2 JSD between two nonnegative weight vectors (normalised here)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)
    v = 0.5 * _xlog2(p, m).sum() + 0.5 * _xlog2(q, m).sum()
    return float(min(max(v, 0.0), 1.0))


def make_grid(ests: Sequence[DensityEstimate], n_points=200, pad=8.0):
    """Per-dimension axes covering every sample set plus ``pad`` bandwidths.

    Each estimate contributes its own uniform block of ``n_points / len(ests)``
    nodes over its own support, and the blocks are merged.  A class that is
    orders of magnitude narrower than another is still resolved.  The pad
    is wide because a block's end nodes inherit half of the neighbouring
    gap as trapezoid weight, so the density there must be negligible.
    """
    d = ests[0].d
    per = max(2, n_points // len(ests))
    axes = []
    for j in range(d):
        blocks = [np.linspace(e.samples[:, j].min() - pad * e.bandwidth[j],
                              e.samples[:, j].max() + pad * e.bandwidth[j], per) for e in ests]
        axes.append(np.unique(np.concatenate(blocks)))
    return axes


def _trapezoid_weights(axis):
    w = np.zeros(len(axis))
    dx = np.diff(axis)
    w[:-1] += 0.5 * dx
    w[1:] += 0.5 * dx
    return w


def _grid_points(axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def js_divergence(p: DensityEstimate, q: DensityEstimate, grid=None, n_points=200, tol=0.05) -> float:
    """Jensen-Shannon divergence (base 2) by quadrature on a shared grid.

    ``grid`` is a list of 1-D axes (one per dimension, at most 2), possibly
    non-uniform; cells are weighted by the trapezoid rule.  Raises
    ``DivergenceError`` when either density integrates to something more
    than ``tol`` away from 1 on the grid.
    """
    if p.d != q.d:
        raise DivergenceError("densities have different dimensions")
    if p.d > 2:
        raise DivergenceError("grid quadrature is limited to 2 dimensions; use pairwise marginals")
    axes = grid if grid is not None else make_grid([p, q], n_points)
    pts = _grid_points(axes)
    w = _trapezoid_weights(axes[0])
    for a in axes[1:]:
        w = np.multiply.outer(w, _trapezoid_weights(a))
    w = w.ravel()
    fp = kde_eval(p, pts) * w
    fq = kde_eval(q, pts) * w
    for name, mass in (("p", fp.sum()), ("q", fq.sum())):
        if abs(mass - 1.0) > tol:
            raise DivergenceError(f"grid too coarse or narrow: {name} integrates to {mass:.4f}")
    return jsd_discrete(fp, fq)


def js_divergence_samples(a, b, n_points=200, max_pairs=None) -> float:
    """JSD between two sample sets; above 2 dimensions the mean over all
    2-D pairwise marginals is used."""
    A = np.asarray(a, dtype=np.float64)
    B = np.asarray(b, dtype=np.float64)
    if A.ndim == 1:
        A, B = A[:, None], B[:, None]
    d = A.shape[1]
    if d <= 2:
        return js_divergence(kde_fit(A), kde_fit(B), n_points=n_points)
    vals = []
    pairs = list(itertools.combinations(range(d), 2))
    if max_pairs is not None:
        pairs = pairs[:max_pairs]
    for i, j in pairs:
        cols = [i, j]
        pa, pb = A[:, cols], B[:, cols]
        if np.any(pa.std(axis=0) == 0) or np.any(pb.std(axis=0) == 0):
            continue
        vals.append(js_divergence(kde_fit(pa), kde_fit(pb), n_points=n_points))
    if not vals:
        raise DivergenceError("no usable pairwise marginals")
    return float(np.mean(vals))


@dataclass
class DivergenceMatrix:
    classes: list
    values: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", *[f"G{c}" for c in self.classes]])
            for c, row in zip(self.classes, self.values):
                w.writerow([f"G{c}", *[repr(float(v)) for v in row]])

    def largest_pairs(self, k=3):
        n = len(self.classes)
        pairs = [(self.values[i, j], self.classes[i], self.classes[j]) for i in range(n) for j in range(i + 1, n)]
        return sorted(pairs, reverse=True)[:k]


def divergence_matrix(samples_by_class: dict, min_samples=30, n_points=200, max_samples=400,
                      seed=0) -> DivergenceMatrix:
    """Pairwise JSD between per-class sample sets (e.g. erroneous windows per gesture).

    Classes with fewer than ``min_samples`` rows are omitted with a warning.
    Large classes are subsampled to ``max_samples`` rows with a fixed seed.
    """
    eligible = {}
    for c in sorted(samples_by_class):
        X = np.asarray(samples_by_class[c], dtype=np.float64)
        if len(X) < min_samples:
            warnings.warn(f"class {c} has {len(X)} samples < {min_samples}; omitted", RuntimeWarning, stacklevel=2)
            continue
        if len(X) > max_samples:
            idx = np.sort(np.random.default_rng([seed, int(c)]).choice(len(X), max_samples, replace=False))
            X = X[idx]
        eligible[c] = X
    classes = list(eligible)
    if len(classes) < 2:
        raise DivergenceError("need at least two classes with enough samples")
    n = len(classes)
    M = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            M[i, j] = M[j, i] = js_divergence_samples(eligible[classes[i]], eligible[classes[j]], n_points)
    return DivergenceMatrix(classes, M)


def erroneous_window_features(corpus, spec, subset):
    """Per-gesture matrix of erroneous windows, each window averaged over time."""
    from .classifiers import detector_windows

    X, g, u, _, _ = detector_windows(corpus, spec, subset)
    out = {}
    for gid in np.unique(g):
        sel = (g == gid) & (u == 1)
        if sel.any():
            out[int(gid)] = X[sel].mean(axis=1)
    return out
