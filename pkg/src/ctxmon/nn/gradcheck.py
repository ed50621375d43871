"""Central finite-difference check of a model's analytic gradients."""
from __future__ import annotations

import numpy as np

from .model import Sequential


def _loss(model, x, y, mask):
    logits = model.forward(x, training=True, stochastic=False)
    return model.loss(logits, y, mask)[0]


def gradient_check(model: Sequential, x, y, mask=None, fraction=0.01, min_count=20,
                   h=1e-5, seed=0, floor=1e-6) -> float:
    """Max relative error between analytic and numerical gradients.

    A random ``fraction`` of the parameters (at least ``min_count``, at most
    all of them) is probed.  Dropout is bypassed and batch-norm uses batch
    statistics; running buffers are restored afterwards.  A model without
    parameters passes vacuously with 0.0.

    The denominator is ``max(|analytic|, |numeric|, floor)``.  Central
    differences in float64 carry roughly ``eps * |loss| / h`` (about 3e-11)
    of roundoff, so gradients below ``floor`` are judged on an absolute
    scale instead of amplifying that noise.
    """
    params = model.parameters()
    if not params:
        return 0.0
    saved = [b.copy() for _, _, b in model.buffers()]
    model.loss_and_grad(x, y, mask, stochastic=False)
    grads = [g.copy() for g in model.gradients()]
    sizes = np.array([p.size for _, _, p in params])
    total = int(sizes.sum())
    n = min(total, max(min_count, int(np.ceil(fraction * total))))
    rng = np.random.default_rng(seed)
    flat_idx = np.sort(rng.choice(total, size=n, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for fi in flat_idx:
        j = int(np.searchsorted(offsets, fi, side="right") - 1)
        arr = params[j][2].reshape(-1)
        k = fi - offsets[j]
        old = arr[k]
        arr[k] = old + h
        lp = _loss(model, x, y, mask)
        arr[k] = old - h
        lm = _loss(model, x, y, mask)
        arr[k] = old
        num = (lp - lm) / (2 * h)
        ana = grads[j].reshape(-1)[k]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    for (_, _, b), s in zip(model.buffers(), saved):
        b[...] = s
    return float(worst)
