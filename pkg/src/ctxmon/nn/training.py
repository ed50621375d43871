from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .functional import AdamState, adam_step
from .model import Sequential

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 0.5
    decay_every: int = 20
    patience: int = 10
    batch_size: int = 32
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")

    def to_dict(self):
        return asdict(self)


def step_decay(lr0, epoch, factor, every):
    """Learning rate for 0-based ``epoch``."""
    return lr0 * factor ** (epoch // every)


class EarlyStopping:
    def __init__(self, patience):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.best_weights = None
        self.wait = 0

    def update(self, epoch, loss, model) -> bool:
        """Record one epoch's validation loss; True means stop."""
        if loss < self.best:
            self.best, self.best_epoch, self.wait = loss, epoch, 0
            self.best_weights = model.get_weights()
            return False
        self.wait += 1
        return self.wait >= self.patience


def _take(arr, idx):
    return None if arr is None else arr[idx]


def fit(model: Sequential, train, val, cfg: TrainConfig, verbose=False):
    """Mini-batch Adam with step decay and early stopping on validation loss.

    ``train`` and ``val`` are ``(X, y)`` or ``(X, y, mask)`` tuples.  The
    weights from the best validation epoch are restored before returning.
    """
    X, y, m = (tuple(train) + (None,))[:3]
    Xv, yv, mv = (tuple(val) + (None,))[:3]
    if len(X) == 0 or len(Xv) == 0:
        raise ValueError("fit needs non-empty training and validation sets")
    model.reseed(cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    state = AdamState([p.shape for _, _, p in model.parameters()], cfg.beta1, cfg.beta2, cfg.eps)
    params = [p for _, _, p in model.parameters()]
    stopper = EarlyStopping(cfg.patience)
    history = {"loss": [], "val_loss": [], "lr": []}
    n = len(X)
    for epoch in range(cfg.max_epochs):
        lr = step_decay(cfg.lr, epoch, cfg.decay_factor, cfg.decay_every)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2 and n >= 2:
                idx = order[max(0, start - 1):start + 1]
            loss = model.loss_and_grad(X[idx], y[idx], _take(m, idx))
            adam_step(params, model.gradients(), state, lr)
            total += loss * len(idx)
        val_loss = model.evaluate_loss(Xv, yv, mv)
        history["loss"].append(total / n)
        history["val_loss"].append(val_loss)
        history["lr"].append(lr)
        if verbose:
            log.info("epoch %d lr %.2e loss %.4f val %.4f", epoch + 1, lr, total / n, val_loss)
        if stopper.update(epoch, val_loss, model):
            break
    model.set_weights(stopper.best_weights)
    history["best_epoch"] = stopper.best_epoch + 1
    history["epochs"] = len(history["loss"])
    return model, history
