from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .layers import LSTM, BatchNorm, Conv1D, Dense, Dropout, Flatten, Layer, ReLU


@dataclass
class ModelConfig:
    """Layer stack description.

    ``layers`` holds dicts such as ``{"kind": "lstm", "units": 64}`` or
    ``{"kind": "conv1d", "filters": 32, "kernel": 3}``; a linear output layer
    of width ``output_dim`` is appended.  ``input_len`` is the number of time
    steps for windowed inputs (``None`` for per-step sequence models).
    """

    layers: list = field(default_factory=list)
    input_dim: int = 1
    output_dim: int = 1
    input_len: int | None = None
    loss: str = "softmax"
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _build_layer(spec, shape, rng):
    kind = spec["kind"]
    d = shape[-1]
    if kind == "dense":
        layer = Dense(d, spec["units"], spec.get("activation"), rng=rng)
        return layer, shape[:-1] + (spec["units"],)
    if kind == "lstm":
        if len(shape) != 2:
            raise F.ShapeError("lstm layer needs a (time, features) input")
        layer = LSTM(d, spec["units"], spec.get("return_sequences", True), rng=rng,
                     forget_bias=spec.get("forget_bias", 1.0))
        return layer, ((shape[0], spec["units"]) if layer.return_sequences else (spec["units"],))
    if kind == "conv1d":
        if len(shape) != 2 or shape[0] is None:
            raise F.ShapeError("conv1d layer needs a fixed-length (time, channels) input")
        k = spec.get("kernel", 3)
        if k > shape[0]:
            raise F.ShapeError(f"conv1d kernel {k} longer than input length {shape[0]}")
        return Conv1D(d, spec["filters"], k, rng=rng), (shape[0] - k + 1, spec["filters"])
    if kind == "batchnorm":
        return BatchNorm(d, spec.get("momentum", 0.9)), shape
    if kind == "relu":
        return ReLU(), shape
    if kind == "dropout":
        return Dropout(spec.get("rate", 0.0)), shape
    if kind == "flatten":
        if any(s is None for s in shape):
            raise F.ShapeError("cannot flatten a variable-length input")
        return Flatten(), (int(np.prod(shape)),)
    raise ValueError(f"unknown layer kind {kind!r}")


class Sequential:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        self.layers: list[Layer] = []
        shape = (config.input_len, config.input_dim) if config.input_len is not None or any(
            s["kind"] in ("lstm", "conv1d") for s in config.layers) else (config.input_dim,)
        for spec in config.layers:
            layer, shape = _build_layer(spec, shape, rng)
            self.layers.append(layer)
        self.layers.append(Dense(shape[-1], config.output_dim, rng=rng))
        self.output_shape = shape[:-1] + (config.output_dim,)
        self.reseed(config.seed)

    def reseed(self, seed):
        self.dropout_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))

    # -------------------------------------------------------------- params

    def parameters(self):
        """``(layer_index, name, array)`` in a fixed order."""
        return [(i, k, layer.params[k]) for i, layer in enumerate(self.layers) for k in sorted(layer.params)]

    def gradients(self):
        return [self.layers[i].grads[k] for i, k, _ in self.parameters()]

    def buffers(self):
        return [(i, k, layer.buffers[k]) for i, layer in enumerate(self.layers) for k in sorted(layer.buffers)]

    def n_params(self) -> int:
        return int(sum(p.size for _, _, p in self.parameters()))

    def get_weights(self):
        return [p.copy() for _, _, p in self.parameters()] + [b.copy() for _, _, b in self.buffers()]

    def set_weights(self, weights):
        items = self.parameters() + self.buffers()
        if len(weights) != len(items):
            raise ValueError("weight list does not match the model")
        for (i, k, cur), w in zip(items, weights):
            if cur.shape != w.shape:
                raise F.ShapeError(f"layer {i} {k}: expected {cur.shape}, got {w.shape}")
            # in place, so optimiser references stay valid
            cur[...] = w

    # -------------------------------------------------------------- compute

    def forward(self, x, training=False, stochastic=True):
        rng = self.dropout_rng if (training and stochastic) else None
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def loss(self, logits, y, mask=None):
        if self.config.loss == "softmax":
            return F.softmax_xent(logits, y, mask)
        if mask is not None and mask.ndim == logits.ndim - 1:
            mask = mask[..., None]
        return F.sigmoid_bce(logits, y, mask)

    def loss_and_grad(self, x, y, mask=None, stochastic=True):
        logits = self.forward(x, training=True, stochastic=stochastic)
        loss, dlogits = self.loss(logits, y, mask)
        self.backward(dlogits)
        return loss

    def evaluate_loss(self, x, y, mask=None):
        return self.loss(self.forward(x, training=False), y, mask)[0]

    def predict_proba(self, x):
        logits = self.forward(x, training=False)
        if self.config.loss == "softmax":
            return F.softmax(logits)
        return F.sigmoid(logits)

    # -------------------------------------------------------------- streaming

    def initial_state(self, batch=1):
        return [layer.initial_state(batch) for layer in self.layers]

    def step(self, x, states):
        """Advance a per-step model by one sample ``(B, D)``; returns ``(logits, states)``."""
        new = []
        for layer, s in zip(self.layers, states):
            x, s = layer.step(x, s)
            new.append(s)
        return x, new


def build_model(config: ModelConfig) -> Sequential:
    return Sequential(config)


def count_lstm_params(n_in, units):
    return 4 * units * (n_in + units + 1)


def count_dense_params(n_in, units):
    return units * (n_in + 1)
