"""Layer objects wrapping the functional kernels.

Every layer keeps its trainable arrays in ``params`` and the matching
gradients (filled by ``backward``) in ``grads``.  Non-trainable state such
as batch-norm running statistics lives in ``buffers``.
"""
from __future__ import annotations

import numpy as np

from . import functional as F


def _uniform(rng, fan_in, shape):
    lim = np.sqrt(1.0 / fan_in)
    return rng.uniform(-lim, lim, shape)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def step(self, x, state):
        """Streaming inference on one time step ``(B, D)``."""
        return self.forward(x, training=False), state

    def initial_state(self, batch):
        return None

    def spec(self) -> dict:
        return {"kind": self.kind}


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, activation=None, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.activation = activation
        self.params["W"] = _uniform(rng, n_in, (n_in, n_out))
        self.params["b"] = np.zeros(n_out)

    def forward(self, x, training=False, rng=None):
        self._x = x
        z = F.dense_forward(x, self.params["W"], self.params["b"])
        if self.activation == "relu":
            self._z = z
            return F.relu(z)
        return z

    def backward(self, dy):
        if self.activation == "relu":
            dy = F.relu_backward(dy, self._z)
        dx, self.grads["W"], self.grads["b"] = F.dense_backward(dy, self._x, self.params["W"])
        return dx

    def spec(self):
        return {"kind": self.kind, "units": self.params["W"].shape[1], "activation": self.activation}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, rng=None):
        self._x = x
        return F.relu(x)

    def backward(self, dy):
        return F.relu_backward(dy, self._x)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate

    def forward(self, x, training=False, rng=None):
        y, self._mask = F.dropout(x, self.rate, training and rng is not None, rng)
        return y

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask

    def spec(self):
        return {"kind": self.kind, "rate": self.rate}


class LSTM(Layer):
    kind = "lstm"

    def __init__(self, n_in, units, return_sequences=True, rng=None, forget_bias=1.0):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.units = units
        self.return_sequences = return_sequences
        self.params["Wx"] = _uniform(rng, n_in, (n_in, 4 * units))
        self.params["Wh"] = _uniform(rng, units, (units, 4 * units))
        b = np.zeros(4 * units)
        b[units:2 * units] = forget_bias
        self.params["b"] = b

    def initial_state(self, batch):
        return np.zeros((batch, self.units)), np.zeros((batch, self.units))

    def forward(self, x, training=False, rng=None):
        h0, c0 = self.initial_state(x.shape[0])
        p = self.params
        hs, _, self._caches = F.lstm_forward(x, h0, c0, p["Wx"], p["Wh"], p["b"])
        self._T = x.shape[1]
        return hs if self.return_sequences else hs[:, -1]

    def backward(self, dy):
        if not self.return_sequences:
            full = np.zeros((dy.shape[0], self._T, self.units))
            full[:, -1] = dy
            dy = full
        p = self.params
        dx, dWx, dWh, db, _, _ = F.lstm_backward(dy, self._caches, p["Wx"], p["Wh"])
        self.grads.update(Wx=dWx, Wh=dWh, b=db)
        return dx

    def step(self, x, state):
        h, c = state
        p = self.params
        h, c, _ = F.lstm_step(h, c, x, p["Wx"], p["Wh"], p["b"])
        return h, (h, c)

    def spec(self):
        return {"kind": self.kind, "units": self.units, "return_sequences": self.return_sequences}


class Conv1D(Layer):
    kind = "conv1d"

    def __init__(self, n_in, filters, kernel, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params["K"] = _uniform(rng, kernel * n_in, (kernel, n_in, filters))
        self.params["b"] = np.zeros(filters)

    def forward(self, x, training=False, rng=None):
        self._x = x
        return F.conv1d_forward(x, self.params["K"], self.params["b"])

    def backward(self, dy):
        dx, self.grads["K"], self.grads["b"] = F.conv1d_backward(dy, self._x, self.params["K"])
        return dx

    def spec(self):
        k, _, f = self.params["K"].shape
        return {"kind": self.kind, "filters": f, "kernel": k}


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, n_features, momentum=0.9, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(n_features)
        self.params["beta"] = np.zeros(n_features)
        self.buffers["running_mean"] = np.zeros(n_features)
        self.buffers["running_var"] = np.ones(n_features)

    def forward(self, x, training=False, rng=None):
        y, self._cache, rm, rv = F.batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            training, self.momentum, self.eps,
        )
        if training:
            self.buffers["running_mean"], self.buffers["running_var"] = rm, rv
        return y

    def backward(self, dy):
        dx, self.grads["gamma"], self.grads["beta"] = F.batchnorm_backward(dy, self._cache, self.params["gamma"])
        return dx
