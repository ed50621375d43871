"""Forward/backward kernels for the layer set, in float64 numpy.

Tensors are batch-major.  Dense layers act on the last axis, so ``(B, T, D)``
inputs are handled as ``B * T`` rows.  Recurrent and convolutional inputs
are ``(B, T, C)``.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------- dense


def dense_forward(x, W, b):
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {W.shape}")
    return x @ W + b


def dense_backward(dy, x, W):
    """Return ``(dx, dW, db)`` for ``y = x @ W + b``."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = dy @ W.T
    return dx, dW, db


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- LSTM
# gate layout along the 4H axis: input, forget, candidate, output


def lstm_step(h, c, x, Wx, Wh, b):
    """One recurrent step; returns ``(h_next, c_next, cache)``."""
    H = Wh.shape[0]
    if x.shape[-1] != Wx.shape[0] or h.shape[-1] != H or Wx.shape[1] != 4 * H:
        raise ShapeError(f"lstm: input {x.shape} / state {h.shape} incompatible with {Wx.shape}, {Wh.shape}")
    z = x @ Wx + h @ Wh + b
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = sigmoid(z[:, 3 * H:])
    c_next = f * c + i * g
    tc = np.tanh(c_next)
    h_next = o * tc
    return h_next, c_next, (x, h, c, i, f, g, o, tc)


def lstm_forward(x, h0, c0, Wx, Wh, b):
    """Run a whole ``(B, T, D)`` sequence; returns hidden states ``(B, T, H)``,
    the final ``(h, c)`` and per-step caches."""
    B, T, _ = x.shape
    H = Wh.shape[0]
    hs = np.empty((B, T, H))
    caches = []
    h, c = h0, c0
    for t in range(T):
        h, c, cache = lstm_step(h, c, x[:, t], Wx, Wh, b)
        hs[:, t] = h
        caches.append(cache)
    return hs, (h, c), caches


def lstm_backward(dhs, caches, Wx, Wh, dh_last=None, dc_last=None):
    """Backpropagation through time over the cached sequence.

    ``dhs`` is the loss gradient w.r.t. every hidden output ``(B, T, H)``.
    Returns ``(dx, dWx, dWh, db, dh0, dc0)``.
    """
    B, T, H = dhs.shape
    D = Wx.shape[0]
    dx = np.empty((B, T, D))
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(4 * H)
    dh_next = np.zeros((B, H)) if dh_last is None else dh_last
    dc_next = np.zeros((B, H)) if dc_last is None else dc_last
    for t in range(T - 1, -1, -1):
        x, h_prev, c_prev, i, f, g, o, tc = caches[t]
        dh = dhs[:, t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc ** 2)
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        dz = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g ** 2),
            do * o * (1.0 - o),
        ], axis=1)
        dWx += x.T @ dz
        dWh += h_prev.T @ dz
        db += dz.sum(axis=0)
        dx[:, t] = dz @ Wx.T
        dh_next = dz @ Wh.T
        dc_next = dc * f
    return dx, dWx, dWh, db, dh_next, dc_next


# ---------------------------------------------------------------- conv1d


def _im2col(x, k):
    B, T, C = x.shape
    view = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)  # (B, T-k+1, C, k)
    return view.transpose(0, 1, 3, 2).reshape(B, T - k + 1, k * C)


def conv1d_forward(x, K, b):
    """Valid cross-correlation along time. ``K`` is ``(k, C, F)``; output ``(B, T-k+1, F)``."""
    k, C, F = K.shape
    if x.ndim != 3 or x.shape[2] != C:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {K.shape}")
    if k > x.shape[1]:
        raise ShapeError(f"conv1d: kernel length {k} exceeds input length {x.shape[1]}")
    cols = _im2col(x, k)
    return cols @ K.reshape(k * C, F) + b


def conv1d_backward(dy, x, K):
    """Return ``(dx, dK, db)``."""
    k, C, F = K.shape
    B, T, _ = x.shape
    Tout = T - k + 1
    cols = _im2col(x, k).reshape(B * Tout, k * C)
    dy2 = dy.reshape(B * Tout, F)
    dK = (cols.T @ dy2).reshape(k, C, F)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ K.reshape(k * C, F).T).reshape(B, Tout, k, C)
    dx = np.zeros_like(x)
    for j in range(k):
        dx[:, j:j + Tout] += dcols[:, :, j]
    return dx, dK, db


# ---------------------------------------------------------------- batch norm


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training,
                      momentum=0.9, eps=1e-5):
    """Normalise over every axis but the last.

    In training mode the batch statistics are used and the running
    statistics are returned updated; otherwise the running statistics are
    used.  Returns ``(y, cache, running_mean, running_var)``.
    """
    axes = tuple(range(x.ndim - 1))
    if training:
        n = int(np.prod([x.shape[a] for a in axes]))
        if x.shape[0] < 2 or n < 2:
            raise ValueError("batch norm needs at least 2 samples in training mode")
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean = momentum * running_mean + (1 - momentum) * mu
        running_var = momentum * running_var + (1 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, axes), running_mean, running_var


def batchnorm_backward(dy, cache, gamma):
    """Gradient through training-mode batch norm: ``(dx, dgamma, dbeta)``."""
    xhat, inv, axes = cache
    n = int(np.prod([dy.shape[a] for a in axes]))
    dbeta = dy.sum(axis=axes)
    dgamma = (dy * xhat).sum(axis=axes)
    dxhat = dy * gamma
    dx = inv / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- dropout


def dropout(x, rate, training, rng=None):
    """Inverted dropout; returns ``(y, mask)`` where ``mask`` is None at inference."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0:
        return x, None
    if rng is None:
        rng = np.random.default_rng()
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


# ---------------------------------------------------------------- losses


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, target, mask=None):
    """Mean categorical cross-entropy over rows and its gradient ``(p - y) / n``.

    ``mask`` (same leading shape as ``logits`` minus the class axis) drops
    rows from both the loss and the gradient.
    """
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(logp)
    if mask is None:
        mask = np.ones(logits.shape[:-1])
    n = max(mask.sum(), 1.0)
    loss = -(target * logp).sum(axis=-1)
    grad = (p - target) * mask[..., None] / n
    return float((loss * mask).sum() / n), grad


def sigmoid_bce(logits, target, weight=None):
    """Mean binary cross-entropy on logits; gradient ``(sigmoid(z) - y) / n``.

    Optional per-element ``weight`` (broadcastable to ``logits``) gives a
    weighted mean normalised by the total weight.
    """
    z = logits
    loss = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    if weight is None:
        n = z.size
        return float(loss.sum() / n), (sigmoid(z) - target) / n
    w = np.broadcast_to(weight, z.shape)
    n = max(float(w.sum()), 1e-12)
    return float((w * loss).sum() / n), w * (sigmoid(z) - target) / n


# ---------------------------------------------------------------- optimiser


class AdamState:
    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps


def adam_step(params, grads, state: AdamState, lr):
    """Bias-corrected Adam update, in place on ``params``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
