"""Small fully connected binary classifier trained with momentum SGD.

ReLU hidden layers, a single logit output and a class-weighted binary
cross-entropy loss.  Gradients are computed by hand; everything is dense
``float64`` numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def init_params(widths: Sequence[int], rng: np.random.Generator) -> list:
    """He-normal weights and zero biases, ``[W1, b1, W2, b2, ...]``."""
    params = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        params.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        params.append(np.zeros(fan_out))
    return params


def forward(params: list, X: np.ndarray, keep: bool = False):
    """Logits of shape ``(n,)``; with ``keep`` also the layer activations."""
    acts = [X]
    h = X
    n_layers = len(params) // 2
    for i in range(n_layers):
        z = h @ params[2 * i] + params[2 * i + 1]
        if i < n_layers - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    logits = h[:, 0]
    return (logits, acts) if keep else logits


def loss(params: list, X, y, w) -> float:
    z = forward(params, X)
    return float(np.sum(w * (softplus(z) - y * z)) / np.sum(w))


def loss_and_grad(params: list, X, y, w):
    """Weighted mean BCE and its gradient with respect to every parameter."""
    z, acts = forward(params, X, keep=True)
    wsum = np.sum(w)
    value = float(np.sum(w * (softplus(z) - y * z)) / wsum)
    g = ((sigmoid(z) - y) * w / wsum)[:, None]
    grads = [None] * len(params)
    n_layers = len(params) // 2
    for i in reversed(range(n_layers)):
        a = acts[i]
        grads[2 * i] = a.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = (g @ params[2 * i].T) * (a > 0)
    return value, grads


def predict_proba(params: list, X) -> np.ndarray:
    return sigmoid(forward(params, X))


@dataclass
class TrainResult:
    params: list
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def train(
    X,
    y,
    w,
    hidden: Sequence[int],
    rng: np.random.Generator,
    learning_rate: float = 0.05,
    momentum: float = 0.9,
    batch_size: int = 512,
    max_epochs: int = 40,
    patience: int = 5,
    X_val=None,
    y_val=None,
    w_val=None,
    full_batch: bool = False,
) -> TrainResult:
    """Mini-batch SGD with momentum and early stopping on validation loss.

    Without validation data the final parameters are returned.  With
    ``full_batch`` each epoch is a single gradient step over all rows.
    """
    X = np.asarray(X, dtype=np.float64)
    params = init_params([X.shape[1], *hidden, 1], rng)
    velocity = [np.zeros_like(p) for p in params]
    has_val = X_val is not None
    res = TrainResult([p.copy() for p in params])
    best = np.inf
    stale = 0
    n = len(X)
    for epoch in range(max_epochs):
        order = np.arange(n) if full_batch else rng.permutation(n)
        step = n if full_batch else batch_size
        for start in range(0, n, step):
            idx = order[start : start + step]
            _, grads = loss_and_grad(params, X[idx], y[idx], w[idx])
            for p, v, g in zip(params, velocity, grads):
                v *= momentum
                v -= learning_rate * g
                p += v
        res.train_loss.append(loss(params, X, y, w))
        if not has_val:
            continue
        vl = loss(params, X_val, y_val, w_val)
        res.val_loss.append(vl)
        if vl < best - 1e-7:
            best = vl
            stale = 0
            res.best_epoch = epoch
            res.params = [p.copy() for p in params]
        else:
            stale += 1
            if stale >= patience:
                res.stopped_early = True
                break
    if not has_val:
        res.params = params
        res.best_epoch = max_epochs - 1
    return res
