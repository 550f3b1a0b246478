"""Pure-numpy MLP kernels.

Reference implementation of the hot loops; ``_kernels.pyx`` mirrors it
operation for operation. Parameters live in one flat float64 vector laid out
per layer as ``W`` (fan_out x fan_in, row-major) followed by ``b``.
Hidden layers use ReLU; the output layer is linear.
"""

import numpy as np


def layer_views(params, widths):
    """Split a flat parameter vector into per-layer ``(W, b)`` views."""
    views = []
    off = 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w_end = off + fan_in * fan_out
        W = params[off:w_end].reshape(fan_out, fan_in)
        b = params[w_end:w_end + fan_out]
        views.append((W, b))
        off = w_end + fan_out
    return views


def _forward_cached(layers, X):
    acts = [X]
    a = X
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = a @ W.T
        z += b
        if i < last:
            np.maximum(z, 0.0, out=z)
        acts.append(z)
        a = z
    return acts


def _softmax_xent(Z, T, tau):
    s = tau * Z
    s -= s.max(axis=1, keepdims=True)
    e = np.exp(s)
    tot = e.sum(axis=1, keepdims=True)
    P = e / tot
    logp = s - np.log(tot)
    loss = -(T * logp).sum()
    return P, loss


def _backward(layers, acts, dZ, grads):
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        gW, gb = grads[i]
        a_in = acts[i]
        np.matmul(dZ.T, a_in, out=gW)
        np.sum(dZ, axis=0, out=gb)
        if i > 0:
            dZ = dZ @ W
            dZ *= a_in > 0.0


def forward(params, widths, X):
    """Logits for a batch ``X`` of shape (n, widths[0])."""
    layers = layer_views(params, widths)
    return _forward_cached(layers, X)[-1]


def batch_grad(params, widths, X, T, tau):
    """Mean softmax cross-entropy over the batch and its flat gradient."""
    layers = layer_views(params, widths)
    acts = _forward_cached(layers, X)
    P, loss = _softmax_xent(acts[-1], T, tau)
    n = X.shape[0]
    dZ = (tau / n) * (P - T)
    grad = np.zeros_like(params)
    _backward(layers, acts, dZ, layer_views(grad, widths))
    return loss / n, grad


def sgd_epoch(params, widths, X, T, order, lr, tau, batch_size):
    """One epoch of mini-batch SGD, updating ``params`` in place.

    Returns the mean per-example loss measured on each batch before its update.
    """
    layers = layer_views(params, widths)
    grad = np.zeros_like(params)
    grads = layer_views(grad, widths)
    n = order.shape[0]
    total = 0.0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        bs = idx.shape[0]
        acts = _forward_cached(layers, X[idx])
        P, loss = _softmax_xent(acts[-1], T[idx], tau)
        total += loss
        dZ = (tau / bs) * (P - T[idx])
        _backward(layers, acts, dZ, grads)
        params -= lr * grad
    return total / n
