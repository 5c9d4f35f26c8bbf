"""Pure-numpy kernels. Mirrors the API of the compiled ``_kernels`` module.

Every kernel takes a layout tuple ``(kind, act, d, h, o, bias)`` followed by
the flat parameter vector and a batch of rows. Losses and gradients here are
*unregularized*; the l2 term is added by :mod:`datadrop.model`.

Parameter layout is weights-then-biases, layer by layer, row-major:

* linear / softmax: ``W (o, d)``, ``b (o,)``
* mlp: ``W1 (h, d)``, ``b1 (h,)``, ``W2 (o, h)``, ``b2 (o,)``
"""
from __future__ import annotations

import numpy as np

LINEAR = 0
SOFTMAX = 1
MLP = 2

TANH = 0
RELU = 1


def _unpack(lay, params):
    kind, act, d, h, o, bias = lay
    if kind == MLP:
        off = h * d
        W1 = params[:off].reshape(h, d)
        b1 = params[off:off + h] if bias else None
        off += h if bias else 0
        W2 = params[off:off + o * h].reshape(o, h)
        off += o * h
        b2 = params[off:off + o] if bias else None
        return W1, b1, W2, b2
    W = params[: o * d].reshape(o, d)
    b = params[o * d: o * d + o] if bias else None
    return W, b


def _pack(lay, blocks, n):
    """Flatten per-row blocks ``[(n, ...), ...]`` into an ``(n, p)`` matrix."""
    return np.concatenate([blk.reshape(n, -1) for blk in blocks if blk is not None], axis=1)


def _softmax(z):
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    return e / s, (np.log(s) + m)[:, 0]


def _activate(act, a):
    if act == TANH:
        hh = np.tanh(a)
        d1 = 1.0 - hh * hh
        d2 = -2.0 * hh * d1
    else:
        hh = np.maximum(a, 0.0)
        d1 = (a > 0.0).astype(np.float64)
        d2 = np.zeros_like(a)
    return hh, d1, d2


def _forward(lay, params, X):
    kind, act, d, h, o, bias = lay
    if kind == MLP:
        W1, b1, W2, b2 = _unpack(lay, params)
        a = X @ W1.T
        if bias:
            a += b1
        hh, d1, d2 = _activate(act, a)
        z = hh @ W2.T
        if bias:
            z += b2
        return z, (a, hh, d1, d2)
    W, b = _unpack(lay, params)
    z = X @ W.T
    if bias:
        z += b
    return z, None


def _output_delta(kind, z, y):
    """Per-row loss and dloss/dz."""
    n = z.shape[0]
    if kind == LINEAR:
        r = z[:, 0] - y
        return 0.5 * r * r, r[:, None]
    p, lse = _softmax(z)
    cls = y.astype(np.int64)
    rows = np.arange(n)
    losses = lse - z[rows, cls]
    delta = p
    delta[rows, cls] -= 1.0
    return losses, delta


def _row_grads(lay, params, X, y):
    """Per-row gradient blocks plus per-row losses."""
    kind, act, d, h, o, bias = lay
    z, cache = _forward(lay, params, X)
    losses, dz = _output_delta(kind, z, y)
    if kind == MLP:
        a, hh, d1, _ = cache
        W1, b1, W2, b2 = _unpack(lay, params)
        gW2 = dz[:, :, None] * hh[:, None, :]
        da = (dz @ W2) * d1
        gW1 = da[:, :, None] * X[:, None, :]
        blocks = [gW1, da if bias else None, gW2, dz if bias else None]
        return losses, blocks
    gW = dz[:, :, None] * X[:, None, :]
    return losses, [gW, dz if bias else None]


def sample_losses(lay, params, X, y, out):
    z, _ = _forward(lay, params, X)
    losses, _ = _output_delta(lay[0], z, y)
    out[:] = losses


def sample_grads(lay, params, X, y, out):
    n = X.shape[0]
    _, blocks = _row_grads(lay, params, X, y)
    out[:, :] = _pack(lay, blocks, n)


def loss_grad(lay, params, X, y, grad_out):
    """Mean loss over rows; mean gradient written into ``grad_out``."""
    kind, act, d, h, o, bias = lay
    n = X.shape[0]
    z, cache = _forward(lay, params, X)
    losses, dz = _output_delta(kind, z, y)
    if kind == MLP:
        a, hh, d1, _ = cache
        W1, b1, W2, b2 = _unpack(lay, params)
        da = (dz @ W2) * d1
        parts = [da.T @ X, da.sum(axis=0) if bias else None,
                 dz.T @ hh, dz.sum(axis=0) if bias else None]
    else:
        parts = [dz.T @ X, dz.sum(axis=0) if bias else None]
    grad_out[:] = np.concatenate([q.ravel() for q in parts if q is not None]) / n
    return float(losses.sum() / n)


def hvp_mean(lay, params, X, y, v, out):
    """Mean over rows of the exact per-row Hessian applied to ``v``.

    Forward-over-reverse (R-operator) recurrence, no finite differences.
    """
    kind, act, d, h, o, bias = lay
    n = X.shape[0]
    z, cache = _forward(lay, params, X)

    if kind == LINEAR:
        V, c = _unpack(lay, v)
        rz = X @ V.T
        if bias:
            rz += c
        parts = [rz.T @ X, rz.sum(axis=0) if bias else None]
        out[:] = np.concatenate([q.ravel() for q in parts if q is not None]) / n
        return

    p, _ = _softmax(z)
    if kind == SOFTMAX:
        V, c = _unpack(lay, v)
        rz = X @ V.T
        if bias:
            rz += c
        rd = p * (rz - (p * rz).sum(axis=1, keepdims=True))
        parts = [rd.T @ X, rd.sum(axis=0) if bias else None]
        out[:] = np.concatenate([q.ravel() for q in parts if q is not None]) / n
        return

    a, hh, d1, d2 = cache
    W1, b1, W2, b2 = _unpack(lay, params)
    V1, c1, V2, c2 = _unpack(lay, v)
    cls = y.astype(np.int64)
    dz = p.copy()
    dz[np.arange(n), cls] -= 1.0

    ra = X @ V1.T
    if bias:
        ra += c1
    rh = d1 * ra
    rz = hh @ V2.T + rh @ W2.T
    if bias:
        rz += c2
    rdz = p * (rz - (p * rz).sum(axis=1, keepdims=True))
    dh = dz @ W2
    rdh = dz @ V2 + rdz @ W2
    rda = rdh * d1 + dh * d2 * ra

    parts = [rda.T @ X, rda.sum(axis=0) if bias else None,
             rdz.T @ hh + dz.T @ rh, rdz.sum(axis=0) if bias else None]
    out[:] = np.concatenate([q.ravel() for q in parts if q is not None]) / n


def logits(lay, params, X, out):
    z, _ = _forward(lay, params, X)
    out[:, :] = z


def neg_dots(G, s, out):
    # row-by-row so a single-row call reproduces the same bits
    for i in range(G.shape[0]):
        out[i] = -np.dot(G[i], s)
