"""Hot numeric kernels, JIT-compiled with numba when available.

Every kernel has two interchangeable implementations: an explicit-loop
version compiled with ``numba.njit`` and a vectorized pure-numpy fallback.
The active path is chosen once at import time:

* ``GEOCAP_NUMBA=0`` in the environment forces the numpy fallback,
* otherwise numba is used when it can be imported.

Both paths compute the same quantities in the same operation order up to
floating point reassociation; ``tests/test_accel.py`` checks agreement and
``benchmarks/bench_kernels.py`` compares their speed.
"""

from __future__ import annotations

import math
import os

import numpy as np


def _numba_requested() -> bool:
    flag = os.environ.get("GEOCAP_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


NUMBA_ENABLED = False
if _numba_requested():
    try:
        from numba import njit as _njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - mirror always has numba
        NUMBA_ENABLED = False

if not NUMBA_ENABLED:

    def _njit(*args, **kwargs):
        # identity decorator so the loop implementations stay importable
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


# ---------------------------------------------------------------------------
# row-wise softmax


def softmax_rows_np(x):
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=1, keepdims=True)


def _softmax_rows_loop(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        m = x[i, 0]
        for j in range(1, x.shape[1]):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(x.shape[1]):
            v = np.exp(x[i, j] - m)
            out[i, j] = v
            s += v
        for j in range(x.shape[1]):
            out[i, j] = out[i, j] / s
    return out


def softmax_rows_grad_np(y, gy):
    dot = np.sum(y * gy, axis=1, keepdims=True)
    return y * (gy - dot)


def _softmax_rows_grad_loop(y, gy):
    gx = np.empty_like(y)
    for i in range(y.shape[0]):
        dot = 0.0
        for j in range(y.shape[1]):
            dot += y[i, j] * gy[i, j]
        for j in range(y.shape[1]):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return gx


def log_softmax_rows_np(x):
    m = np.max(x, axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    return z - lse


def _log_softmax_rows_loop(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        m = x[i, 0]
        for j in range(1, x.shape[1]):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(x.shape[1]):
            z = x[i, j] - m
            out[i, j] = z
            s += np.exp(z)
        lse = np.log(s)
        for j in range(x.shape[1]):
            out[i, j] = out[i, j] - lse
    return out


# ---------------------------------------------------------------------------
# layer normalization over the last axis of a 2-d array


def layer_norm_rows_np(x, gamma, beta, eps):
    mean = np.mean(x, axis=1)
    var = np.mean((x - mean[:, None]) ** 2, axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gamma + beta, mean, rstd


def _layer_norm_rows_loop(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    mean = np.empty(n, dtype=x.dtype)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            diff = x[i, j] - mu
            var += diff * diff
        var /= d
        rs = 1.0 / np.sqrt(var + eps)
        mean[i] = mu
        rstd[i] = rs
        for j in range(d):
            y[i, j] = (x[i, j] - mu) * rs * gamma[j] + beta[j]
    return y, mean, rstd


def layer_norm_rows_grad_np(gy, x, gamma, mean, rstd):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dxhat = gy * gamma
    m1 = np.mean(dxhat, axis=1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=1, keepdims=True)
    gx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    dgamma = np.sum(gy * xhat, axis=0)
    dbeta = np.sum(gy, axis=0)
    return gx, dgamma, dbeta


def _layer_norm_rows_grad_loop(gy, x, gamma, mean, rstd):
    n, d = x.shape
    gx = np.empty_like(x)
    dgamma = np.zeros(d, dtype=x.dtype)
    dbeta = np.zeros(d, dtype=x.dtype)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xh = (x[i, j] - mean[i]) * rstd[i]
            dxh = gy[i, j] * gamma[j]
            m1 += dxh
            m2 += dxh * xh
            dgamma[j] += gy[i, j] * xh
            dbeta[j] += gy[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            xh = (x[i, j] - mean[i]) * rstd[i]
            dxh = gy[i, j] * gamma[j]
            gx[i, j] = rstd[i] * (dxh - m1 - xh * m2)
    return gx, dgamma, dbeta


# ---------------------------------------------------------------------------
# great-circle distances from one point to many (radians in, km out)

EARTH_RADIUS_KM = 6371.0


def haversine_many_np(lat0, lon0, lats, lons):
    dphi = lats - lat0
    dlam = lons - lon0
    h = np.sin(dphi / 2.0) ** 2 + math.cos(lat0) * np.cos(lats) * np.sin(dlam / 2.0) ** 2
    h = np.minimum(h, 1.0)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(h))


def _haversine_many_loop(lat0, lon0, lats, lons):
    out = np.empty(lats.shape[0], dtype=np.float64)
    c0 = np.cos(lat0)
    for i in range(lats.shape[0]):
        sp = np.sin((lats[i] - lat0) / 2.0)
        sl = np.sin((lons[i] - lon0) / 2.0)
        h = sp * sp + c0 * np.cos(lats[i]) * sl * sl
        if h > 1.0:
            h = 1.0
        out[i] = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(h))
    return out


# ---------------------------------------------------------------------------
# full-batch gradient descent for L2-regularized logistic regression


def logreg_gd_np(X, y, lr, l2, tol, max_epochs):
    n, f = X.shape
    w = np.zeros(f, dtype=np.float64)
    b = 0.0
    prev = np.inf
    loss = np.inf
    epochs = 0
    for epoch in range(max_epochs):
        z = X @ w + b
        # stable softplus(z) - y*z
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z)) + 0.5 * l2 * float(w @ w)
        p = 1.0 / (1.0 + np.exp(-z))
        d = (p - y) / n
        gw = X.T @ d + l2 * w
        gb = float(np.sum(d))
        w -= lr * gw
        b -= lr * gb
        epochs = epoch + 1
        if np.isfinite(prev) and abs(prev - loss) < tol * max(abs(prev), 1e-12):
            break
        prev = loss
    return w, b, epochs, loss


def _logreg_gd_loop(X, y, lr, l2, tol, max_epochs):
    n, f = X.shape
    w = np.zeros(f, dtype=np.float64)
    b = 0.0
    prev = np.inf
    loss = np.inf
    epochs = 0
    for epoch in range(max_epochs):
        loss = 0.0
        gw = np.zeros(f, dtype=np.float64)
        gb = 0.0
        for i in range(n):
            z = b
            for k in range(f):
                z += X[i, k] * w[k]
            if z > 0.0:
                loss += z + np.log1p(np.exp(-z)) - y[i] * z
            else:
                loss += np.log1p(np.exp(z)) - y[i] * z
            d = (1.0 / (1.0 + np.exp(-z)) - y[i]) / n
            for k in range(f):
                gw[k] += d * X[i, k]
            gb += d
        loss = loss / n
        reg = 0.0
        for k in range(f):
            reg += w[k] * w[k]
        loss += 0.5 * l2 * reg
        for k in range(f):
            w[k] -= lr * (gw[k] + l2 * w[k])
        b -= lr * gb
        epochs = epoch + 1
        if np.isfinite(prev) and abs(prev - loss) < tol * max(abs(prev), 1e-12):
            break
        prev = loss
    return w, b, epochs, loss


# ---------------------------------------------------------------------------
# fused Adam update with per-element gradient value clipping (in place)


def adam_step_np(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2, clip):
    if clip > 0.0:
        g = np.clip(g, -clip, clip)
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _adam_step_loop(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2, clip):
    for i in range(p.shape[0]):
        gi = g[i]
        if clip > 0.0:
            if gi > clip:
                gi = clip
            elif gi < -clip:
                gi = -clip
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
        p[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)


# ---------------------------------------------------------------------------
# path selection

if NUMBA_ENABLED:
    softmax_rows = _njit(cache=True)(_softmax_rows_loop)
    softmax_rows_grad = _njit(cache=True)(_softmax_rows_grad_loop)
    log_softmax_rows = _njit(cache=True)(_log_softmax_rows_loop)
    layer_norm_rows = _njit(cache=True)(_layer_norm_rows_loop)
    layer_norm_rows_grad = _njit(cache=True)(_layer_norm_rows_grad_loop)
    haversine_many = _njit(cache=True)(_haversine_many_loop)
    logreg_gd = _njit(cache=True)(_logreg_gd_loop)
    adam_step = _njit(cache=True)(_adam_step_loop)
else:
    softmax_rows = softmax_rows_np
    softmax_rows_grad = softmax_rows_grad_np
    log_softmax_rows = log_softmax_rows_np
    layer_norm_rows = layer_norm_rows_np
    layer_norm_rows_grad = layer_norm_rows_grad_np
    haversine_many = haversine_many_np
    logreg_gd = logreg_gd_np
    adam_step = adam_step_np

# kernels by name: (numpy implementation, loop implementation). The loop
# implementations are plain python here; benchmarks jit them on demand.
KERNEL_IMPLS = {
    "softmax_rows": (softmax_rows_np, _softmax_rows_loop),
    "softmax_rows_grad": (softmax_rows_grad_np, _softmax_rows_grad_loop),
    "log_softmax_rows": (log_softmax_rows_np, _log_softmax_rows_loop),
    "layer_norm_rows": (layer_norm_rows_np, _layer_norm_rows_loop),
    "layer_norm_rows_grad": (layer_norm_rows_grad_np, _layer_norm_rows_grad_loop),
    "haversine_many": (haversine_many_np, _haversine_many_loop),
    "logreg_gd": (logreg_gd_np, _logreg_gd_loop),
    "adam_step": (adam_step_np, _adam_step_loop),
}
