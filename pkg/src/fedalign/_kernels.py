"""Compiled per-sample kernels for online training.

Layout matches ``ModelParams.flat``. ``offsets[k] = (w_start, w_end, b_end)``;
``acts[k]`` is 0 for relu, 1 for sigmoid. No fastmath: results must be
reproducible bit-for-bit.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, error_model="numpy")
def _sig(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


@njit(cache=True, error_model="numpy")
def backward_sample(flat, dims, acts, offsets, x, y, grad, first_layer, zbuf, abuf, dbuf, dbuf2):
    """Fill grad for layers >= first_layer; returns the forward probability.

    zbuf/abuf are (n_layers+1, max_width) scratch; abuf[0] holds the input.
    """
    n = dims.shape[0] - 1
    for i in range(dims[0]):
        abuf[0, i] = x[i]
    for k in range(n):
        fan_in = dims[k]
        fan_out = dims[k + 1]
        ws = offsets[k, 0]
        we = offsets[k, 1]
        for o in range(fan_out):
            s = 0.0
            row = ws + o * fan_in
            for i in range(fan_in):
                s += flat[row + i] * abuf[k, i]
            s += flat[we + o]
            zbuf[k + 1, o] = s
            if acts[k] == 0:
                abuf[k + 1, o] = s if s > 0.0 else 0.0
            else:
                abuf[k + 1, o] = _sig(s)
    p = abuf[n, 0]
    delta = dbuf
    nxt = dbuf2
    delta[0] = p - y
    for k in range(n - 1, first_layer - 1, -1):
        fan_in = dims[k]
        fan_out = dims[k + 1]
        ws = offsets[k, 0]
        we = offsets[k, 1]
        for o in range(fan_out):
            d = delta[o]
            row = ws + o * fan_in
            for i in range(fan_in):
                grad[row + i] = d * abuf[k, i]
            grad[we + o] = d
        if k == first_layer:
            break
        for i in range(fan_in):
            nxt[i] = 0.0
        for o in range(fan_out):
            d = delta[o]
            row = ws + o * fan_in
            for i in range(fan_in):
                nxt[i] += flat[row + i] * d
        for i in range(fan_in):
            if acts[k - 1] == 0:
                if zbuf[k, i] <= 0.0:
                    nxt[i] = 0.0
            else:
                a = abuf[k, i]
                nxt[i] = nxt[i] * a * (1.0 - a)
        tmp = delta
        delta = nxt
        nxt = tmp
    return p


@njit(cache=True, error_model="numpy")
def adam_update(flat, m, v, grad, segs, t, lr, b1, b2, eps):
    # lr * (m / c1) / (sqrt(v / c2) + eps), rearranged to one sqrt and one divide.
    rc2 = math.sqrt(1.0 - b2**t)
    step = lr * rc2 / (1.0 - b1**t)
    eps_hat = eps * rc2
    for s in range(segs.shape[0]):
        for j in range(segs[s, 0], segs[s, 1]):
            g = grad[j]
            mj = b1 * m[j] + (1.0 - b1) * g
            vj = b2 * v[j] + (1.0 - b2) * (g * g)
            m[j] = mj
            v[j] = vj
            flat[j] -= step * mj / (math.sqrt(vj) + eps_hat)


@njit(cache=True, error_model="numpy")
def train_pass(flat, m, v, t, X, y, dims, acts, offsets, first_layer, segs, lr, b1, b2, eps, anchor, mu, epochs):
    """Online Adam over X in order for ``epochs`` passes. Returns new step count,
    or -(i+1) if sample i produced a non-finite gradient."""
    n = dims.shape[0] - 1
    width = 0
    for k in range(n + 1):
        if dims[k] > width:
            width = dims[k]
    zbuf = np.zeros((n + 1, width))
    abuf = np.zeros((n + 1, width))
    dbuf = np.zeros(width)
    dbuf2 = np.zeros(width)
    grad = np.zeros(flat.shape[0])
    use_prox = mu != 0.0
    for _ in range(epochs):
        for i in range(X.shape[0]):
            backward_sample(flat, dims, acts, offsets, X[i], y[i], grad, first_layer, zbuf, abuf, dbuf, dbuf2)
            for s in range(segs.shape[0]):
                for j in range(segs[s, 0], segs[s, 1]):
                    if use_prox:
                        grad[j] += mu * (flat[j] - anchor[j])
                    if not math.isfinite(grad[j]):
                        return -(i + 1)
            t += 1
            adam_update(flat, m, v, grad, segs, t, lr, b1, b2, eps)
    return t
