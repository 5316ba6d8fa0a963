"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Every kernel exists twice: ``*_np`` (vectorised numpy) and ``*_nb``
(``@njit`` loops). The public names bound at import time point at the numba
versions unless numba is missing or ``FEDTYPE_DISABLE_NUMBA`` is set to a
truthy value. Both paths compute the same quantities; they may differ in the
last few ulps because BLAS and explicit loops sum in different orders.

Flat parameter layout (shared with :mod:`fedtype.nn`): for each layer ``l``
the weight matrix of shape ``(dims[l], dims[l+1])`` in row-major order,
immediately followed by the bias vector of length ``dims[l+1]``.

Activation buffer layout: one row per sample, columns are the input features,
then every hidden layer's post-ReLU output, then the output logits.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorator(func):
            return func

        return decorator


def _flag_disabled() -> bool:
    return os.environ.get("FEDTYPE_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = NUMBA_AVAILABLE and not _flag_disabled()


# ---------------------------------------------------------------------------
# Dense network forward / backward
# ---------------------------------------------------------------------------


def dense_forward_np(params, dims, X):
    n = X.shape[0]
    acts = np.empty((n, int(dims.sum())), dtype=np.float64)
    acts[:, : dims[0]] = X
    h = X
    p = 0
    a = int(dims[0])
    n_layers = len(dims) - 1
    for l in range(n_layers):
        fi, fo = int(dims[l]), int(dims[l + 1])
        W = params[p : p + fi * fo].reshape(fi, fo)
        p += fi * fo
        b = params[p : p + fo]
        p += fo
        z = h @ W + b
        if l < n_layers - 1:
            np.maximum(z, 0.0, out=z)
        acts[:, a : a + fo] = z
        a += fo
        h = z
    return acts


def dense_backward_np(params, dims, acts, dlogits):
    grad = np.zeros_like(params)
    n_layers = len(dims) - 1
    p_off = np.zeros(n_layers, dtype=np.int64)
    a_off = np.zeros(n_layers + 1, dtype=np.int64)
    p = 0
    a = 0
    for l in range(n_layers):
        p_off[l] = p
        a_off[l] = a
        p += dims[l] * dims[l + 1] + dims[l + 1]
        a += dims[l]
    a_off[n_layers] = a

    delta = dlogits
    for l in range(n_layers - 1, -1, -1):
        fi, fo = int(dims[l]), int(dims[l + 1])
        p = int(p_off[l])
        h_in = acts[:, a_off[l] : a_off[l] + fi]
        grad[p : p + fi * fo] = (h_in.T @ delta).ravel()
        grad[p + fi * fo : p + fi * fo + fo] = delta.sum(axis=0)
        if l > 0:
            W = params[p : p + fi * fo].reshape(fi, fo)
            delta = (delta @ W.T) * (h_in > 0.0)
    return grad


@njit(cache=True, nogil=True)
def dense_forward_nb(params, dims, X):
    n = X.shape[0]
    total = 0
    for d in dims:
        total += d
    acts = np.empty((n, total), dtype=np.float64)
    for i in range(n):
        for k in range(dims[0]):
            acts[i, k] = X[i, k]
    n_layers = dims.shape[0] - 1
    p = 0
    a_in = 0
    a_out = dims[0]
    for l in range(n_layers):
        fi = dims[l]
        fo = dims[l + 1]
        b_off = p + fi * fo
        row = np.empty(fo, dtype=np.float64)
        for i in range(n):
            for j in range(fo):
                row[j] = params[b_off + j]
            # i-k-j order keeps the inner loop on contiguous weights
            for k in range(fi):
                h = acts[i, a_in + k]
                if h != 0.0:
                    w = p + k * fo
                    for j in range(fo):
                        row[j] += h * params[w + j]
            for j in range(fo):
                s = row[j]
                if l < n_layers - 1 and s < 0.0:
                    s = 0.0
                acts[i, a_out + j] = s
        p = b_off + fo
        a_in = a_out
        a_out += fo
    return acts


@njit(cache=True, nogil=True)
def dense_backward_nb(params, dims, acts, dlogits):
    grad = np.zeros(params.shape[0], dtype=np.float64)
    n = acts.shape[0]
    n_layers = dims.shape[0] - 1
    p_off = np.zeros(n_layers, dtype=np.int64)
    a_off = np.zeros(n_layers + 1, dtype=np.int64)
    p = 0
    a = 0
    for l in range(n_layers):
        p_off[l] = p
        a_off[l] = a
        p += dims[l] * dims[l + 1] + dims[l + 1]
        a += dims[l]
    a_off[n_layers] = a

    delta = dlogits.copy()
    for l in range(n_layers - 1, -1, -1):
        fi = dims[l]
        fo = dims[l + 1]
        p = p_off[l]
        ai = a_off[l]
        for i in range(n):
            for k in range(fi):
                h = acts[i, ai + k]
                if h != 0.0:
                    for j in range(fo):
                        grad[p + k * fo + j] += h * delta[i, j]
            for j in range(fo):
                grad[p + fi * fo + j] += delta[i, j]
        if l > 0:
            nxt = np.zeros((n, fi), dtype=np.float64)
            for i in range(n):
                for k in range(fi):
                    if acts[i, ai + k] > 0.0:
                        s = 0.0
                        for j in range(fo):
                            s += delta[i, j] * params[p + k * fo + j]
                        nxt[i, k] = s
            delta = nxt
    return grad


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def adam_update_np(params, grad, m, v, step, lr, beta1, beta2, eps):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)


@njit(cache=True, nogil=True)
def adam_update_nb(params, grad, m, v, step, lr, beta1, beta2, eps):
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for i in range(params.shape[0]):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        params[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


# ---------------------------------------------------------------------------
# RAPS scores and sets
# ---------------------------------------------------------------------------
# Labels are ranked by descending probability, ties to the lower index.
# rho(y) is the mass of labels ranked strictly before y.


def _sorted_scores_np(probs, u, penalty, kappa_reg):
    order = np.argsort(-probs, axis=1, kind="stable")
    sp = np.take_along_axis(probs, order, axis=1)
    n, C = probs.shape
    rho = np.zeros_like(sp)
    if C > 1:
        rho[:, 1:] = np.cumsum(sp[:, :-1], axis=1)
    ranks = np.arange(1, C + 1, dtype=np.float64)
    reg = penalty * np.maximum(ranks - kappa_reg, 0.0)
    return order, rho + sp * u[:, None] + reg[None, :]


def raps_label_scores_np(probs, labels, u, penalty, kappa_reg):
    order, scores = _sorted_scores_np(probs, u, penalty, kappa_reg)
    pos = np.argmax(order == labels[:, None], axis=1)
    return scores[np.arange(len(labels)), pos]


def raps_set_mask_np(probs, u, penalty, kappa_reg, tau):
    order, scores = _sorted_scores_np(probs, u, penalty, kappa_reg)
    mask = np.zeros(probs.shape, dtype=np.bool_)
    np.put_along_axis(mask, order, scores <= tau, axis=1)
    return mask


@njit(cache=True, nogil=True)
def _rank_order_nb(row):
    C = row.shape[0]
    order = np.arange(C)
    for i in range(1, C):
        key = order[i]
        j = i - 1
        while j >= 0 and row[order[j]] < row[key]:
            order[j + 1] = order[j]
            j -= 1
        order[j + 1] = key
    return order


@njit(cache=True, nogil=True)
def raps_label_scores_nb(probs, labels, u, penalty, kappa_reg):
    n, C = probs.shape
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        order = _rank_order_nb(probs[i])
        rho = 0.0
        for r in range(C):
            y = order[r]
            if y == labels[i]:
                extra = r + 1 - kappa_reg
                if extra < 0:
                    extra = 0
                out[i] = rho + probs[i, y] * u[i] + penalty * extra
                break
            rho += probs[i, y]
    return out


@njit(cache=True, nogil=True)
def raps_set_mask_nb(probs, u, penalty, kappa_reg, tau):
    n, C = probs.shape
    mask = np.zeros((n, C), dtype=np.bool_)
    for i in range(n):
        order = _rank_order_nb(probs[i])
        rho = 0.0
        for r in range(C):
            y = order[r]
            extra = r + 1 - kappa_reg
            if extra < 0:
                extra = 0
            if rho + probs[i, y] * u[i] + penalty * extra <= tau:
                mask[i, y] = True
            rho += probs[i, y]
    return mask


if USE_NUMBA:
    dense_forward = dense_forward_nb
    dense_backward = dense_backward_nb
    adam_update = adam_update_nb
    raps_label_scores = raps_label_scores_nb
    raps_set_mask = raps_set_mask_nb
else:
    dense_forward = dense_forward_np
    dense_backward = dense_backward_np
    adam_update = adam_update_np
    raps_label_scores = raps_label_scores_np
    raps_set_mask = raps_set_mask_np

BACKEND = "numba" if USE_NUMBA else "numpy"
