"""Hot numeric kernels with numba and pure-numpy implementations.

Three groups dominate runtime: the graph-weighted parent aggregation at the
heart of every forward/backward pass, the fused Adam parameter update, and
the sequential lagged recurrence used by the market simulator (inherently
unvectorizable because step t depends on step t-1).

``backend.ACTIVE`` decides which implementation the public names bind to.
Both give the same results (the numpy path reduces over the same axes; tests
pin agreement), so the choice is purely a speed knob. ``IMPLEMENTATIONS``
exposes both sides for the benchmark script.
"""

import numpy as np

from . import backend

# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------


def _np_parent_sum(w: np.ndarray, feats: np.ndarray) -> np.ndarray:
    """out[b,i,k] = sum_{l,j} w[l,j,i] * feats[b,j,l,k].

    w: (L, D, D) edge weights, axis order (lag, source j, target i).
    feats: (B, D, L, K) per source-stock, per-lag feature rows.
    """
    return np.einsum("lji,bjlk->bik", w, feats, optimize=True)


def _np_parent_sum_grad_w(g: np.ndarray, feats: np.ndarray) -> np.ndarray:
    """dw[l,j,i] = sum_{b,k} g[b,i,k] * feats[b,j,l,k]."""
    return np.einsum("bik,bjlk->lji", g, feats, optimize=True)


def _np_parent_sum_grad_feats(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """dfeats[b,j,l,k] = sum_i w[l,j,i] * g[b,i,k]."""
    return np.einsum("lji,bik->bjlk", w, g, optimize=True)


def _np_adam_update(p, g, m, v, lr, beta1, beta2, eps, bias1, bias2):
    """In-place Adam step on flat arrays; bias1/bias2 = 1 - beta^t."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)


def _np_lagged_recurrence(a: np.ndarray, noise: np.ndarray, n_lags: int, link_code: int) -> np.ndarray:
    """Simulate x[t,i] = link(sum_{l,j} a[l,j,i] x[t-l,j]) + noise[t,i].

    The first n_lags rows of the output are seeded from the noise rows alone.
    link_code: 0 linear, 1 tanh.
    """
    steps, dim = noise.shape
    x = np.zeros((steps, dim), dtype=noise.dtype)
    x[:n_lags] = noise[:n_lags]
    for t in range(n_lags, steps):
        acc = np.zeros(dim, dtype=noise.dtype)
        for lag in range(n_lags):
            acc += x[t - lag - 1] @ a[lag]
        if link_code == 1:
            acc = np.tanh(acc)
        x[t] = acc + noise[t]
    return x


_NUMPY_IMPLS = {
    "parent_sum": _np_parent_sum,
    "parent_sum_grad_w": _np_parent_sum_grad_w,
    "parent_sum_grad_feats": _np_parent_sum_grad_feats,
    "adam_update": _np_adam_update,
    "lagged_recurrence": _np_lagged_recurrence,
}

# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

_NUMBA_IMPLS = {}

if backend.use_numba():
    from numba import njit

    @njit(cache=True)
    def _nb_parent_sum(w, feats):
        n_lag, n_src, n_tgt = w.shape
        n_batch, _, _, n_feat = feats.shape
        out = np.zeros((n_batch, n_tgt, n_feat), dtype=feats.dtype)
        for b in range(n_batch):
            for l in range(n_lag):
                for j in range(n_src):
                    for i in range(n_tgt):
                        wv = w[l, j, i]
                        for k in range(n_feat):
                            out[b, i, k] += wv * feats[b, j, l, k]
        return out

    @njit(cache=True)
    def _nb_parent_sum_grad_w(g, feats):
        n_batch, n_tgt, n_feat = g.shape
        _, n_src, n_lag, _ = feats.shape
        dw = np.zeros((n_lag, n_src, n_tgt), dtype=g.dtype)
        for b in range(n_batch):
            for l in range(n_lag):
                for j in range(n_src):
                    for i in range(n_tgt):
                        acc = dw[l, j, i]
                        for k in range(n_feat):
                            acc += g[b, i, k] * feats[b, j, l, k]
                        dw[l, j, i] = acc
        return dw

    @njit(cache=True)
    def _nb_parent_sum_grad_feats(g, w):
        n_batch, n_tgt, n_feat = g.shape
        n_lag, n_src, _ = w.shape
        df = np.zeros((n_batch, n_src, n_lag, n_feat), dtype=g.dtype)
        for b in range(n_batch):
            for j in range(n_src):
                for l in range(n_lag):
                    for i in range(n_tgt):
                        wv = w[l, j, i]
                        for k in range(n_feat):
                            df[b, j, l, k] += wv * g[b, i, k]
        return df

    @njit(cache=True)
    def _nb_adam_update(p, g, m, v, lr, beta1, beta2, eps, bias1, bias2):
        for idx in range(p.size):
            gi = g[idx]
            mi = beta1 * m[idx] + (1.0 - beta1) * gi
            vi = beta2 * v[idx] + (1.0 - beta2) * gi * gi
            m[idx] = mi
            v[idx] = vi
            p[idx] -= lr * (mi / bias1) / (np.sqrt(vi / bias2) + eps)

    @njit(cache=True)
    def _nb_lagged_recurrence(a, noise, n_lags, link_code):
        steps, dim = noise.shape
        x = np.zeros((steps, dim), dtype=noise.dtype)
        for t in range(n_lags):
            for i in range(dim):
                x[t, i] = noise[t, i]
        for t in range(n_lags, steps):
            for i in range(dim):
                acc = 0.0
                for lag in range(n_lags):
                    for j in range(dim):
                        acc += a[lag, j, i] * x[t - lag - 1, j]
                if link_code == 1:
                    acc = np.tanh(acc)
                x[t, i] = acc + noise[t, i]
        return x

    _NUMBA_IMPLS = {
        "parent_sum": _nb_parent_sum,
        "parent_sum_grad_w": _nb_parent_sum_grad_w,
        "parent_sum_grad_feats": _nb_parent_sum_grad_feats,
        "adam_update": _nb_adam_update,
        "lagged_recurrence": _nb_lagged_recurrence,
    }

IMPLEMENTATIONS = {"numpy": _NUMPY_IMPLS}
if _NUMBA_IMPLS:
    IMPLEMENTATIONS["numba"] = _NUMBA_IMPLS

_active = _NUMBA_IMPLS if backend.use_numba() else _NUMPY_IMPLS

parent_sum = _active["parent_sum"]
parent_sum_grad_w = _active["parent_sum_grad_w"]
parent_sum_grad_feats = _active["parent_sum_grad_feats"]
adam_update = _active["adam_update"]
lagged_recurrence = _active["lagged_recurrence"]
