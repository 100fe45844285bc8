"""Batched GRU layer with explicit backpropagation through time.

Gate layout along the 3H axis of the weight matrices is (reset, update, new):

    r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
    z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
    n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
    h' = (1 - z) * n + z * h

Arrays are time-major: ``x`` is (T, B, in). A (T, B) mask holds the state
unchanged on padded steps, so a right-padded batch yields each sequence's
state at its own last valid frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def sigmoid(x):
    # numerically stable for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class GruCache:
    x: np.ndarray
    mask: np.ndarray
    h_prev: np.ndarray  # (T, B, H) state entering each step
    r: np.ndarray
    z: np.ndarray
    n: np.ndarray
    gh_n: np.ndarray  # W_hn h + b_hn, needed for dr
    reverse: bool


def gru_forward(x, mask, w_ih, w_hh, b_ih, b_hh, h0, reverse=False):
    """Run one GRU layer over ``x``; returns (states (T, B, H), cache)."""
    T, B, _ = x.shape
    H = w_hh.shape[1]
    gx = x @ w_ih.T + b_ih
    hs = np.empty((T, B, H), dtype=x.dtype)
    h_prev = np.empty_like(hs)
    r_all = np.empty_like(hs)
    z_all = np.empty_like(hs)
    n_all = np.empty_like(hs)
    ghn_all = np.empty_like(hs)
    h = h0
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        gh = h @ w_hh.T + b_hh
        g = gx[t]
        r = sigmoid(g[:, :H] + gh[:, :H])
        z = sigmoid(g[:, H : 2 * H] + gh[:, H : 2 * H])
        ghn = gh[:, 2 * H :]
        n = np.tanh(g[:, 2 * H :] + r * ghn)
        h_new = (1.0 - z) * n + z * h
        m = mask[t][:, None]
        h_prev[t], r_all[t], z_all[t], n_all[t], ghn_all[t] = h, r, z, n, ghn
        h = m * h_new + (1.0 - m) * h
        hs[t] = h
    return hs, GruCache(x, mask, h_prev, r_all, z_all, n_all, ghn_all, reverse)


def gru_backward(dhs, cache: GruCache, w_ih, w_hh):
    """Gradients from upstream ``dhs`` (dL/d states, (T, B, H)).

    Returns (dx, dw_ih, dw_hh, db_ih, db_hh, dh0).
    """
    T, B, H = dhs.shape
    dgx = np.empty((T, B, 3 * H), dtype=dhs.dtype)
    dw_hh = np.zeros_like(w_hh)
    db_hh = np.zeros(3 * H, dtype=dhs.dtype)
    dh = np.zeros((B, H), dtype=dhs.dtype)
    steps = range(T) if cache.reverse else range(T - 1, -1, -1)
    for t in steps:
        dh = dh + dhs[t]
        m = cache.mask[t][:, None]
        r, z, n, hp = cache.r[t], cache.z[t], cache.n[t], cache.h_prev[t]
        d_new = m * dh
        dh_prev = (1.0 - m) * dh + d_new * z
        da_n = d_new * (1.0 - z) * (1.0 - n * n)
        da_z = d_new * (hp - n) * z * (1.0 - z)
        da_r = da_n * cache.gh_n[t] * r * (1.0 - r)
        dgx[t, :, :H] = da_r
        dgx[t, :, H : 2 * H] = da_z
        dgx[t, :, 2 * H :] = da_n
        dgh = np.concatenate([da_r, da_z, da_n * r], axis=1)
        dw_hh += dgh.T @ hp
        db_hh += dgh.sum(axis=0)
        dh = dh_prev + dgh @ w_hh
    flat = dgx.reshape(T * B, 3 * H)
    dw_ih = flat.T @ cache.x.reshape(T * B, -1)
    db_ih = flat.sum(axis=0)
    dx = dgx @ w_ih
    return dx, dw_ih, dw_hh, db_ih, db_hh, dh
