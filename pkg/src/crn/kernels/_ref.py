"""Pure numpy implementation of the recurrent sequence kernels.

This is the fallback used when the compiled extension is unavailable; both
backends implement exactly the same math on time-major arrays.

Gate layout along the last axis is [input, forget, cell, output] blocks of
size H each. `xg` carries the precomputed input projections plus bias, so
the kernel only handles the recurrent part.
"""

import numpy as np
from scipy.special import expit


def lstm_seq_forward(xg, h0, c0, w_h):
    """Run an LSTM over a whole sequence.

    xg: (T, B, 4H) input projection + bias, h0/c0: (B, H), w_h: (H, 4H).
    Returns (h, c, gates) with gates holding the activated i/f/g/o values
    needed by the backward pass.
    """
    T, B, H4 = xg.shape
    H = H4 // 4
    h = np.empty((T, B, H), dtype=xg.dtype)
    c = np.empty((T, B, H), dtype=xg.dtype)
    gates = np.empty((T, B, H4), dtype=xg.dtype)
    h_prev = h0
    c_prev = c0
    for t in range(T):
        pre = xg[t] + h_prev @ w_h
        i = expit(pre[:, :H])
        f = expit(pre[:, H : 2 * H])
        g = np.tanh(pre[:, 2 * H : 3 * H])
        o = expit(pre[:, 3 * H :])
        c_t = f * c_prev + i * g
        h_t = o * np.tanh(c_t)
        gates[t, :, :H] = i
        gates[t, :, H : 2 * H] = f
        gates[t, :, 2 * H : 3 * H] = g
        gates[t, :, 3 * H :] = o
        c[t] = c_t
        h[t] = h_t
        h_prev = h_t
        c_prev = c_t
    return h, c, gates


def lstm_seq_backward(gates, c, h, h0, c0, w_h, dh_out):
    """Backward pass matching lstm_seq_forward.

    dh_out: (T, B, H) upstream gradients injected at each step (no cell
    gradient is injected). Returns (dxg, dw_h, dh0, dc0).
    """
    T, B, H = dh_out.shape
    dxg = np.empty((T, B, 4 * H), dtype=dh_out.dtype)
    dw_h = np.zeros_like(w_h)
    dh_next = np.zeros((B, H), dtype=dh_out.dtype)
    dc_next = np.zeros((B, H), dtype=dh_out.dtype)
    for t in range(T - 1, -1, -1):
        i = gates[t, :, :H]
        f = gates[t, :, H : 2 * H]
        g = gates[t, :, 2 * H : 3 * H]
        o = gates[t, :, 3 * H :]
        c_t = c[t]
        c_prev = c[t - 1] if t > 0 else c0
        h_prev = h[t - 1] if t > 0 else h0
        tc = np.tanh(c_t)
        dh = dh_out[t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        da_o = dh * tc * o * (1.0 - o)
        da_i = dc * g * i * (1.0 - i)
        da_g = dc * i * (1.0 - g * g)
        da_f = dc * c_prev * f * (1.0 - f)
        dc_next = dc * f
        dg_all = dxg[t]
        dg_all[:, :H] = da_i
        dg_all[:, H : 2 * H] = da_f
        dg_all[:, 2 * H : 3 * H] = da_g
        dg_all[:, 3 * H :] = da_o
        dw_h += h_prev.T @ dg_all
        dh_next = dg_all @ w_h.T
    return dxg, dw_h, dh_next, dc_next
