"""LSTM recurrence kernels.

Two interchangeable backends compute the same recurrence over a padded batch
of sequences: a numba ``@njit`` path and a pure-numpy path.  The numba path is
used when numba imports and ``TABML_NUMBA`` is not set to ``0``;
``set_backend`` switches at runtime (benchmarks, tests).

Both backends sort rows by length (longest first) so that the rows still
running at step ``t`` form a prefix of the batch, and they store states
time-major in that sorted order.  The forward pass returns the final hidden
state per row plus an opaque cache consumed by the backward pass.

Gate layout along the last axis of every ``4H`` block is ``(i, f, o, g)``.
Input projections ``x @ W_x + b`` are computed by the caller, so the kernels
only see the recurrent part.
"""

from __future__ import annotations

import os
from typing import NamedTuple

import numpy as np

try:  # pragma: no cover - exercised implicitly
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


def _sigmoid(x):
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class LSTMCache(NamedTuple):
    """Forward state kept for the backward pass, rows in ``order``.

    ``h``/``c`` are (T+1, B, H) with index 0 the zero state, ``gates`` is
    (T, B, 4H) post-activation and ``tanh_c`` is (T, B, H).  Only the first
    ``live[t]`` rows of step ``t`` are meaningful.
    """

    order: np.ndarray
    live: np.ndarray
    h: np.ndarray
    c: np.ndarray
    gates: np.ndarray
    tanh_c: np.ndarray


def _schedule(lengths, T):
    order = np.argsort(-lengths, kind="stable")
    live = (lengths[order][None, :] > np.arange(T)[:, None]).sum(axis=1)
    return order, live


def _source_steps(lengths, order, T, reverse):
    # (T, B) time index into xproj for each sorted row; padding maps to 0
    t = np.arange(T)[:, None]
    L = lengths[order][None, :]
    s = L - 1 - t if reverse else np.broadcast_to(t, (T, L.shape[1]))
    return np.where(t < L, s, 0)


def lstm_forward_numpy(xproj, lengths, w_h, reverse=False):
    """Run the recurrence for every row of ``xproj`` (B, T, 4H).

    Rows stop updating once ``t >= lengths[b]``; a zero-length row keeps the
    zero state.  With ``reverse`` each row reads its valid prefix backwards.
    Returns ``(h_final, cache)`` with ``h_final`` of shape (B, H).
    """
    B, T, G = xproj.shape
    H = G // 4
    order, live = _schedule(lengths, T)
    xs = xproj[order[None, :], _source_steps(lengths, order, T, reverse)]
    h = np.zeros((T + 1, B, H))
    c = np.zeros((T + 1, B, H))
    gates = np.zeros((T, B, G))
    tanh_c = np.zeros((T, B, H))
    for t in range(T):
        n = live[t]
        if n == 0:
            break
        a = xs[t, :n] + h[t, :n] @ w_h
        act = gates[t, :n]
        act[:, : 3 * H] = 0.5 + 0.5 * np.tanh(0.5 * a[:, : 3 * H])
        act[:, 3 * H :] = np.tanh(a[:, 3 * H :])
        c[t + 1, :n] = act[:, H : 2 * H] * c[t, :n] + act[:, :H] * act[:, 3 * H :]
        tanh_c[t, :n] = np.tanh(c[t + 1, :n])
        h[t + 1, :n] = act[:, 2 * H : 3 * H] * tanh_c[t, :n]
    h_final = np.zeros((B, H))
    h_final[order] = h[np.minimum(lengths[order], T), np.arange(B)]
    return h_final, LSTMCache(order, live, h, c, gates, tanh_c)


def lstm_backward_numpy(dh_final, lengths, w_h, cache, reverse=False):
    """Back-propagate ``dh_final`` (B, H) through the recurrence.

    Returns ``(d_xproj, d_w_h)``; ``d_xproj`` is the gradient w.r.t. the
    pre-activation input projections, zero at padded steps.
    """
    order, live, h, c, gates, tanh_c = cache
    T, B, G = gates.shape
    H = G // 4
    steps = _source_steps(lengths, order, T, reverse)
    d_xproj = np.zeros((B, T, G))
    d_w_h = np.zeros((H, G))
    dh = dh_final[order].copy()
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        n = live[t]
        if n == 0:
            continue
        act = gates[t, :n]
        i, f, o, g = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
        tc = tanh_c[t, :n]
        dct = dc[:n] + dh[:n] * o * (1.0 - tc * tc)
        da = np.empty((n, G))
        da[:, :H] = dct * g * i * (1.0 - i)
        da[:, H : 2 * H] = dct * c[t, :n] * f * (1.0 - f)
        da[:, 2 * H : 3 * H] = dh[:n] * tc * o * (1.0 - o)
        da[:, 3 * H :] = dct * i * (1.0 - g * g)
        d_xproj[order[:n], steps[t, :n]] = da
        d_w_h += h[t, :n].T @ da
        dh[:n] = da @ w_h.T
        dc[:n] = dct * f
    return d_xproj, d_w_h


if HAVE_NUMBA:
    # Cody-Waite reduction plus a degree-13 Taylor polynomial.  Written as a
    # plain loop with no calls so LLVM vectorises it; numba's scalar exp
    # does not vectorise without SVML.
    _LN2_HI = 6.93147180369123816490e-01
    _LN2_LO = 1.90821492927058770002e-10
    _INV_LN2 = 1.44269504088896338700e00
    _ROUND = 6755399441055744.0  # 1.5 * 2**52: adding it rounds to an integer

    @numba.njit(cache=True, fastmath={"contract"})
    def _exp_into(v, out):
        # ``v`` and ``out`` must not alias or the loop stops vectorising
        bits = out.view(np.int64)
        for k in range(v.size):
            x = v[k]
            x = 708.0 if x > 708.0 else x
            x = -708.0 if x < -708.0 else x
            q = (x * _INV_LN2 + _ROUND) - _ROUND
            r = (x - q * _LN2_HI) - q * _LN2_LO
            p = 1.0 / 6227020800.0
            p = 1.0 / 479001600.0 + r * p
            p = 1.0 / 39916800.0 + r * p
            p = 1.0 / 3628800.0 + r * p
            p = 1.0 / 362880.0 + r * p
            p = 1.0 / 40320.0 + r * p
            p = 1.0 / 5040.0 + r * p
            p = 1.0 / 720.0 + r * p
            p = 1.0 / 120.0 + r * p
            p = 1.0 / 24.0 + r * p
            p = 1.0 / 6.0 + r * p
            p = 0.5 + r * p
            p = 1.0 + r * p
            out[k] = 1.0 + r * p
            bits[k] += np.int64(q) << 52

    @numba.njit(cache=True)
    def lstm_forward_numba(xproj, lengths, w_h, reverse):
        B, T, G = xproj.shape
        H = G // 4
        order = np.argsort(-lengths, kind="mergesort")
        live = np.zeros(T, dtype=np.int64)
        for t in range(T):
            for r in range(B):
                if lengths[order[r]] > t:
                    live[t] += 1
        # sigmoid(x) on i, f, o and tanh(x) = 2 * sigmoid(2x) - 1 on g
        scale = np.ones(G)
        scale[3 * H :] = 2.0
        h = np.zeros((T + 1, B, H))
        c = np.zeros((T + 1, B, H))
        gates = np.zeros((T, B, G))
        tanh_c = np.zeros((T, B, H))
        a = np.empty(B * G)
        e = np.empty(B * G)
        ch = np.empty(B * H)
        eh = np.empty(B * H)
        for t in range(T):
            n = live[t]
            if n == 0:
                break
            rec = np.dot(h[t, :n], w_h)
            for r in range(n):
                b = order[r]
                s = lengths[b] - 1 - t if reverse else t
                for k in range(G):
                    a[r * G + k] = -scale[k] * (xproj[b, s, k] + rec[r, k])
            _exp_into(a[: n * G], e[: n * G])
            for r in range(n):
                for k in range(G):
                    gates[t, r, k] = scale[k] / (1.0 + e[r * G + k]) - (scale[k] - 1.0)
                for j in range(H):
                    cj = gates[t, r, H + j] * c[t, r, j] + gates[t, r, j] * gates[t, r, 3 * H + j]
                    c[t + 1, r, j] = cj
                    ch[r * H + j] = -2.0 * cj
            _exp_into(ch[: n * H], eh[: n * H])
            for r in range(n):
                for j in range(H):
                    tc = 2.0 / (1.0 + eh[r * H + j]) - 1.0
                    tanh_c[t, r, j] = tc
                    h[t + 1, r, j] = gates[t, r, 2 * H + j] * tc
        h_final = np.zeros((B, H))
        for r in range(B):
            L = min(lengths[order[r]], T)
            h_final[order[r]] = h[L, r]
        return h_final, order, live, h, c, gates, tanh_c

    @numba.njit(cache=True)
    def lstm_backward_numba(dh_final, lengths, w_h, order, live, h, c, gates, tanh_c, reverse):
        T, B, G = gates.shape
        H = G // 4
        w_ht = np.ascontiguousarray(w_h.T)
        d_xproj = np.zeros((B, T, G))
        d_w_h = np.zeros((H, G))
        dh = np.empty((B, H))
        for r in range(B):
            dh[r] = dh_final[order[r]]
        dc = np.zeros((B, H))
        da = np.empty((B, G))
        for t in range(T - 1, -1, -1):
            n = live[t]
            if n == 0:
                continue
            for r in range(n):
                for j in range(H):
                    i = gates[t, r, j]
                    f = gates[t, r, H + j]
                    o = gates[t, r, 2 * H + j]
                    g = gates[t, r, 3 * H + j]
                    tc = tanh_c[t, r, j]
                    dct = dc[r, j] + dh[r, j] * o * (1.0 - tc * tc)
                    da[r, j] = dct * g * i * (1.0 - i)
                    da[r, H + j] = dct * c[t, r, j] * f * (1.0 - f)
                    da[r, 2 * H + j] = dh[r, j] * tc * o * (1.0 - o)
                    da[r, 3 * H + j] = dct * i * (1.0 - g * g)
                    dc[r, j] = dct * f
                b = order[r]
                s = lengths[b] - 1 - t if reverse else t
                d_xproj[b, s] = da[r]
            d_w_h += np.dot(np.ascontiguousarray(h[t, :n].T), da[:n])
            dh[:n] = np.dot(da[:n], w_ht)
        return d_xproj, d_w_h


_BACKEND = "numpy"


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` for subsequent kernel calls."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    _BACKEND = name


def get_backend() -> str:
    return _BACKEND


def lstm_forward(xproj, lengths, w_h, reverse=False):
    xproj = np.ascontiguousarray(xproj, dtype=np.float64)
    lengths = np.ascontiguousarray(lengths, dtype=np.int64)
    w_h = np.ascontiguousarray(w_h, dtype=np.float64)
    if _BACKEND == "numba":
        h_final, *cache = lstm_forward_numba(xproj, lengths, w_h, bool(reverse))
        return h_final, LSTMCache(*cache)
    return lstm_forward_numpy(xproj, lengths, w_h, reverse)


def lstm_backward(dh_final, lengths, w_h, cache, reverse=False):
    dh_final = np.ascontiguousarray(dh_final, dtype=np.float64)
    lengths = np.ascontiguousarray(lengths, dtype=np.int64)
    w_h = np.ascontiguousarray(w_h, dtype=np.float64)
    if _BACKEND == "numba":
        return lstm_backward_numba(dh_final, lengths, w_h, *cache, bool(reverse))
    return lstm_backward_numpy(dh_final, lengths, w_h, cache, reverse)


if HAVE_NUMBA and os.environ.get("TABML_NUMBA", "1") != "0":
    _BACKEND = "numba"
