"""Independent reference implementations used as test oracles.

Everything here is deliberately naive: nested loops, textbook formulas, no
vectorization tricks shared with the package code, and no imports from the
package itself.  When a fast implementation and its oracle agree, the
agreement is evidence, not tautology.
"""

from __future__ import annotations

import math

import numpy as np


def naive_dft_amplitudes(x: np.ndarray) -> np.ndarray:
    """O(L^2) DFT magnitudes for bins 0..floor(L/2) of a 1-D real series."""
    x = np.asarray(x, dtype=np.float64)
    length = x.shape[0]
    bins = length // 2 + 1
    out = np.zeros(bins)
    for f in range(bins):
        re = 0.0
        im = 0.0
        for t in range(length):
            ang = -2.0 * math.pi * f * t / length
            re += x[t] * math.cos(ang)
            im += x[t] * math.sin(ang)
        out[f] = math.hypot(re, im)
    return out


def conv2d_loops(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None,
                 stride: int = 1, pad: int = 0, dilation: int = 1,
                 groups: int = 1) -> np.ndarray:
    """Nested-loop cross-correlation of (B,Cin,H,W) with (Cout,Cin/g,kh,kw)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    oh = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    xp = np.zeros((b, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((b, cout, oh, ow))
    cout_g = cout // groups
    for bi in range(b):
        for co in range(cout):
            g = co // cout_g
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(cin_g):
                        for ki in range(kh):
                            for kj in range(kw):
                                ii = oi * stride + ki * dilation
                                jj = oj * stride + kj * dilation
                                acc += xp[bi, g * cin_g + ci, ii, jj] * w[co, ci, ki, kj]
                    out[bi, co, oi, oj] = acc + (bias[co] if bias is not None else 0.0)
    return out


def attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                        mask: np.ndarray | None = None) -> np.ndarray:
    """Scaled dot-product attention over (T, d) single-head token matrices.

    ``mask`` is boolean (Tq, Tk); False entries are excluded exactly (their
    probability is renormalized away, not just damped).
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    tq, d = q.shape
    tk = k.shape[0]
    out = np.zeros((tq, v.shape[1]))
    scale = 1.0 / math.sqrt(d)
    for i in range(tq):
        scores = np.array([np.dot(q[i], k[j]) * scale for j in range(tk)])
        if mask is not None:
            keep = mask[i]
        else:
            keep = np.ones(tk, dtype=bool)
        s = scores[keep]
        s = s - s.max()
        p = np.exp(s)
        p = p / p.sum()
        acc = np.zeros(v.shape[1])
        for pj, j in zip(p, np.nonzero(keep)[0]):
            acc += pj * v[j]
        out[i] = acc
    return out


def selective_scan_reference(a_bar: np.ndarray, b_bar_x: np.ndarray,
                             c: np.ndarray) -> np.ndarray:
    """Plain-python state recurrence h_k = A_k h_{k-1} + u_k, y_k = <c_k, h_k>.

    Shapes: a_bar, b_bar_x (L, D, N); c (L, N).  Returns y (L, D).
    """
    length, d, n = a_bar.shape
    y = np.zeros((length, d))
    h = np.zeros((d, n))
    for k in range(length):
        for di in range(d):
            for ni in range(n):
                h[di, ni] = a_bar[k, di, ni] * h[di, ni] + b_bar_x[k, di, ni]
            acc = 0.0
            for ni in range(n):
                acc += c[k, ni] * h[di, ni]
            y[k, di] = acc
    return y


def selective_scan_raw_reference(a: np.ndarray, bk: np.ndarray, ck: np.ndarray,
                                 delta: np.ndarray, d_skip: np.ndarray,
                                 x: np.ndarray) -> np.ndarray:
    """Scalar-loop selective scan from raw parameters, ZOH discretization
    included: h_k = exp(d_k a) h_{k-1} + (exp(d_k a)-1)/a b_k x_k,
    y_k = <c_k, h_k> + d ⊙ x_k.

    Shapes: a (N,); bk, ck (L, N); delta (L,); d_skip (D,); x (L, D).
    """
    length, dim = x.shape
    n = a.shape[0]
    y = np.zeros((length, dim))
    h = np.zeros((dim, n))
    for k in range(length):
        for di in range(dim):
            acc = 0.0
            for ni in range(n):
                a_bar, b_bar = zoh_reference(a[ni], bk[k, ni], delta[k])
                h[di, ni] = a_bar * h[di, ni] + b_bar * x[k, di]
                acc += ck[k, ni] * h[di, ni]
            y[k, di] = acc + d_skip[di] * x[k, di]
    return y


def layer_norm_reference(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
                         eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def confusion_counts(pred: np.ndarray, target: np.ndarray,
                     num_classes: int) -> np.ndarray:
    """Per-pixel loop building the (num_classes, num_classes) matrix
    counts[t, p] = #{pixels with target t predicted p}."""
    pred = np.asarray(pred).reshape(-1)
    target = np.asarray(target).reshape(-1)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(target, pred):
        counts[int(t), int(p)] += 1
    return counts


def gelu_reference(x: float) -> float:
    """Exact x * Phi(x) via the standard library's erf."""
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def zoh_reference(a: float, b: float, delta: float) -> tuple[float, float]:
    """Scalar zero-order-hold discretization: (exp(dA), (exp(dA)-1)/A * b)."""
    a_bar = math.exp(delta * a)
    if abs(a) < 1e-12:
        b_bar = delta * b
    else:
        b_bar = (a_bar - 1.0) / a * b
    return a_bar, b_bar
