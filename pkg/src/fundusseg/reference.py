"""Naive, loop-based reference implementations.

These are deliberately slow and obvious: straight loops over indices in
float64, written independently of the vectorised kernels in
:mod:`fundusseg.tensor`.  The test suite (and the ``self-test`` command)
holds the fast paths to these definitions, so any clever rewrite of a
kernel still has to reproduce exactly this arithmetic.
"""

from __future__ import annotations

import math

import numpy as np


def matmul_naive(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def softmax_cols_naive(a: np.ndarray) -> np.ndarray:
    n, m = a.shape
    out = np.zeros((n, m), dtype=np.float64)
    for j in range(m):
        mx = max(float(a[i, j]) for i in range(n))
        es = [math.exp(float(a[i, j]) - mx) for i in range(n)]
        s = sum(es)
        for i in range(n):
            out[i, j] = es[i] / s
    return out


def conv2d_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Direct same-size convolution: stride 1, odd kernel, zero padding."""
    ci, h, wd = x.shape
    co, _, k, _ = w.shape
    p = (k - 1) // 2
    out = np.zeros((co, h, wd), dtype=np.float64)
    for o in range(co):
        for y in range(h):
            for xx in range(wd):
                acc = float(b[o])
                for c in range(ci):
                    for ky in range(k):
                        for kx in range(k):
                            yy = y + ky - p
                            xs = xx + kx - p
                            if 0 <= yy < h and 0 <= xs < wd:
                                acc += float(x[c, yy, xs]) * float(w[o, c, ky, kx])
                out[o, y, xx] = acc
    return out


def attention_naive(k: np.ndarray, q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """V @ softmax_cols(K^T @ Q), composed from the naive pieces."""
    a = matmul_naive(k.T.astype(np.float64), q.astype(np.float64))
    s = softmax_cols_naive(a)
    return matmul_naive(v.astype(np.float64), s)


def avg_pool2x2_naive(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2), dtype=np.float64)
    for ch in range(c):
        for y in range(h // 2):
            for xx in range(w // 2):
                out[ch, y, xx] = (
                    float(x[ch, 2 * y, 2 * xx]) + float(x[ch, 2 * y, 2 * xx + 1])
                    + float(x[ch, 2 * y + 1, 2 * xx]) + float(x[ch, 2 * y + 1, 2 * xx + 1])
                ) / 4.0
    return out


def upsample_nearest2x_naive(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros((c, 2 * h, 2 * w), dtype=np.float64)
    for ch in range(c):
        for y in range(2 * h):
            for xx in range(2 * w):
                out[ch, y, xx] = float(x[ch, y // 2, xx // 2])
    return out


def global_avg_pool_naive(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros((c, 1), dtype=np.float64)
    for ch in range(c):
        acc = 0.0
        for y in range(h):
            for xx in range(w):
                acc += float(x[ch, y, xx])
        out[ch, 0] = acc / (h * w)
    return out


def global_context_naive(f: np.ndarray, weights: dict[str, np.ndarray]) -> np.ndarray:
    """Reference forward of the global-context block, from its definition.

    A single descriptor q is pooled from a learned projection of the map,
    matched against per-position keys, and the value columns are averaged
    under the resulting attention to give one global vector that is
    re-embedded and added back everywhere.  Weight dict keys follow the
    block's parameter names: query/key/value 3x3 convs plus a 1x1 embed.
    """
    c, h, w = f.shape
    qm = conv2d_naive(f, weights["query.kernel"], weights["query.bias"])
    q = global_avg_pool_naive(qm)                                  # (C', 1)
    km = conv2d_naive(f, weights["key.kernel"], weights["key.bias"])
    vm = conv2d_naive(f, weights["value.kernel"], weights["value.bias"])
    cp = km.shape[0]
    kf = km.reshape(cp, h * w)
    vf = vm.reshape(cp, h * w)
    g = attention_naive(kf, q, vf)                                 # (C', 1)
    wemb = weights["embed.kernel"].reshape(weights["embed.kernel"].shape[0], cp)
    ge = matmul_naive(wemb, g)                                     # (C, 1)
    ge = ge + weights["embed.bias"].reshape(-1, 1)
    out = f.astype(np.float64).copy()
    for ch in range(c):
        out[ch] += ge[ch, 0]
    return out


def attention_head_naive(f_q: np.ndarray, f_kv: np.ndarray,
                         weights: dict[str, np.ndarray]) -> np.ndarray:
    """Reference forward of one pairwise-attention head.

    Queries come from ``f_q``; keys and values from ``f_kv`` (the same map
    for the self head, the other branch for the cross head).  The head's
    output is embedded with a 1x1 conv and added to ``f_q``.
    """
    c, h, w = f_q.shape
    qm = conv2d_naive(f_q, weights["query.kernel"], weights["query.bias"])
    km = conv2d_naive(f_kv, weights["key.kernel"], weights["key.bias"])
    vm = conv2d_naive(f_kv, weights["value.kernel"], weights["value.bias"])
    cp = qm.shape[0]
    g = attention_naive(km.reshape(cp, h * w), qm.reshape(cp, h * w),
                        vm.reshape(cp, h * w))                     # (C', HW)
    gmap = g.reshape(cp, h, w)
    emb = conv2d_naive(gmap, weights["embed.kernel"], weights["embed.bias"])
    return emb + f_q.astype(np.float64)


def relation_naive(f_l: np.ndarray, f_v: np.ndarray,
                   self_w: dict[str, np.ndarray],
                   cross_w: dict[str, np.ndarray]) -> np.ndarray:
    """Reference forward of the two-head relation block: the self head
    attends within the lesion map, the cross head pulls from the vessel
    map, and the two head outputs are stacked along channels."""
    fs = attention_head_naive(f_l, f_l, self_w)
    fc = attention_head_naive(f_l, f_v, cross_w)
    return np.concatenate([fs, fc], axis=0)


def weighted_ce_naive(logits: np.ndarray, labels: np.ndarray,
                      weights: np.ndarray) -> float:
    """Mean over pixels of w[y] * (-log softmax(z)[y])."""
    kcls, h, w = logits.shape
    total = 0.0
    for y in range(h):
        for xx in range(w):
            z = [float(logits[c, y, xx]) for c in range(kcls)]
            mx = max(z)
            es = [math.exp(v - mx) for v in z]
            s = sum(es)
            cls = int(labels[y, xx])
            total += float(weights[cls]) * (-math.log(es[cls] / s))
    return total / (h * w)


def equalize_global_naive(channel: np.ndarray) -> np.ndarray:
    """Plain global histogram equalisation of one uint8 channel.

    Remaps value v to round((cdf(v) - cdf_min) / (N - cdf_min) * 255),
    where cdf_min is the cdf at the first occupied bin.  A channel whose
    histogram occupies a single bin maps to itself.
    """
    flat = channel.reshape(-1)
    hist = np.zeros(256, dtype=np.int64)
    for v in flat:
        hist[int(v)] += 1
    occupied = [i for i in range(256) if hist[i] > 0]
    if len(occupied) <= 1:
        return channel.copy()
    cdf = np.cumsum(hist)
    cdf_min = int(cdf[occupied[0]])
    n = int(flat.size)
    lut = np.zeros(256, dtype=np.uint8)
    for v in range(256):
        val = math.floor((int(cdf[v]) - cdf_min) * 255.0 / (n - cdf_min) + 0.5)
        lut[v] = min(255, max(0, val))
    return lut[channel]


def auc_roc_pairs_naive(scores: np.ndarray, labels: np.ndarray):
    """Pair-counting area under the ROC curve, as exact integers.

    Returns (numerator, denominator) of (#concordant + #ties/2) / (P*N),
    both doubled so they stay integers: (2*concordant + ties, 2*P*N).
    """
    pos = [float(s) for s, l in zip(scores, labels) if l == 1]
    neg = [float(s) for s, l in zip(scores, labels) if l == 0]
    conc = 0
    ties = 0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                conc += 1
            elif sp == sn:
                ties += 1
    return 2 * conc + ties, 2 * len(pos) * len(neg)


def auc_from_pairs(u2: int, denom: int) -> float:
    """Canonical float for the rational u2/denom.

    Divides whichever of the two complementary numerators is smaller and
    reflects the other, so complementary score sets produce floats that sum
    to exactly 1.0.
    """
    small = min(u2, denom - u2)
    q = small / denom
    return q if 2 * u2 <= denom else 1.0 - q
