"""Class-weighted cross-entropy losses and their combined objective.

The lesion loss is a 5-class weighted softmax cross-entropy whose weights
counter the extreme class imbalance of lesion pixels (background outnumbers
microaneurysms by ~1e4); the vessel loss is the 2-class analogue.  The
combined objective is ``lesion + lam * vessel``: vessel supervision is an
auxiliary signal whose strength is controlled by ``lam``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Node, _accum, _set_backward


@dataclass
class LossWeights:
    lesion: tuple[float, ...] = (0.001, 0.1, 0.1, 1.0, 0.1)  # bg, EX, HE, MA, SE
    vessel: tuple[float, ...] = (0.01, 1.0)                   # bg, vessel
    lam: float = 0.1

    def validate(self):
        if any(w < 0 for w in self.lesion) or any(w < 0 for w in self.vessel):
            raise ValueError("loss weights must be non-negative")
        return self


def weighted_ce(logits: Node, labels: np.ndarray, weights) -> Node:
    """Mean over pixels of w[y_p] * (-log softmax(z_p)[y_p]).

    logits: (K,H,W) node; labels: (H,W) integer map into [0,K); weights: K
    scalars.  The denominator is the plain pixel count H*W, not the weight
    sum, so class weights rescale per-class contributions without changing
    the meaning of the mean.
    """
    k, h, w = logits.data.shape
    if labels.shape != (h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {(h, w)}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"labels must be integer class ids, got {labels.dtype}")
    if labels.min() < 0 or labels.max() >= k:
        bad = np.argwhere((labels < 0) | (labels >= k))[0]
        raise ValueError(
            f"label value {labels[bad[0], bad[1]]} at pixel (y={bad[0]}, x={bad[1]}) "
            f"outside [0, {k})")
    wvec = np.asarray(weights, dtype=logits.data.dtype)
    if wvec.shape != (k,):
        raise ValueError(f"need {k} class weights, got {wvec.shape}")

    dtype = logits.data.dtype
    n = h * w
    z = logits.data.reshape(k, n)
    y = labels.reshape(n)
    m = z.max(axis=0)
    ez = np.exp(z - m[None, :])
    sez = ez.sum(axis=0)
    # -log softmax(z)[y] = log(sum exp(z - m)) - (z[y] - m)
    nll = np.log(sez) - (z[y, np.arange(n)] - m)
    pix_w = wvec[y]
    out = Node(np.asarray((pix_w * nll).sum() / dtype.type(n), dtype=dtype), (logits,))

    def backward(g):
        s = ez / sez[None, :]
        s *= pix_w[None, :]
        s[y, np.arange(n)] -= pix_w
        s *= g / dtype.type(n)
        _accum(logits, s.reshape(k, h, w))

    _set_backward(out, backward)
    return out


def total_loss(lesion_logits: Node, lesion_labels: np.ndarray,
               vessel_logits: Node, vessel_labels: np.ndarray,
               weights: LossWeights):
    """lesion CE + lam * vessel CE.

    Returns (total, lesion, vessel) nodes.  With lam == 0 the vessel term
    is skipped entirely, so the total is the lesion loss itself — same
    value bit for bit, and no gradient reaches the vessel branch.
    """
    lesion = weighted_ce(lesion_logits, lesion_labels, weights.lesion)
    vessel = weighted_ce(vessel_logits, vessel_labels, weights.vessel)
    if weights.lam == 0.0:
        return lesion, lesion, vessel
    total = lesion + weights.lam * vessel
    return total, lesion, vessel
