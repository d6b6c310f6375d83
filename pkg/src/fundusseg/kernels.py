"""Compiled/fused inner loops for the hot paths of the tensor engine.

Everything here is an implementation detail behind the ops in
:mod:`fundusseg.tensor`; semantics are defined (and tested) against the
plain numpy reference versions.  All kernels are single-threaded and
deterministic: same inputs, same machine -> same bits.
"""

from __future__ import annotations

import numpy as np
from numba import njit


def softmax_rows_inplace(a: np.ndarray, block: int = 256) -> None:
    """Row-wise softmax of a 2-D array, in place.

    Processed in row blocks so the subtract/exp/sum/divide passes stay
    cache-resident instead of streaming the full matrix four times.
    """
    n = a.shape[0]
    for i0 in range(0, n, block):
        blk = a[i0:i0 + block]
        mx = blk.max(axis=1)
        np.subtract(blk, mx[:, None], out=blk)
        np.exp(blk, out=blk)
        s = blk.sum(axis=1)
        np.divide(blk, s[:, None], out=blk)


@njit(cache=True)
def softmax_rows_grad(s, ds, out):
    """Backward of row-wise softmax: out = s * (ds - sum_j(ds * s)).

    `out` may alias `ds`.  Works for float32 and float64.
    """
    n_rows, m = s.shape
    for i in range(n_rows):
        c = s[i, 0] * 0.0
        for j in range(m):
            c += ds[i, j] * s[i, j]
        for j in range(m):
            out[i, j] = s[i, j] * (ds[i, j] - c)


class BufferPool:
    """Recycles large scratch arrays so the attention path does not pay
    allocation and page-fault cost for a fresh ~64 MB buffer per sample."""

    def __init__(self, max_entries: int = 8):
        self._free: list[np.ndarray] = []
        self.max_entries = max_entries

    def acquire(self, shape, dtype) -> np.ndarray:
        for i, arr in enumerate(self._free):
            if arr.shape == shape and arr.dtype == dtype:
                return self._free.pop(i)
        return np.empty(shape, dtype=dtype)

    def release(self, arr: np.ndarray) -> None:
        if arr.nbytes >= 1 << 20 and len(self._free) < self.max_entries:
            self._free.append(arr)


pool = BufferPool()
