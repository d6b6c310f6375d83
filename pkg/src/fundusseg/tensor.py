"""Reverse-mode automatic differentiation on numpy arrays.

A :class:`Node` wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar node walks the graph in reverse topological order
and accumulates gradients into every node's ``.grad``.  All reductions use
fixed orderings, so repeated runs on identical inputs produce identical bits.

Two dtypes are supported end to end: float32 for training speed and float64
for gradient checking and reference comparisons.  Ops never mutate the
``.data`` of their inputs; the only sanctioned mutation is the parameter
nudging done inside :func:`grad_check` and the optimizer's in-place update,
both of which happen between graphs, never inside one.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .kernels import pool, softmax_rows_grad, softmax_rows_inplace

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One value in the computation graph."""

    __slots__ = ("data", "grad", "parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        data = np.asarray(data)
        if data.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"node dtype must be float32 or float64, got {data.dtype}")
        self.data = data
        self.grad = None
        if _grad_enabled:
            self.parents = tuple(parents)
            self._backward = backward
        else:
            self.parents = ()
            self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def backward(self):
        """Backpropagate from this node; it must hold a single value."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar node, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- convenience arithmetic ------------------------------------------
    def __add__(self, other):
        if isinstance(other, Node):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Node(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Node):
    """A named leaf whose gradient persists across graphs until cleared.

    Gradients accumulate: running backward on several per-sample graphs
    that share a parameter sums their contributions, which is how batches
    are formed.
    """

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data)
        self.name = name

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


def _set_backward(node: Node, fn) -> None:
    # Node() drops parents when grads are off; no parents, no closure.
    if node.parents:
        node._backward = fn


def _accum(node: Node, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += g


def _check_same_shape(a: Node, b: Node, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# -- elementwise ---------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "add")
    out = Node(a.data + b.data, (a, b))

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    _set_backward(out, backward)
    return out


def add_scalar(a: Node, s: float) -> Node:
    out = Node(a.data + a.data.dtype.type(s), (a,))
    _set_backward(out, lambda g: _accum(a, g))
    return out


def mul(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "mul")
    out = Node(a.data * b.data, (a, b))

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    _set_backward(out, backward)
    return out


def scale(a: Node, s: float) -> Node:
    s = a.data.dtype.type(s)
    out = Node(a.data * s, (a,))
    _set_backward(out, lambda g: _accum(a, g * s))
    return out


def relu(a: Node) -> Node:
    zero = a.data.dtype.type(0)
    out = Node(np.where(a.data > 0, a.data, zero), (a,))

    def backward(g):
        _accum(a, np.where(a.data > 0, g, zero))

    _set_backward(out, backward)
    return out


# -- linear algebra ------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: need 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = Node(a.data @ b.data, (a, b))

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    _set_backward(out, backward)
    return out


def transpose(a: Node) -> Node:
    if a.data.ndim != 2:
        raise ValueError(f"transpose: need a 2-D operand, got shape {a.data.shape}")
    out = Node(np.ascontiguousarray(a.data.T), (a,))
    _set_backward(out, lambda g: _accum(a, np.ascontiguousarray(g.T)))
    return out


def softmax_cols(a: Node) -> Node:
    """Column-wise softmax of a 2-D array: each column sums to 1."""
    if a.data.ndim != 2:
        raise ValueError(f"softmax_cols: need a 2-D operand, got shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=0, keepdims=True)
    out = Node(s, (a,))

    def backward(g):
        c = (g * s).sum(axis=0, keepdims=True)
        _accum(a, s * (g - c))

    _set_backward(out, backward)
    return out


def attention_core(k: Node, q: Node, v: Node) -> Node:
    """Fused scaled-map attention: V @ softmax_cols(K^T @ Q).

    K: (C, Nk), Q: (C, Nq), V: (Cv, Nk) -> (Cv, Nq).  Column j of the
    result is a convex combination of the columns of V, weighted by how
    strongly each key matches query j.  Numerically equal (to rounding)
    to composing matmul/softmax_cols/matmul, but avoids materialising
    intermediate graph nodes and keeps the big matrices cache-blocked.
    """
    if k.data.ndim != 2 or q.data.ndim != 2 or v.data.ndim != 2:
        raise ValueError("attention_core: K, Q, V must be 2-D")
    if k.data.shape[0] != q.data.shape[0]:
        raise ValueError(
            f"attention_core: K and Q channel dims differ: {k.data.shape[0]} vs {q.data.shape[0]}")
    if v.data.shape[1] != k.data.shape[1]:
        raise ValueError(
            f"attention_core: V has {v.data.shape[1]} positions but K has {k.data.shape[1]}")
    dtype = k.data.dtype
    if dtype != q.data.dtype or dtype != v.data.dtype:
        raise TypeError("attention_core: mixed dtypes")

    nk = k.data.shape[1]
    nq = q.data.shape[1]

    if dtype == np.float32 and nq >= 256:
        return _attention_fast(k, q, v, nk, nq)

    a = k.data.T @ q.data                      # (Nk, Nq)
    a -= a.max(axis=0, keepdims=True)
    np.exp(a, out=a)
    a /= a.sum(axis=0, keepdims=True)          # S
    s = a
    out = Node(v.data @ s, (k, q, v))

    def backward(g):
        ds = v.data.T @ g
        c = (ds * s).sum(axis=0, keepdims=True)
        da = s * (ds - c)
        _accum(k, q.data @ da.T)
        _accum(q, k.data @ da)
        _accum(v, g @ s.T)

    _set_backward(out, backward)
    return out


def _attention_fast(k: Node, q: Node, v: Node, nk: int, nq: int) -> Node:
    """float32 attention with the score matrix stored transposed (query-major)
    so softmax and its backward run along contiguous rows, blocked for cache."""
    qt = np.ascontiguousarray(q.data.T)        # (Nq, C)
    vt = np.ascontiguousarray(v.data.T)        # (Nk, Cv)
    st = pool.acquire((nq, nk), np.float32)    # S^T
    gt = np.empty((nq, v.data.shape[0]), np.float32)
    block = 256
    for i0 in range(0, nq, block):
        i1 = min(i0 + block, nq)
        blk = st[i0:i1]
        np.matmul(qt[i0:i1], k.data, out=blk)  # A^T rows
        softmax_rows_inplace(blk, block=block)
        np.matmul(blk, vt, out=gt[i0:i1])      # G^T rows while hot
    out = Node(np.ascontiguousarray(gt.T), (k, q, v))

    if not _grad_enabled:
        pool.release(st)
        return out

    def backward(g):
        dst = pool.acquire((nq, nk), np.float32)
        np.matmul(np.ascontiguousarray(g.T), v.data, out=dst)   # dS^T
        softmax_rows_grad(st, dst, dst)                          # dA^T in place
        kt = np.ascontiguousarray(k.data.T)
        _accum(q, np.ascontiguousarray((dst @ kt).T))
        _accum(k, q.data @ dst)
        _accum(v, g @ st)
        pool.release(dst)
        pool.release(st)

    _set_backward(out, backward)
    return out


# -- convolution ---------------------------------------------------------

def _im2col(x: np.ndarray, ksize: int) -> np.ndarray:
    """(C,H,W) -> (H*W, k*k*C) patch matrix, zero padded to keep H,W."""
    c, h, w = x.shape
    if ksize == 1:
        return np.ascontiguousarray(x.reshape(c, h * w).T)
    p = (ksize - 1) // 2
    xp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, p:p + h, p:p + w] = x
    cols = np.empty((h * w, ksize * ksize * c), dtype=x.dtype)
    i = 0
    for ky in range(ksize):
        for kx in range(ksize):
            cols[:, i * c:(i + 1) * c] = xp[:, ky:ky + h, kx:kx + w].reshape(c, h * w).T
            i += 1
    return cols


def _col2im(dcols: np.ndarray, c: int, h: int, w: int, ksize: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patch gradients back."""
    if ksize == 1:
        return np.ascontiguousarray(dcols.T).reshape(c, h, w)
    p = (ksize - 1) // 2
    dxp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    i = 0
    for ky in range(ksize):
        for kx in range(ksize):
            dxp[:, ky:ky + h, kx:kx + w] += np.ascontiguousarray(
                dcols[:, i * c:(i + 1) * c].T).reshape(c, h, w)
            i += 1
    return np.ascontiguousarray(dxp[:, p:p + h, p:p + w])


def conv2d(x: Node, w: Node, b: Node | None = None) -> Node:
    """Same-size 2-D convolution, stride 1, odd kernel, zero padding.

    x: (Ci,H,W), w: (Co,Ci,k,k), b: (Co,) or None -> (Co,H,W).
    """
    if x.data.ndim != 3:
        raise ValueError(f"conv2d: input must be (C,H,W), got {x.data.shape}")
    if w.data.ndim != 4 or w.data.shape[2] != w.data.shape[3]:
        raise ValueError(f"conv2d: weight must be (Co,Ci,k,k), got {w.data.shape}")
    ci, h, wd = x.data.shape
    co, ci_w, ksize, _ = w.data.shape
    if ci != ci_w:
        raise ValueError(f"conv2d: input has {ci} channels, weight expects {ci_w}")
    if ksize % 2 != 1:
        raise ValueError(f"conv2d: kernel size must be odd, got {ksize}")
    if b is not None and b.data.shape != (co,):
        raise ValueError(f"conv2d: bias must be ({co},), got {b.data.shape}")

    cols = _im2col(x.data, ksize)                       # (HW, k*k*Ci)
    wcol = w.data.transpose(0, 2, 3, 1).reshape(co, -1)  # (Co, k*k*Ci)
    out2 = cols @ wcol.T
    if b is not None:
        out2 += b.data[None, :]
    parents = (x, w) if b is None else (x, w, b)
    out = Node(np.ascontiguousarray(out2.T).reshape(co, h, wd), parents)

    def backward(g):
        g2 = g.reshape(co, h * wd)                       # (Co, HW), contiguous
        if b is not None:
            _accum(b, g.sum(axis=(1, 2)))
        dwcol = g2 @ cols                                # (Co, k*k*Ci)
        _accum(w, np.ascontiguousarray(
            dwcol.reshape(co, ksize, ksize, ci).transpose(0, 3, 1, 2)))
        dcols = g2.T @ wcol                              # (HW, k*k*Ci)
        _accum(x, _col2im(dcols, ci, h, wd, ksize))

    _set_backward(out, backward)
    return out


# -- shape plumbing ------------------------------------------------------

def flatten_spatial(x: Node) -> Node:
    """(C,H,W) -> (C, H*W)."""
    if x.data.ndim != 3:
        raise ValueError(f"flatten_spatial: need (C,H,W), got {x.data.shape}")
    c, h, w = x.data.shape
    out = Node(x.data.reshape(c, h * w), (x,))
    _set_backward(out, lambda g: _accum(x, g.reshape(c, h, w)))
    return out


def unflatten_spatial(x: Node, h: int, w: int) -> Node:
    """(C, H*W) -> (C,H,W)."""
    if x.data.ndim != 2 or x.data.shape[1] != h * w:
        raise ValueError(f"unflatten_spatial: cannot view {x.data.shape} as (*,{h},{w})")
    c = x.data.shape[0]
    out = Node(x.data.reshape(c, h, w), (x,))
    _set_backward(out, lambda g: _accum(x, g.reshape(c, h * w)))
    return out


def concat_channels(a: Node, b: Node) -> Node:
    """Stack two (C,H,W) maps along channels."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[1:] != b.data.shape[1:]:
        raise ValueError(
            f"concat_channels: spatial shapes differ: {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[0]
    out = Node(np.concatenate([a.data, b.data], axis=0), (a, b))

    def backward(g):
        _accum(a, g[:ca])
        _accum(b, g[ca:])

    _set_backward(out, backward)
    return out


def slice_channels(x: Node, lo: int, hi: int) -> Node:
    if x.data.ndim != 3:
        raise ValueError(f"slice_channels: need (C,H,W), got {x.data.shape}")
    c = x.data.shape[0]
    if not (0 <= lo < hi <= c):
        raise ValueError(f"slice_channels: range [{lo},{hi}) invalid for {c} channels")
    out = Node(np.ascontiguousarray(x.data[lo:hi]), (x,))

    def backward(g):
        full = np.zeros_like(x.data)
        full[lo:hi] = g
        _accum(x, full)

    _set_backward(out, backward)
    return out


def broadcast_add_channels(x: Node, v: Node) -> Node:
    """Add a per-channel column v (C,1) to every spatial position of x (C,H,W)."""
    if x.data.ndim != 3 or v.data.shape != (x.data.shape[0], 1):
        raise ValueError(
            f"broadcast_add_channels: x {x.data.shape} needs v ({x.data.shape[0]},1), "
            f"got {v.data.shape}")
    out = Node(x.data + v.data[:, :, None], (x, v))

    def backward(g):
        _accum(x, g)
        _accum(v, g.sum(axis=(1, 2))[:, None])

    _set_backward(out, backward)
    return out


# -- resampling ----------------------------------------------------------

def avg_pool2x2(x: Node) -> Node:
    """2x2 mean pooling; spatial dims must be even."""
    if x.data.ndim != 3:
        raise ValueError(f"avg_pool2x2: need (C,H,W), got {x.data.shape}")
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2x2: spatial dims must be even, got {h}x{w}")
    out = Node(x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4)), (x,))
    quarter = x.data.dtype.type(0.25)

    def backward(g):
        _accum(x, np.repeat(np.repeat(g * quarter, 2, axis=1), 2, axis=2))

    _set_backward(out, backward)
    return out


def upsample_nearest2x(x: Node) -> Node:
    """Duplicate every pixel into a 2x2 block."""
    if x.data.ndim != 3:
        raise ValueError(f"upsample_nearest2x: need (C,H,W), got {x.data.shape}")
    c, h, w = x.data.shape
    out = Node(np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2), (x,))

    def backward(g):
        _accum(x, g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    _set_backward(out, backward)
    return out


def global_avg_pool(x: Node) -> Node:
    """(C,H,W) -> (C,1): mean over all spatial positions per channel."""
    if x.data.ndim != 3:
        raise ValueError(f"global_avg_pool: need (C,H,W), got {x.data.shape}")
    c, h, w = x.data.shape
    out = Node(x.data.mean(axis=(1, 2))[:, None], (x,))
    inv = x.data.dtype.type(1.0 / (h * w))

    def backward(g):
        _accum(x, np.broadcast_to(g[:, :, None] * inv, (c, h, w)).copy())

    _set_backward(out, backward)
    return out


# -- reductions ----------------------------------------------------------

def sum_all(x: Node) -> Node:
    out = Node(x.data.sum(), (x,))
    _set_backward(out, lambda g: _accum(x, np.broadcast_to(g, x.data.shape).copy()))
    return out


def mean_all(x: Node) -> Node:
    n = x.data.dtype.type(x.data.size)
    out = Node(x.data.mean(), (x,))
    _set_backward(out, lambda g: _accum(x, np.broadcast_to(g / n, x.data.shape).copy()))
    return out


# -- finite-difference verification --------------------------------------

def grad_check(f, wrt, h: float = 1e-5, sample_per_tensor: int | None = None,
               rng: np.random.Generator | None = None):
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` builds and returns a fresh scalar Node each call; ``wrt`` is the
    list of float64 leaf nodes to check.  Each element's relative error is
    |analytic - fd| / max(|analytic|, |fd|, 1e-8); the maximum over all
    checked elements is returned, with per-tensor maxima in the dict.

    With ``sample_per_tensor`` set, only that many elements per tensor are
    probed (uniformly without replacement), keeping large models tractable.
    """
    for node in wrt:
        if node.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 leaves")
        node.grad = None
    out = f()
    if out.data.dtype != np.float64:
        raise TypeError("grad_check requires a float64 objective")
    out.backward()
    analytic = [w.grad.copy() if w.grad is not None else np.zeros_like(w.data) for w in wrt]

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    per_tensor = {}
    for w, ana in zip(wrt, analytic):
        n = w.data.size
        if sample_per_tensor is not None and sample_per_tensor < n:
            idx = rng.choice(n, size=sample_per_tensor, replace=False)
        else:
            idx = np.arange(n)
        flat = w.data.reshape(-1)
        t_worst = 0.0
        for i in idx:
            x0 = flat[i]
            flat[i] = x0 + h
            with no_grad():
                fp = float(f().data)
            flat[i] = x0 - h
            with no_grad():
                fm = float(f().data)
            flat[i] = x0
            fd = (fp - fm) / (2.0 * h)
            a = ana.reshape(-1)[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            t_worst = max(t_worst, rel)
        name = getattr(w, "name", None) or f"leaf{wrt.index(w)}"
        per_tensor[name] = t_worst
        worst = max(worst, t_worst)
    return worst, per_tensor
