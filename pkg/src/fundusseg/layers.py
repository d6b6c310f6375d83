"""Trainable layers: convolution and per-channel normalisation.

Initialisation is derived from a stable digest of the layer's full name
plus the global seed, so a layer called ``backbone.enc1a`` receives the
same initial weights no matter which model variant it is built into, and
no matter what else was instantiated first.  That makes architecture
variants start from genuinely shared weights where their parts overlap.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .tensor import Node, Parameter, _accum, _set_backward


def seeded_rng(name: str, seed: int) -> np.random.Generator:
    """Deterministic generator for one named weight tensor.

    Uses sha256 rather than ``hash()`` (which is salted per process) so the
    stream is stable across runs and machines.
    """
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def xavier_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator,
                   dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2dLayer:
    """Same-size convolution with odd kernel; owns its kernel and bias.

    ``zero_init=True`` starts the kernel at exactly zero; the final embed
    layers of the attention blocks use this so a freshly built block is an
    identity map on its input.
    """

    def __init__(self, name: str, cin: int, cout: int, ksize: int, *,
                 dtype=np.float32, seed: int = 0, zero_init: bool = False,
                 bias: bool = True):
        self.name = name
        self.ksize = ksize
        if zero_init:
            kernel = np.zeros((cout, cin, ksize, ksize), dtype=dtype)
        else:
            rng = seeded_rng(f"{name}.kernel", seed)
            kernel = xavier_uniform((cout, cin, ksize, ksize),
                                    cin * ksize * ksize, cout * ksize * ksize,
                                    rng, dtype)
        self.kernel = Parameter(kernel, f"{name}.kernel")
        # a conv feeding a channel norm gets no bias: the norm's mean
        # subtraction would cancel it, leaving a gradient-free parameter
        self.bias = Parameter(np.zeros(cout, dtype=dtype), f"{name}.bias") \
            if bias else None

    def __call__(self, x: Node) -> Node:
        return T.conv2d(x, self.kernel, self.bias)

    def params(self):
        return [self.kernel] if self.bias is None else [self.kernel, self.bias]


class ChannelNorm:
    """Per-channel normalisation over spatial positions.

    In training mode each channel is standardised by the statistics of the
    current map and the running estimates are updated in place
    (``running = 0.9 * running + 0.1 * batch``); in eval mode the running
    estimates are used.  Scale and shift are learned per channel.
    """

    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, name: str, c: int, *, dtype=np.float32):
        self.name = name
        self.scale = Parameter(np.ones(c, dtype=dtype), f"{name}.scale")
        self.shift = Parameter(np.zeros(c, dtype=dtype), f"{name}.shift")
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def __call__(self, x: Node, training: bool) -> Node:
        if x.data.ndim != 3 or x.data.shape[0] != self.running_mean.shape[0]:
            raise ValueError(
                f"{self.name}: expected ({self.running_mean.shape[0]},H,W), got {x.data.shape}")
        dtype = x.data.dtype
        gamma, beta = self.scale, self.shift
        if training:
            mu = x.data.mean(axis=(1, 2))
            var = x.data.var(axis=(1, 2))
            m = dtype.type(self.MOMENTUM)
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(dtype)
        else:
            mu = self.running_mean.astype(dtype)
            var = self.running_var.astype(dtype)
        inv_std = 1.0 / np.sqrt(var + dtype.type(self.EPS))
        xhat = (x.data - mu[:, None, None]) * inv_std[:, None, None]
        out = Node(gamma.data[:, None, None] * xhat + beta.data[:, None, None],
                   (x, gamma, beta))
        n = x.data.shape[1] * x.data.shape[2]

        def backward(g):
            _accum(beta, g.sum(axis=(1, 2)))
            _accum(gamma, (g * xhat).sum(axis=(1, 2)))
            dxhat = g * gamma.data[:, None, None]
            if training:
                mean_d = dxhat.mean(axis=(1, 2))[:, None, None]
                mean_dx = (dxhat * xhat).mean(axis=(1, 2))[:, None, None]
                dx = inv_std[:, None, None] * (dxhat - mean_d - xhat * mean_dx)
            else:
                dx = dxhat * inv_std[:, None, None]
            _accum(x, dx)

        _set_backward(out, backward)
        return out

    def params(self):
        return [self.scale, self.shift]

    def state(self):
        """Non-trained arrays that belong in a checkpoint."""
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def load_state(self, arrays: dict[str, np.ndarray]):
        self.running_mean = arrays[f"{self.name}.running_mean"].copy()
        self.running_var = arrays[f"{self.name}.running_var"].copy()
