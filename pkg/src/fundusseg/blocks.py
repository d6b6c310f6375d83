"""Attention blocks.

Two mechanisms operate on backbone feature maps:

* :class:`GlobalContextBlock` pools one learned query vector from the whole
  map, scores every position against it, and adds the attention-averaged
  value vector back to every position — cheap global context (the score
  matrix is positions x 1).

* :class:`RelationBlock` runs two full pairwise attention heads over the
  lesion map: a self head (keys/values from the lesion map itself) and a
  cross head (keys/values from the vessel map), each added residually to
  the lesion map, then stacked along channels.  Its score matrix is
  positions x positions, so inputs are capped by ``attention_budget``.

Both blocks end in zero-initialised 1x1 embeds, so a freshly built block
is an exact identity on its input (plus a channel copy for the relation
block); training opens the attention pathways gradually.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Conv2dLayer
from .tensor import Node


class GlobalContextBlock:
    """F + embed(V @ softmax(K^T q)), q pooled from a projection of F."""

    def __init__(self, name: str, c: int, *, reduction: int = 8,
                 dtype=np.float32, seed: int = 0):
        if c % reduction != 0:
            raise ValueError(
                f"{name}: channel count {c} must be divisible by the reduction "
                f"factor {reduction}")
        cp = c // reduction
        self.name = name
        self.query = Conv2dLayer(f"{name}.query", c, cp, 3, dtype=dtype, seed=seed)
        self.key = Conv2dLayer(f"{name}.key", c, cp, 3, dtype=dtype, seed=seed)
        self.value = Conv2dLayer(f"{name}.value", c, cp, 3, dtype=dtype, seed=seed)
        self.embed = Conv2dLayer(f"{name}.embed", cp, c, 1, dtype=dtype, seed=seed,
                                 zero_init=True)

    def __call__(self, f: Node) -> Node:
        _, h, w = f.data.shape
        q = T.global_avg_pool(self.query(f))                  # (C',1)
        kf = T.flatten_spatial(self.key(f))                   # (C',HW)
        vf = T.flatten_spatial(self.value(f))                 # (C',HW)
        g = T.attention_core(kf, q, vf)                       # (C',1)
        gm = T.unflatten_spatial(g, 1, 1)
        ge = T.flatten_spatial(self.embed(gm))                # (C,1)
        return T.broadcast_add_channels(f, ge)

    def params(self):
        return (self.query.params() + self.key.params()
                + self.value.params() + self.embed.params())


class RelationHead:
    """One pairwise attention head: queries from f_q, keys/values from f_kv,
    output embedded and added back to f_q."""

    def __init__(self, name: str, c: int, *, reduction: int = 8,
                 dtype=np.float32, seed: int = 0):
        if c % reduction != 0:
            raise ValueError(
                f"{name}: channel count {c} must be divisible by the reduction "
                f"factor {reduction}")
        cp = c // reduction
        self.name = name
        self.query = Conv2dLayer(f"{name}.query", c, cp, 3, dtype=dtype, seed=seed)
        self.key = Conv2dLayer(f"{name}.key", c, cp, 3, dtype=dtype, seed=seed)
        self.value = Conv2dLayer(f"{name}.value", c, cp, 3, dtype=dtype, seed=seed)
        self.embed = Conv2dLayer(f"{name}.embed", cp, c, 1, dtype=dtype, seed=seed,
                                 zero_init=True)

    def __call__(self, f_q: Node, f_kv: Node) -> Node:
        _, h, w = f_q.data.shape
        qf = T.flatten_spatial(self.query(f_q))
        kf = T.flatten_spatial(self.key(f_kv))
        vf = T.flatten_spatial(self.value(f_kv))
        g = T.attention_core(kf, qf, vf)                      # (C',HW)
        gm = T.unflatten_spatial(g, h, w)
        return T.add(self.embed(gm), f_q)

    def params(self):
        return (self.query.params() + self.key.params()
                + self.value.params() + self.embed.params())


class RelationBlock:
    """Self + cross attention over the lesion map, stacked along channels.

    ``heads`` selects which heads run: "both" (output 2C channels, self
    first), "self" or "cross" (output C channels).
    """

    HEAD_CHOICES = ("both", "self", "cross")

    def __init__(self, name: str, c: int, *, heads: str = "both",
                 reduction: int = 8, attention_budget: int = 9216,
                 dtype=np.float32, seed: int = 0):
        if heads not in self.HEAD_CHOICES:
            raise ValueError(f"{name}: heads must be one of {self.HEAD_CHOICES}, got {heads!r}")
        self.name = name
        self.heads = heads
        self.attention_budget = attention_budget
        self.self_head = None
        self.cross_head = None
        if heads in ("both", "self"):
            self.self_head = RelationHead(f"{name}.self", c, reduction=reduction,
                                          dtype=dtype, seed=seed)
        if heads in ("both", "cross"):
            self.cross_head = RelationHead(f"{name}.cross", c, reduction=reduction,
                                           dtype=dtype, seed=seed)

    @property
    def out_channels_factor(self) -> int:
        return 2 if self.heads == "both" else 1

    def __call__(self, f_l: Node, f_v: Node) -> Node:
        _, h, w = f_l.data.shape
        hw = h * w
        if hw > self.attention_budget:
            raise ValueError(
                f"{self.name}: pairwise attention needs a {hw}x{hw} score matrix "
                f"({h}x{w} input) but attention_budget is {self.attention_budget}; "
                f"reduce the input size or raise the budget")
        outs = []
        if self.self_head is not None:
            outs.append(self.self_head(f_l, f_l))
        if self.cross_head is not None:
            outs.append(self.cross_head(f_l, f_v))
        if len(outs) == 2:
            return T.concat_channels(outs[0], outs[1])
        return outs[0]

    def params(self):
        ps = []
        if self.self_head is not None:
            ps += self.self_head.params()
        if self.cross_head is not None:
            ps += self.cross_head.params()
        return ps
