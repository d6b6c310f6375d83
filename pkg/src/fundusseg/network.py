"""The dual-branch segmentation network.

A shared encoder-decoder trunk produces a feature map F at input
resolution.  Each branch (lesion, vessel) optionally refines F with its
own global-context block; the vessel head reads its branch directly,
while the lesion head reads a fusion of the two branches:

* ``fusion="none"``     — the lesion branch alone (baseline),
* ``fusion="concat"``   — plain channel stacking of both branches,
* ``fusion="attention"``— the relation block (self + cross heads).

All variants share layer names where they share structure, and layer
initialisation depends only on (name, seed), so e.g. the trunk starts
from identical weights in every variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .blocks import GlobalContextBlock, RelationBlock
from .layers import ChannelNorm, Conv2dLayer
from .tensor import Node

FUSION_CHOICES = ("none", "concat", "attention")


@dataclass
class ModelConfig:
    in_channels: int = 3
    lesion_classes: int = 5          # background + 4 lesion types
    vessel_classes: int = 2
    backbone_channels: tuple[int, int] = (16, 32)
    feature_channels: int = 32       # C: trunk output, must divide by reduction
    reduction: int = 8               # attention channels C' = C / reduction
    use_global_context: bool = True
    fusion: str = "attention"
    relation_heads: str = "both"     # "both" | "self" | "cross"
    attention_budget: int = 9216     # max H*W for pairwise attention

    def validate(self):
        if self.fusion not in FUSION_CHOICES:
            raise ValueError(f"fusion must be one of {FUSION_CHOICES}, got {self.fusion!r}")
        if self.feature_channels % self.reduction != 0:
            raise ValueError(
                f"feature_channels {self.feature_channels} must be divisible by "
                f"reduction {self.reduction}")
        if len(self.backbone_channels) != 2:
            raise ValueError("backbone_channels must list the two encoder widths")
        if self.relation_heads not in ("both", "self", "cross"):
            raise ValueError(
                f"relation_heads must be 'both', 'self' or 'cross', "
                f"got {self.relation_heads!r}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["backbone_channels"] = tuple(d["backbone_channels"])
        return cls(**d).validate()


# The six architecture variants compared by the `ablate` command.
VARIANTS: dict[str, dict] = {
    "baseline": dict(use_global_context=False, fusion="none"),
    "global": dict(use_global_context=True, fusion="none"),
    "concat": dict(use_global_context=False, fusion="concat"),
    "global+cross": dict(use_global_context=True, fusion="attention", relation_heads="cross"),
    "global+self": dict(use_global_context=True, fusion="attention", relation_heads="self"),
    "full": dict(use_global_context=True, fusion="attention", relation_heads="both"),
}


class _ConvBlock:
    """conv3x3 -> channel norm -> relu."""

    def __init__(self, name, cin, cout, *, dtype, seed):
        self.conv = Conv2dLayer(name, cin, cout, 3, dtype=dtype, seed=seed,
                                bias=False)
        self.norm = ChannelNorm(f"{name}.norm", cout, dtype=dtype)

    def __call__(self, x, training):
        return T.relu(self.norm(self.conv(x), training))

    def params(self):
        return self.conv.params() + self.norm.params()

    def state(self):
        return self.norm.state()

    def load_state(self, arrays):
        self.norm.load_state(arrays)


class Backbone:
    """Two-level encoder-decoder trunk; output has ``feature_channels``
    channels at input resolution.  Input spatial dims must be even."""

    def __init__(self, config: ModelConfig, *, dtype, seed):
        b1, b2 = config.backbone_channels
        c = config.feature_channels
        mk = lambda name, ci, co: _ConvBlock(name, ci, co, dtype=dtype, seed=seed)
        self.enc1a = mk("backbone.enc1a", config.in_channels, b1)
        self.enc1b = mk("backbone.enc1b", b1, b1)
        self.enc2a = mk("backbone.enc2a", b1, b2)
        self.enc2b = mk("backbone.enc2b", b2, b2)
        self.dec1 = mk("backbone.dec1", b1 + b2, c)
        self.dec2 = mk("backbone.dec2", c, c)
        self._blocks = [self.enc1a, self.enc1b, self.enc2a, self.enc2b,
                        self.dec1, self.dec2]

    def __call__(self, x: Node, training: bool) -> Node:
        _, h, w = x.data.shape
        if h % 2 or w % 2:
            raise ValueError(f"input spatial dims must be even, got {h}x{w}")
        s1 = self.enc1b(self.enc1a(x, training), training)
        s2 = self.enc2b(self.enc2a(T.avg_pool2x2(s1), training), training)
        up = T.upsample_nearest2x(s2)
        merged = T.concat_channels(up, s1)
        return self.dec2(self.dec1(merged, training), training)

    def params(self):
        return [p for b in self._blocks for p in b.params()]

    def state(self):
        out = {}
        for b in self._blocks:
            out.update(b.state())
        return out

    def load_state(self, arrays):
        for b in self._blocks:
            b.load_state(arrays)


class SegmentationNetwork:
    """Trunk + optional per-branch context blocks + fusion + two heads."""

    def __init__(self, config: ModelConfig, *, dtype=np.float32, seed: int = 0):
        self.config = config.validate()
        self.dtype = np.dtype(dtype).type
        self.seed = seed
        c = config.feature_channels
        self.backbone = Backbone(config, dtype=dtype, seed=seed)

        self.lesion_context = None
        self.vessel_context = None
        if config.use_global_context:
            self.lesion_context = GlobalContextBlock(
                "lesion_context", c, reduction=config.reduction, dtype=dtype, seed=seed)
            self.vessel_context = GlobalContextBlock(
                "vessel_context", c, reduction=config.reduction, dtype=dtype, seed=seed)

        self.relation = None
        if config.fusion == "attention":
            self.relation = RelationBlock(
                "relation", c, heads=config.relation_heads,
                reduction=config.reduction,
                attention_budget=config.attention_budget, dtype=dtype, seed=seed)
            lesion_in = c * self.relation.out_channels_factor
        elif config.fusion == "concat":
            lesion_in = 2 * c
        else:
            lesion_in = c

        self.lesion_head = Conv2dLayer("lesion_head", lesion_in,
                                       config.lesion_classes, 1, dtype=dtype, seed=seed)
        self.vessel_head = Conv2dLayer("vessel_head", c,
                                       config.vessel_classes, 1, dtype=dtype, seed=seed)

    def forward(self, image: np.ndarray, training: bool = False):
        """image: (in_channels, H, W) float array in this network's dtype.
        Returns (lesion_logits, vessel_logits) nodes."""
        if image.ndim != 3 or image.shape[0] != self.config.in_channels:
            raise ValueError(
                f"expected input of shape ({self.config.in_channels},H,W), "
                f"got {image.shape}")
        if image.dtype != self.dtype:
            raise TypeError(f"expected {np.dtype(self.dtype)} input, got {image.dtype}")
        x = Node(image)
        f = self.backbone(x, training)
        f_l = self.lesion_context(f) if self.lesion_context is not None else f
        f_v = self.vessel_context(f) if self.vessel_context is not None else f
        if self.relation is not None:
            lesion_in = self.relation(f_l, f_v)
        elif self.config.fusion == "concat":
            lesion_in = T.concat_channels(f_l, f_v)
        else:
            lesion_in = f_l
        return self.lesion_head(lesion_in), self.vessel_head(f_v)

    def params(self) -> list:
        ps = list(self.backbone.params())
        if self.lesion_context is not None:
            ps += self.lesion_context.params()
        if self.vessel_context is not None:
            ps += self.vessel_context.params()
        if self.relation is not None:
            ps += self.relation.params()
        ps += self.lesion_head.params() + self.vessel_head.params()
        names = [p.name for p in ps]
        assert len(names) == len(set(names)), "duplicate parameter names"
        return ps

    def param_dict(self) -> dict:
        return {p.name: p for p in self.params()}

    def state(self) -> dict:
        return self.backbone.state()

    def load_state(self, arrays):
        self.backbone.load_state(arrays)

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params())
