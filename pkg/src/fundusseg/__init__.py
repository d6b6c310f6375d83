"""Dual-branch lesion/vessel segmentation on synthetic fundus scenes.

The package is self-contained: a small reverse-mode tensor engine
(:mod:`fundusseg.tensor`), attention blocks and the segmentation network
built on it, exact-arithmetic ranking metrics, contrast-limited histogram
equalisation, a synthetic scene generator, and a deterministic trainer,
all exposed through the ``fundusseg`` command line.
"""

__version__ = "0.1.0"
