"""Contrast-limited adaptive histogram equalization, augmentation, PNG IO.

CLAHE runs per RGB channel: the channel is padded by reflection to a
multiple of the tile grid, each tile's 256-bin histogram is clipped (excess
redistributed uniformly, counts preserved) and turned into an equalization
LUT, and every pixel is mapped by bilinearly blending the LUTs of its four
nearest tile centers.  Tile centers sit at j*tile + tile//2; outside the
center lattice the weights clamp to the edge tiles, so a 1x1 grid reduces
exactly to a single global LUT.  A tile whose histogram occupies at most one
bin keeps the identity mapping — equalizing a constant patch is undefined
and the identity makes constant images a fixed point of the whole transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image


@dataclass
class ClaheParams:
    clip_limit: float = 2.0  # multiple of the uniform bin height; inf = no clip
    grid: int = 8            # tiles per axis

    def validate(self):
        if not self.clip_limit >= 1.0:
            raise ValueError(f"clip_limit must be >= 1, got {self.clip_limit}")
        if self.grid < 1:
            raise ValueError(f"grid must be >= 1, got {self.grid}")
        return self


def _clip_histogram(hist: np.ndarray, c_int: int) -> np.ndarray:
    """Cap bins at c_int and spread the excess uniformly (total preserved).

    Every bin gets excess // 256; the first excess % 256 bins get one more.
    """
    excess = int(np.maximum(hist - c_int, 0).sum())
    out = np.minimum(hist, c_int).astype(np.int64)
    out += excess // 256
    out[: excess % 256] += 1
    return out


def _equalize_lut(hist: np.ndarray, clip_limit: float, tile_pixels: int) -> np.ndarray:
    if np.count_nonzero(hist) <= 1:
        return np.arange(256, dtype=np.uint8)
    if np.isfinite(clip_limit):
        c_int = max(1, int(np.floor(clip_limit * tile_pixels / 256.0)))
        hist = _clip_histogram(hist, c_int)
    cdf = np.cumsum(hist)
    cdf_min = int(cdf[np.flatnonzero(hist)[0]])
    n = int(cdf[-1])
    if n == cdf_min:
        return np.arange(256, dtype=np.uint8)
    vals = np.floor((cdf - cdf_min) * 255.0 / (n - cdf_min) + 0.5)
    return np.clip(vals, 0, 255).astype(np.uint8)


def _axis_blend(size: int, tile: int, n_tiles: int):
    """Per-coordinate tile indices and blend weight toward the next tile."""
    c = (np.arange(size) - tile // 2) / tile
    j0 = np.floor(c).astype(np.int64)
    w = c - j0
    low = j0 < 0
    high = j0 >= n_tiles - 1
    j0 = np.clip(j0, 0, n_tiles - 1)
    w[low] = 0.0
    w[high] = 0.0
    j0[high] = n_tiles - 1
    j1 = np.minimum(j0 + 1, n_tiles - 1)
    return j0, j1, w


def clahe_channel(channel: np.ndarray, params: ClaheParams) -> np.ndarray:
    params.validate()
    if channel.ndim != 2 or channel.size == 0:
        raise ValueError(f"expected a non-empty 2-d channel, got shape {channel.shape}")
    if channel.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {channel.dtype}")
    h, w = channel.shape
    g = params.grid
    ph = (g - h % g) % g
    pw = (g - w % g) % g
    padded = np.pad(channel, ((0, ph), (0, pw)), mode="reflect") if (ph or pw) else channel
    hh, ww = padded.shape
    th, tw = hh // g, ww // g

    luts = np.empty((g, g, 256), dtype=np.uint8)
    for ty in range(g):
        for tx in range(g):
            tile = padded[ty * th:(ty + 1) * th, tx * tw:(tx + 1) * tw]
            hist = np.bincount(tile.ravel(), minlength=256).astype(np.int64)
            luts[ty, tx] = _equalize_lut(hist, params.clip_limit, th * tw)

    jy0, jy1, wy = _axis_blend(hh, th, g)
    jx0, jx1, wx = _axis_blend(ww, tw, g)
    wy = wy[:, None]
    wx = wx[None, :]
    a = jy0[:, None]
    b = jy1[:, None]
    c = jx0[None, :]
    d = jx1[None, :]
    v = padded
    blend = ((1 - wy) * (1 - wx) * luts[a, c, v]
             + (1 - wy) * wx * luts[a, d, v]
             + wy * (1 - wx) * luts[b, c, v]
             + wy * wx * luts[b, d, v])
    out = np.floor(blend + 0.5).astype(np.uint8)
    return out[:h, :w]


def clahe(image: np.ndarray, params: ClaheParams) -> np.ndarray:
    """Equalize a (H,W) grayscale or (H,W,3) RGB uint8 image, per channel."""
    if image.ndim == 2:
        return clahe_channel(image, params)
    if image.ndim == 3 and image.shape[2] == 3:
        return np.stack([clahe_channel(image[..., i], params) for i in range(3)],
                        axis=2)
    raise ValueError(f"expected (H,W) or (H,W,3) image, got shape {image.shape}")


# -- augmentation --------------------------------------------------------------

def _resize(arr: np.ndarray, size: tuple[int, int], *, nearest: bool) -> np.ndarray:
    """Resize (H,W) or (H,W,3) uint8 to (h,w), bilinear unless nearest."""
    h, w = size
    mode = Image.Resampling.NEAREST if nearest else Image.Resampling.BILINEAR
    return np.asarray(Image.fromarray(arr).resize((w, h), mode))


def augment(image: np.ndarray, masks: list[np.ndarray], out_size: tuple[int, int],
            rng: np.random.Generator, scale_range: tuple[float, float] = (0.8, 1.2)):
    """Jointly transform an image and its masks with one random draw set.

    Order: p=0.5 horizontal flip, p=0.5 vertical flip, rotation by a uniform
    multiple of 90 degrees, then a uniform scale from scale_range (image
    bilinear, masks nearest) and a uniform random crop to out_size.  All
    random values are drawn unconditionally in this fixed order, so a given
    generator state always yields the same transform.
    """
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("image must be (H,W,3) uint8")
    for m in masks:
        if m.shape != image.shape[:2]:
            raise ValueError(f"mask shape {m.shape} does not match image {image.shape[:2]}")

    do_h = rng.random() < 0.5
    do_v = rng.random() < 0.5
    k = int(rng.integers(0, 4))
    scale = float(rng.uniform(*scale_range))

    arrs = [image] + list(masks)
    if do_h:
        arrs = [np.flip(a, axis=1) for a in arrs]
    if do_v:
        arrs = [np.flip(a, axis=0) for a in arrs]
    if k:
        arrs = [np.rot90(a, k) for a in arrs]

    sh = max(1, int(round(arrs[0].shape[0] * scale)))
    sw = max(1, int(round(arrs[0].shape[1] * scale)))
    if (sh, sw) != arrs[0].shape[:2]:
        arrs = [_resize(np.ascontiguousarray(a), (sh, sw), nearest=(i > 0))
                for i, a in enumerate(arrs)]

    ch, cw = out_size
    if ch > sh or cw > sw:
        raise ValueError(
            f"crop {out_size} exceeds scaled image ({sh}, {sw}); "
            f"shrink the crop or raise the scale range")
    oy = int(rng.integers(0, sh - ch + 1))
    ox = int(rng.integers(0, sw - cw + 1))
    arrs = [np.ascontiguousarray(a[oy:oy + ch, ox:ox + cw]) for a in arrs]
    return arrs[0], arrs[1:]


# -- PNG IO ---------------------------------------------------------------------

def save_image(path, arr: np.ndarray):
    """8-bit RGB PNG."""
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError("image must be (H,W,3) uint8")
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"{path}: expected RGB image, got mode {im.mode}")
        return np.asarray(im)


def save_mask(path, arr: np.ndarray):
    """Single-channel PNG of small integer class ids."""
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError("mask must be (H,W) uint8")
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: expected single-channel mask, got mode {im.mode}")
        return np.asarray(im)


def save_vessel_mask(path, arr: np.ndarray):
    """Binary mask stored as {0, 255}."""
    save_mask(path, np.where(arr.astype(bool), 255, 0).astype(np.uint8))


def load_vessel_mask(path) -> np.ndarray:
    raw = load_mask(path)
    bad = np.setdiff1d(np.unique(raw), [0, 255])
    if bad.size:
        raise ValueError(f"{path}: vessel mask must be 0/255, found {bad[:5]}")
    return raw == 255
