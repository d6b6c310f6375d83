"""Synthetic fundus scenes with vessel trees and co-located lesions.

A scene is built on a reddish textured background: vessel trees grow from a
disc origin as bounded-curvature random walks (generations 0-1 are arteries,
deeper generations capillaries), and four lesion classes are placed by the
anatomical co-location statistics the segmentation task exploits —
microaneurysms (MA) sit near capillary midlines, hard-exudate (EX) clusters
ring MAs, haemorrhages (HE) hug artery margins, and soft exudates (SE) sit
at a configured distance from both their HE and the artery.  Two optional
dot kinds share the MA size and shape: distractor dots (labelled background)
sit either far from any vessel ("far" placement) or on the capillary bed
under the same distance law as the MAs ("capillary" placement), and dot
haemorrhages (labelled HE) always follow the capillary law — the classic
look-alike of a microaneurysm.

With ``scene_states=2`` each scene additionally draws one of two global
appearance states.  The state swaps the colour pair painted on MA dots and
look-alike dots and re-tints the bright disc (warm vs cool).  Locally the
dot kinds are then indistinguishable — the swap is only readable off the
disc — so resolving them requires aggregating context from across the image.

Label ids: 0 background, 1 EX, 2 HE, 3 MA, 4 SE.  Overlaps resolve by
painting in the order HE, EX, SE, MA, which gives priority MA > SE > EX > HE.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from PIL import Image

from .imgproc import (load_image, load_mask, load_vessel_mask, save_image,
                      save_mask, save_vessel_mask)

CLASS_NAMES = ("background", "EX", "HE", "MA", "SE")
LESION_CLASSES = ("EX", "HE", "MA", "SE")
LABEL_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}

_PLACEMENT_TRIES = 100


@dataclass
class SceneConfig:
    size: int = 64
    # vessel trees
    trunk_count: int = 3
    branch_prob: float = 0.08            # per-step chance of spawning a child
    trunk_width: tuple[float, float] = (2.2, 3.2)   # px at the origin
    width_decay: float = 0.75            # child width = parent width * decay
    max_generation: int = 3
    curvature_sd: float = 0.18           # radians of heading drift per step
    # lesion counts, inclusive ranges
    n_ma: tuple[int, int] = (2, 4)
    n_ex_clusters: tuple[int, int] = (1, 2)
    ex_blobs_per_cluster: tuple[int, int] = (3, 6)
    n_he: tuple[int, int] = (1, 3)
    n_se: tuple[int, int] = (1, 2)
    n_distractors: tuple[int, int] = (0, 0)
    n_dot_he: tuple[int, int] = (0, 0)   # MA-sized dots labelled HE, on capillaries
    # distance laws in pixels, (mean, sd); linear in size (see with_size)
    d_se_he: tuple[float, float] = (6.0, 1.5)
    d_ex_ma: tuple[float, float] = (5.0, 1.2)
    d_se_artery: tuple[float, float] = (7.0, 2.0)
    d_ma_capillary: tuple[float, float] = (3.0, 1.0)
    distractor_min_vessel_dist: float = 8.0
    distractor_placement: str = "far"    # "far" from vessels | "capillary" (MA law)
    # background texture
    texture_amp: float = 9.0
    noise_sd: float = 4.0
    # global appearance: 1 = fixed palette; 2 = per-scene state that swaps the
    # MA/distractor colour pair and the disc tint (state readable only globally)
    scene_states: int = 1
    disc_placement: str = "random"       # "random" | "center" (canvas centre ±3px)
    disc_radius_frac: float = 0.1        # disc radius as a fraction of canvas size

    def validate(self):
        if self.size < 16:
            raise ValueError(f"size must be >= 16, got {self.size}")
        if self.trunk_count < 0:
            raise ValueError("trunk_count must be >= 0")
        if not 0.0 <= self.branch_prob <= 1.0:
            raise ValueError("branch_prob must be in [0, 1]")
        for name in ("n_ma", "n_ex_clusters", "ex_blobs_per_cluster",
                     "n_he", "n_se", "n_distractors", "n_dot_he"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be 0 <= lo <= hi, got {(lo, hi)}")
        for name in ("d_se_he", "d_ex_ma", "d_se_artery", "d_ma_capillary"):
            mean, sd = getattr(self, name)
            if mean <= 0 or sd < 0:
                raise ValueError(f"{name} needs mean > 0 and sd >= 0")
        if self.scene_states not in (1, 2):
            raise ValueError(f"scene_states must be 1 or 2, got {self.scene_states}")
        if self.disc_placement not in ("random", "center"):
            raise ValueError(
                f"disc_placement must be 'random' or 'center', got {self.disc_placement!r}")
        if self.distractor_placement not in ("far", "capillary"):
            raise ValueError("distractor_placement must be 'far' or 'capillary', "
                             f"got {self.distractor_placement!r}")
        if not 0.0 < self.disc_radius_frac <= 0.25:
            raise ValueError(
                f"disc_radius_frac must be in (0, 0.25], got {self.disc_radius_frac}")
        return self

    def with_size(self, new_size: int) -> "SceneConfig":
        """Rescale to a new canvas; distances grow linearly with size."""
        f = new_size / self.size
        scaled = {name: (m * f, s * f) for name, (m, s) in
                  ((n, getattr(self, n)) for n in
                   ("d_se_he", "d_ex_ma", "d_se_artery", "d_ma_capillary"))}
        return replace(self, size=new_size,
                       distractor_min_vessel_dist=self.distractor_min_vessel_dist * f,
                       **scaled)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        kwargs = dict(d)
        for k, v in kwargs.items():
            if isinstance(v, list):
                kwargs[k] = tuple(v)
        return cls(**kwargs).validate()


def config_hash(config: SceneConfig) -> str:
    payload = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class Sample:
    image: np.ndarray              # (S, S, 3) uint8
    labels: np.ndarray             # (S, S) uint8 class ids
    vessels: np.ndarray            # (S, S) bool
    artery_midline: np.ndarray     # (N, 2) float (y, x), generations 0-1
    capillary_midline: np.ndarray  # (M, 2) float, generations >= 2
    meta: dict = field(default_factory=dict)


# -- geometry -------------------------------------------------------------------

def _paint_disk(canvas: np.ndarray, cy: float, cx: float, r: float, value):
    h, w = canvas.shape[:2]
    y0 = max(0, int(math.floor(cy - r)))
    y1 = min(h, int(math.ceil(cy + r)) + 1)
    x0 = max(0, int(math.floor(cx - r)))
    x1 = min(w, int(math.ceil(cx + r)) + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    canvas[y0:y1, x0:x1][inside] = value


def _disk_bool(shape, cy, cx, r):
    out = np.zeros(shape, dtype=bool)
    _paint_disk(out, cy, cx, r, True)
    return out


# -- vessels --------------------------------------------------------------------

def _segment_rows(points: list[tuple[float, float, float]]) -> np.ndarray:
    """(L, 5) rows of (y, x, width, normal_y, normal_x) for one polyline."""
    pts = np.array(points, dtype=np.float64)
    if len(pts) == 1:
        tang = np.array([[0.0, 1.0]])
    else:
        tang = np.gradient(pts[:, :2], axis=0)
        tang /= np.maximum(np.linalg.norm(tang, axis=1, keepdims=True), 1e-9)
    normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    return np.hstack([pts, normal])


def generate_vessel_tree(config: SceneConfig, rng: np.random.Generator):
    """Grow the vessel trees for one scene.

    Returns (artery_mask, capillary_mask, artery_rows, capillary_rows,
    disc_center) where the row arrays are (N, 5): midline point (y, x), local
    width, and the unit normal to the local tangent.  Generation 0 walks are
    the artery trunks, every branch generation counts as capillary.  All
    trunks share the disc origin, so the union mask is one 8-connected
    component whenever any trunk exists.
    """
    s = config.size
    artery_mask = np.zeros((s, s), dtype=bool)
    capillary_mask = np.zeros((s, s), dtype=bool)
    artery_segs: list[np.ndarray] = []
    capillary_segs: list[np.ndarray] = []
    if config.disc_placement == "center":
        disc = (s / 2.0 + rng.uniform(-3.0, 3.0), s / 2.0 + rng.uniform(-3.0, 3.0))
    else:
        disc = (s * rng.uniform(0.35, 0.65), s * rng.uniform(0.12, 0.30))

    queue = []
    for _ in range(config.trunk_count):
        width = rng.uniform(*config.trunk_width)
        if config.disc_placement == "center":
            heading = rng.uniform(-math.pi, math.pi)      # radiate in all directions
        else:
            heading = rng.uniform(-math.pi / 2, math.pi / 2)  # fan away from the edge
        queue.append((disc[0], disc[1], heading, width, 0))

    while queue:
        y, x, heading, width, gen = queue.pop(0)
        mask = artery_mask if gen == 0 else capillary_mask
        # capillaries stay short so the web leaves room for off-vessel lesions
        max_steps = int(2.5 * s) if gen == 0 else int(0.8 * s)
        points: list[tuple[float, float, float]] = []
        for _ in range(max_steps):
            if not (1.0 <= y < s - 1 and 1.0 <= x < s - 1):
                break
            points.append((y, x, width))
            # rasterization floor > sqrt(2)/2: every center paints at least
            # its nearest pixel, so unit steps always leave an 8-connected
            # trail (a 0.5 radius at a cell corner would paint nothing)
            _paint_disk(mask, y, x, max(width / 2.0, 0.72), True)
            if gen < config.max_generation and rng.random() < config.branch_prob:
                sign = 1.0 if rng.random() < 0.5 else -1.0
                child_heading = heading + sign * rng.uniform(0.4, 1.1)
                child_width = max(0.9, width * config.width_decay)
                queue.append((y, x, child_heading, child_width, gen + 1))
            heading += float(np.clip(rng.normal(0.0, config.curvature_sd),
                                     -0.35, 0.35))
            y += math.sin(heading)
            x += math.cos(heading)
            width = max(1.0, width * 0.996)
        if points:
            (artery_segs if gen == 0 else capillary_segs).append(_segment_rows(points))

    empty = np.empty((0, 5))
    artery_rows = np.vstack(artery_segs) if artery_segs else empty
    capillary_rows = np.vstack(capillary_segs) if capillary_segs else empty
    return artery_mask, capillary_mask, artery_rows, capillary_rows, disc


# -- lesion placement -----------------------------------------------------------

def _sample_distance(rng, law):
    return max(0.5, float(rng.normal(*law)))


def _in_bounds(c, size, margin=3.0):
    return margin <= c[0] < size - margin and margin <= c[1] < size - margin


def _nearest(c, pts: np.ndarray) -> float:
    if len(pts) == 0:
        return math.inf
    return float(np.sqrt(((pts - np.asarray(c)) ** 2).sum(axis=1)).min())


def _place_near_points(rng, anchors: np.ndarray, law, size):
    """A point at the law's distance from a random anchor, or None.

    The distance is drawn once per lesion; retries vary only anchor and
    direction, so rejection cannot bias the realized law toward easy values.
    """
    if len(anchors) == 0:
        return None
    d = _sample_distance(rng, law)
    for _ in range(_PLACEMENT_TRIES):
        a = anchors[int(rng.integers(len(anchors)))]
        ang = rng.uniform(0.0, 2.0 * math.pi)
        c = (a[0] + d * math.sin(ang), a[1] + d * math.cos(ang))
        if _in_bounds(c, size):
            return c
    return None


def _place_off_midline(rng, rows: np.ndarray, law, size, veto_mask=None):
    """A point at the law's distance from a midline, measured to the set.

    The candidate steps off a random midline point along its local normal and
    is accepted only if its nearest distance over the whole point set matches
    the once-drawn target — a nearby sibling branch would otherwise shrink
    the realized co-location law.
    """
    if len(rows) == 0:
        return None
    d = _sample_distance(rng, law)
    for _ in range(_PLACEMENT_TRIES):
        row = rows[int(rng.integers(len(rows)))]
        sign = 1.0 if rng.random() < 0.5 else -1.0
        c = (row[0] + sign * d * row[3], row[1] + sign * d * row[4])
        if not _in_bounds(c, size):
            continue
        if veto_mask is not None and veto_mask[int(round(c[0])), int(round(c[1]))]:
            continue
        if _nearest(c, rows[:, :2]) >= d - 0.45:
            return c
    return None


def generate_sample(config: SceneConfig, seed: int) -> Sample:
    """Render one deterministic scene from (config, seed)."""
    config.validate()
    rng = np.random.default_rng(seed)
    s = config.size
    # only draw when the two-state mode is on, so single-state configs keep
    # their full random stream for the scene itself
    state = int(rng.integers(2)) if config.scene_states == 2 else 0

    artery_mask, capillary_mask, artery_rows, capillary_rows, disc = \
        generate_vessel_tree(config, rng)
    vessels = artery_mask | capillary_mask

    labels = np.zeros((s, s), dtype=np.uint8)
    unplaced = {name: 0 for name in LESION_CLASSES}
    unplaced["distractor"] = 0
    unplaced["dot_HE"] = 0

    # ---- choose all lesion geometry first --------------------------------
    n_ma = int(rng.integers(config.n_ma[0], config.n_ma[1] + 1))
    ma_centers = []
    for _ in range(n_ma):
        c = _place_off_midline(rng, capillary_rows, config.d_ma_capillary, s,
                               veto_mask=vessels)
        if c is None:
            unplaced["MA"] += 1
        else:
            ma_centers.append((c, rng.uniform(0.5, 1.5)))  # (center, radius)

    ma_pts = np.array([c for c, _ in ma_centers]).reshape(-1, 2)
    n_dot = int(rng.integers(config.n_dot_he[0], config.n_dot_he[1] + 1))
    dot_hes = []
    for _ in range(n_dot):
        placed = None
        for _ in range(4):
            c = _place_off_midline(rng, capillary_rows, config.d_ma_capillary,
                                   s, veto_mask=vessels)
            if c is not None and _nearest(c, ma_pts) > 2.5:
                placed = c
                break
        if placed is None:
            unplaced["dot_HE"] += 1
        else:
            dot_hes.append((placed, rng.uniform(0.5, 1.5)))

    # hard bright blob family (canonical label EX).  In two-state scenes the
    # clusters anchor on dot objects of either kind, so a cluster's
    # neighbourhood says nothing about which nearby dots are true MAs.
    if config.scene_states == 2:
        anchor_src = [c for c, _ in ma_centers] + [c for c, _ in dot_hes]
    else:
        anchor_src = [c for c, _ in ma_centers]
    anchors = np.array(anchor_src).reshape(-1, 2)
    n_yellow = int(rng.integers(config.n_ex_clusters[0],
                                config.n_ex_clusters[1] + 1))
    yellow_blobs = []
    for _ in range(n_yellow):
        center = _place_near_points(rng, anchors, config.d_ex_ma, s)
        if center is None:
            unplaced["EX"] += 1
            continue
        n_blobs = int(rng.integers(config.ex_blobs_per_cluster[0],
                                   config.ex_blobs_per_cluster[1] + 1))
        for _ in range(n_blobs):
            ang = rng.uniform(0.0, 2.0 * math.pi)
            rad = rng.uniform(0.0, 1.8)
            b = (center[0] + rad * math.sin(ang), center[1] + rad * math.cos(ang))
            yellow_blobs.append((b, rng.uniform(0.8, 1.4)))

    n_he = int(rng.integers(config.n_he[0], config.n_he[1] + 1))
    he_blobs = []     # (center, radius, anchor row, normal sign)
    for _ in range(n_he):
        placed = None
        for _ in range(_PLACEMENT_TRIES):
            if len(artery_rows) == 0:
                break
            p = artery_rows[int(rng.integers(len(artery_rows)))]
            sign = 1.0 if rng.random() < 0.5 else -1.0
            dist = p[2] / 2.0 + rng.uniform(0.5, 4.0)
            c = (p[0] + sign * dist * p[3], p[1] + sign * dist * p[4])
            if _in_bounds(c, s):
                placed = (c, p, sign)
                break
        if placed is None:
            unplaced["HE"] += 1
        else:
            he_blobs.append((placed[0], rng.uniform(1.8, 3.2), placed[1], placed[2]))

    # soft faint blob family (canonical label SE), anchored near HEs at the
    # configured artery distance
    n_orange = int(rng.integers(config.n_se[0], config.n_se[1] + 1))
    orange_blobs = []
    for _ in range(n_orange):
        placed = None
        d = _sample_distance(rng, config.d_se_he)
        starget = _sample_distance(rng, config.d_se_artery)
        for _ in range(_PLACEMENT_TRIES):
            if not he_blobs:
                break
            hc, _, hp, hsign = he_blobs[int(rng.integers(len(he_blobs)))]
            a = math.hypot(hc[0] - hp[0], hc[1] - hp[1])
            # pick the direction from the HE whose artery-normal component
            # lands the SE at the target artery distance (artery locally flat)
            cosphi = float(np.clip((starget - a) / d, -1.0, 1.0))
            sinphi = math.sqrt(1.0 - cosphi * cosphi)
            if rng.random() < 0.5:
                sinphi = -sinphi
            ny, nx = hsign * hp[3], hsign * hp[4]   # unit artery -> HE direction
            ty, tx = -nx, ny
            c = (hc[0] + d * (cosphi * ny + sinphi * ty),
                 hc[1] + d * (cosphi * nx + sinphi * tx))
            if not _in_bounds(c, s):
                continue
            # accept only if the realized artery distance matches the target
            realized = _nearest(c, artery_rows[:, :2])
            if abs(realized - starget) <= 1.2:
                placed = c
                break
        if placed is None:
            unplaced["SE"] += 1
        else:
            orange_blobs.append((placed, rng.uniform(2.4, 3.6)))

    n_dis = int(rng.integers(config.n_distractors[0], config.n_distractors[1] + 1))
    distractors = []
    vessel_px = np.argwhere(vessels)
    yellow_pts = np.array([c for c, _ in yellow_blobs]).reshape(-1, 2)
    for _ in range(n_dis):
        placed = None
        if config.distractor_placement == "capillary":
            # same distance law as the MAs, so proximity to a capillary
            # carries no information about which dot kind this is
            for _ in range(4):
                c = _place_off_midline(rng, capillary_rows, config.d_ma_capillary,
                                       s, veto_mask=vessels)
                if c is not None and _nearest(c, ma_pts) > 2.5 \
                        and _nearest(c, yellow_pts) > 2.5:
                    placed = c
                    break
        else:
            for _ in range(_PLACEMENT_TRIES):
                c = (rng.uniform(3, s - 3), rng.uniform(3, s - 3))
                if vessel_px.size:
                    dmin = float(np.sqrt(((vessel_px - np.array(c)) ** 2).sum(1).min()))
                    if dmin < config.distractor_min_vessel_dist:
                        continue
                placed = c
                break
        if placed is None:
            unplaced["distractor"] += 1
        else:
            distractors.append((placed, rng.uniform(0.5, 1.5)))

    # ---- labels ------------------------------------------------------------
    # Two-state scenes: the scene state decides which blob family carries
    # which label (canonical: yellow=EX, orange=SE); appearance and placement
    # never change, so the mapping is only readable off the disc tint.
    if config.scene_states == 2 and state == 1:
        yellow_id, orange_id = LABEL_IDS["SE"], LABEL_IDS["EX"]
    else:
        yellow_id, orange_id = LABEL_IDS["EX"], LABEL_IDS["SE"]
    # paint order: HE, dot-HE, yellow family, orange family, MA — later wins
    # on overlap (canonical scenes keep MA > SE > EX > HE)
    for c, r, _, _ in he_blobs:
        _paint_disk(labels, c[0], c[1], r, LABEL_IDS["HE"])
    for c, r in dot_hes:
        _paint_disk(labels, c[0], c[1], r, LABEL_IDS["HE"])
    for c, r in yellow_blobs:
        _paint_disk(labels, c[0], c[1], r, yellow_id)
    for c, r in orange_blobs:
        _paint_disk(labels, c[0], c[1], r, orange_id)
    for c, r in ma_centers:
        _paint_disk(labels, c[0], c[1], r, LABEL_IDS["MA"])

    # ---- image ------------------------------------------------------------
    img = np.empty((s, s, 3), dtype=np.float64)
    coarse = rng.normal(0.0, config.texture_amp, size=(8, 8)).astype(np.float32)
    f = np.asarray(Image.fromarray(coarse, mode="F").resize(
        (s, s), Image.Resampling.BILINEAR), dtype=np.float64)
    img[..., 0] = 178.0 + f
    img[..., 1] = 92.0 + 0.7 * f
    img[..., 2] = 46.0 + 0.5 * f

    if config.scene_states == 1:
        disc_color = (235.0, 208.0, 160.0)
    else:  # tint encodes the scene state: warm vs cool
        disc_color = (250.0, 215.0, 140.0) if state == 0 else (140.0, 215.0, 250.0)
    _paint_disk(img, disc[0], disc[1], s * config.disc_radius_frac, disc_color)
    img[artery_mask] = (118.0, 32.0, 27.0)
    img[capillary_mask] = (142.0, 48.0, 38.0)

    for c, r, _, _ in he_blobs:
        _paint_disk(img, c[0], c[1], r, (112.0, 26.0, 21.0))
    for c, r in yellow_blobs:
        _paint_disk(img, c[0], c[1], r, (236.0, 216.0, 96.0))
    for c, r in orange_blobs:  # soft edge: alpha ramps off over ~1.2 px
        y0, y1 = max(0, int(c[0] - r - 2)), min(s, int(c[0] + r + 3))
        x0, x1 = max(0, int(c[1] - r - 2)), min(s, int(c[1] + r + 3))
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dist = np.sqrt((yy - c[0]) ** 2 + (xx - c[1]) ** 2)
        alpha = np.clip((r + 1.2 - dist) / 1.2, 0.0, 1.0)[..., None]
        img[y0:y1, x0:x1] = (alpha * np.array((204.0, 132.0, 58.0))
                             + (1.0 - alpha) * img[y0:y1, x0:x1])
    # single-state scenes paint both dot kinds identically; two-state scenes
    # assign the pair by state, so the mapping is only readable off the disc
    if config.scene_states == 1:
        ma_color = dis_color = (92.0, 17.0, 15.0)
    elif state == 0:
        ma_color, dis_color = (92.0, 17.0, 15.0), (60.0, 30.0, 45.0)
    else:
        ma_color, dis_color = (60.0, 30.0, 45.0), (92.0, 17.0, 15.0)
    for c, r in distractors:   # distractors carry the background label
        _paint_disk(img, c[0], c[1], r, dis_color)
    for c, r in dot_hes:       # dot haemorrhages: MA look-alikes labelled HE
        _paint_disk(img, c[0], c[1], r, dis_color)
    for c, r in ma_centers:
        _paint_disk(img, c[0], c[1], r, ma_color)

    img += rng.normal(0.0, config.noise_sd, size=img.shape)
    image = np.clip(img, 0.0, 255.0).astype(np.uint8)

    n_yellow_placed, n_orange_placed = len(yellow_blobs), len(orange_blobs)
    if config.scene_states == 2 and state == 1:
        n_ex_label, n_se_label = n_orange_placed, n_yellow_placed
    else:
        n_ex_label, n_se_label = n_yellow_placed, n_orange_placed
    meta = {
        "seed": int(seed),
        "config_hash": config_hash(config),
        "state": state,
        "empty_vessel_mask": not bool(vessels.any()),
        "unplaced": {k: v for k, v in unplaced.items() if v},
        "counts": {
            "EX": n_ex_label, "HE": len(he_blobs), "MA": len(ma_centers),
            "SE": n_se_label, "distractor": len(distractors),
            "dot_HE": len(dot_hes),
        },
        "ma_centers": [[float(c[0]), float(c[1])] for c, _ in ma_centers],
        "dot_he_centers": [[float(c[0]), float(c[1])] for c, _ in dot_hes],
    }
    return Sample(image=image, labels=labels, vessels=vessels,
                  artery_midline=artery_rows[:, :2], capillary_midline=capillary_rows[:, :2],
                  meta=meta)


# -- co-location statistics -------------------------------------------------------

def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """8-connected components of a boolean mask, as (N, 2) index arrays."""
    visited = np.zeros(mask.shape, dtype=bool)
    comps = []
    h, w = mask.shape
    for sy, sx in np.argwhere(mask):
        if visited[sy, sx]:
            continue
        stack = [(int(sy), int(sx))]
        visited[sy, sx] = True
        comp = []
        while stack:
            y, x = stack.pop()
            comp.append((y, x))
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] \
                            and not visited[ny, nx]:
                        visited[ny, nx] = True
                        stack.append((ny, nx))
        comps.append(np.array(comp, dtype=np.int64))
    return comps


def _centroids(labels: np.ndarray, class_id: int) -> np.ndarray:
    comps = connected_components(labels == class_id)
    if not comps:
        return np.empty((0, 2))
    return np.array([c.mean(axis=0) for c in comps])


def _nearest_dists(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    if len(src) == 0 or len(dst) == 0:
        return np.empty(0)
    d = np.sqrt(((src[:, None, :] - dst[None, :, :]) ** 2).sum(-1))
    return d.min(axis=1)


def distance_stats(samples: Sequence[Sample]) -> dict[str, tuple[float, float, int]]:
    """Measured co-location laws: pair name -> (mean_px, sd_px, count).

    Distances are centroid-based nearest-neighbour separations.  A pair whose
    source or target class never appears in the sample set is absent from the
    result.
    """
    pools: dict[str, list[float]] = {
        "se_to_he": [], "ex_to_ma": [], "se_to_artery": [], "ma_to_capillary": []}
    for sample in samples:
        se = _centroids(sample.labels, LABEL_IDS["SE"])
        he = _centroids(sample.labels, LABEL_IDS["HE"])
        ex = _centroids(sample.labels, LABEL_IDS["EX"])
        ma = _centroids(sample.labels, LABEL_IDS["MA"])
        pools["se_to_he"].extend(_nearest_dists(se, he))
        pools["ex_to_ma"].extend(_nearest_dists(ex, ma))
        pools["se_to_artery"].extend(_nearest_dists(se, sample.artery_midline))
        pools["ma_to_capillary"].extend(_nearest_dists(ma, sample.capillary_midline))
    out = {}
    for name, vals in pools.items():
        if vals:
            arr = np.asarray(vals)
            out[name] = (float(arr.mean()), float(arr.std()), len(vals))
    return out


def write_distance_csv(path, stats: dict[str, tuple[float, float, int]]):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "mean_px", "sd_px", "count"])
        for name, (mean, sd, count) in stats.items():
            w.writerow([name, repr(mean), repr(sd), count])


# -- dataset IO -------------------------------------------------------------------

def sample_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate_dataset(root, config: SceneConfig, splits: dict[str, int],
                     seed: int) -> dict:
    """Write images/, labels/, vessels/ PNGs plus manifest.json.

    splits maps split name (train/val/test) to a sample count; indices are
    assigned consecutively in the given order.  Returns the manifest.
    """
    config.validate()
    root = os.fspath(root)
    for sub in ("images", "labels", "vessels"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    manifest = {
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "seed": int(seed),
        "splits": {},
        "sample_seeds": {},
    }
    index = 0
    all_samples = []
    for split, count in splits.items():
        ids = []
        for _ in range(count):
            ss = sample_seed(seed, index)
            sample = generate_sample(config, ss)
            save_image(os.path.join(root, "images", f"{index}.png"), sample.image)
            save_mask(os.path.join(root, "labels", f"{index}.png"), sample.labels)
            save_vessel_mask(os.path.join(root, "vessels", f"{index}.png"),
                             sample.vessels)
            manifest["sample_seeds"][str(index)] = ss
            ids.append(index)
            all_samples.append(sample)
            index += 1
        manifest["splits"][split] = ids
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    write_distance_csv(os.path.join(root, "distance_stats.csv"),
                       distance_stats(all_samples))
    return manifest


class Dataset:
    """Reader for the on-disk layout produced by generate_dataset."""

    def __init__(self, root):
        self.root = os.fspath(root)
        manifest_path = os.path.join(self.root, "manifest.json")
        if not os.path.exists(manifest_path):
            raise FileNotFoundError(f"no manifest.json under {self.root}")
        with open(manifest_path) as fh:
            self.manifest = json.load(fh)
        self.config = SceneConfig.from_dict(self.manifest["config"])
        self.splits = {k: list(v) for k, v in self.manifest["splits"].items()}

    def load(self, index: int):
        """(image uint8 RGB, labels uint8, vessels bool) for one sample."""
        image = load_image(os.path.join(self.root, "images", f"{index}.png"))
        labels = load_mask(os.path.join(self.root, "labels", f"{index}.png"))
        vessels = load_vessel_mask(os.path.join(self.root, "vessels", f"{index}.png"))
        return image, labels, vessels
