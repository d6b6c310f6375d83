"""Scene generator: determinism, connectivity, co-location statistics, IO."""

import csv
import json
from collections import deque

import numpy as np
import pytest

from fundusseg.synth import (CLASS_NAMES, LABEL_IDS, Dataset, SceneConfig,
                             Sample, config_hash, connected_components,
                             distance_stats, generate_dataset, generate_sample,
                             generate_vessel_tree, sample_seed)


def _flood_fill_count(mask):
    """Number of 8-connected components, counted by BFS (test-local oracle)."""
    seen = np.zeros_like(mask, dtype=bool)
    h, w = mask.shape
    comps = 0
    for sy, sx in np.argwhere(mask):
        if seen[sy, sx]:
            continue
        comps += 1
        q = deque([(int(sy), int(sx))])
        seen[sy, sx] = True
        while q:
            y, x = q.popleft()
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        q.append((ny, nx))
    return comps


def test_bit_determinism():
    cfg = SceneConfig()
    a = generate_sample(cfg, 123)
    b = generate_sample(cfg, 123)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.vessels, b.vessels)
    c = generate_sample(cfg, 124)
    assert not np.array_equal(a.image, c.image)


def test_vessel_mask_is_one_component():
    cfg = SceneConfig()
    for seed in range(5):
        rng = np.random.default_rng(seed)
        am, cm, arows, crows, _ = generate_vessel_tree(cfg, rng)
        mask = am | cm
        assert mask.any()
        assert _flood_fill_count(mask) == 1  # all trunks share the disc origin


def test_label_values_and_counts():
    cfg = SceneConfig()
    seen = set()
    for seed in range(10):
        s = generate_sample(cfg, seed)
        seen |= set(np.unique(s.labels).tolist())
        counts = s.meta["counts"]
        for name in ("EX", "HE", "MA", "SE"):
            present = (s.labels == LABEL_IDS[name]).any()
            if counts[name] > 0:
                assert present, f"{name} counted but never painted (seed {seed})"
    assert seen <= set(range(len(CLASS_NAMES)))
    assert seen >= {0, 1, 2, 3, 4}  # across 10 scenes every class appears


def test_zero_counts_give_background_only_labels():
    cfg = SceneConfig(n_ma=(0, 0), n_ex_clusters=(0, 0), n_he=(0, 0),
                      n_se=(0, 0))
    s = generate_sample(cfg, 0)
    assert not s.labels.any()
    assert s.vessels.any()
    assert s.meta["unplaced"] == {}


def test_no_trunks_flags_empty_vessel_mask():
    cfg = SceneConfig(trunk_count=0)
    s = generate_sample(cfg, 0)
    assert not s.vessels.any()
    assert s.meta["empty_vessel_mask"]
    # every vessel-anchored lesion is unplaceable and reported as such
    assert s.meta["unplaced"].get("MA", 0) + s.meta["counts"]["MA"] >= 1
    assert s.meta["counts"]["MA"] == 0


def test_meta_seed_and_config_hash():
    cfg = SceneConfig()
    s = generate_sample(cfg, 55)
    assert s.meta["seed"] == 55
    assert s.meta["config_hash"] == config_hash(cfg)
    assert config_hash(cfg) != config_hash(SceneConfig(trunk_count=5))


def test_connected_components_eight_connectivity():
    mask = np.zeros((6, 6), dtype=bool)
    mask[1, 1] = mask[2, 2] = True      # diagonal neighbours: one component
    mask[5, 5] = True                   # far away: second component
    comps = connected_components(mask)
    assert len(comps) == 2
    sizes = sorted(len(c) for c in comps)
    assert sizes == [1, 2]


def test_distance_stats_hand_fixtures():
    labels = np.zeros((12, 12), dtype=np.uint8)
    # SE plus-sign centred on (5, 5) inside an HE square ring with the same
    # centroid: both are single 8-connected components, distance exactly 0
    labels[4:7, 5] = LABEL_IDS["SE"]
    labels[5, 4] = labels[5, 6] = LABEL_IDS["SE"]
    ring = np.zeros((12, 12), dtype=bool)
    ring[3:8, 3:8] = True
    ring[4:7, 4:7] = False
    labels[ring] = LABEL_IDS["HE"]
    sample = Sample(image=np.zeros((12, 12, 3), dtype=np.uint8), labels=labels,
                    vessels=np.zeros((12, 12), dtype=bool),
                    artery_midline=np.empty((0, 2)),
                    capillary_midline=np.empty((0, 2)))
    stats = distance_stats([sample])
    assert stats["se_to_he"][0] == 0.0
    assert "se_to_artery" not in stats   # no artery midline recorded
    assert "ma_to_capillary" not in stats

    labels2 = np.zeros((12, 12), dtype=np.uint8)
    labels2[2, 2] = LABEL_IDS["SE"]
    labels2[2, 6] = LABEL_IDS["HE"]
    sample2 = Sample(image=np.zeros((12, 12, 3), dtype=np.uint8), labels=labels2,
                     vessels=np.zeros((12, 12), dtype=bool),
                     artery_midline=np.array([[2.0, 2.0]]),
                     capillary_midline=np.empty((0, 2)))
    stats2 = distance_stats([sample2])
    assert stats2["se_to_he"] == (4.0, 0.0, 1)
    assert stats2["se_to_artery"] == (0.0, 0.0, 1)


def test_distance_stats_missing_class_pair_absent():
    cfg = SceneConfig(n_se=(0, 0))
    stats = distance_stats([generate_sample(cfg, s) for s in range(3)])
    assert "se_to_he" not in stats
    assert "se_to_artery" not in stats
    assert "ex_to_ma" in stats


def test_generated_distances_match_configured_laws():
    cfg = SceneConfig()
    samples = [generate_sample(cfg, s) for s in range(100)]
    stats = distance_stats(samples)
    configured = {
        "se_to_he": cfg.d_se_he[0],
        "ex_to_ma": cfg.d_ex_ma[0],
        "se_to_artery": cfg.d_se_artery[0],
        "ma_to_capillary": cfg.d_ma_capillary[0],
    }
    for pair, target in configured.items():
        mean, _, n = stats[pair]
        assert n >= 50, f"{pair}: too few measurements ({n})"
        assert abs(mean - target) / target < 0.20, \
            f"{pair}: measured {mean:.2f} vs configured {target:.2f}"


def test_with_size_scales_distances_linearly():
    cfg = SceneConfig(size=64)
    big = cfg.with_size(128)
    assert big.size == 128
    assert big.d_se_he == (12.0, 3.0)
    assert big.d_ma_capillary == (6.0, 2.0)
    assert big.distractor_min_vessel_dist == cfg.distractor_min_vessel_dist * 2
    assert big.n_ma == cfg.n_ma  # counts do not scale


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError, match="size"):
        SceneConfig(size=8).validate()
    with pytest.raises(ValueError, match="branch_prob"):
        SceneConfig(branch_prob=1.5).validate()
    with pytest.raises(ValueError, match="n_ma"):
        SceneConfig(n_ma=(3, 1)).validate()
    with pytest.raises(ValueError, match="d_se_he"):
        SceneConfig(d_se_he=(0.0, 1.0)).validate()
    cfg = SceneConfig(n_ma=(1, 2), d_se_he=(5.0, 1.0))
    again = SceneConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_distractors_sit_far_from_vessels():
    cfg = SceneConfig(n_distractors=(3, 3))
    found = 0
    for seed in range(5):
        s = generate_sample(cfg, seed)
        found += s.meta["counts"]["distractor"]
    assert found > 0  # placement succeeds at least sometimes


def test_dataset_round_trip(tmp_path):
    cfg = SceneConfig()
    manifest = generate_dataset(tmp_path, cfg, {"train": 3, "val": 1, "test": 2},
                                seed=9)
    assert manifest["splits"] == {"train": [0, 1, 2], "val": [3], "test": [4, 5]}
    ds = Dataset(tmp_path)
    assert ds.splits == manifest["splits"]
    assert ds.config == cfg
    image, labels, vessels = ds.load(0)
    regen = generate_sample(cfg, sample_seed(9, 0))
    assert np.array_equal(image, regen.image)
    assert np.array_equal(labels, regen.labels)
    assert np.array_equal(vessels, regen.vessels)
    with open(tmp_path / "distance_stats.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["pair", "mean_px", "sd_px", "count"]
    assert len(rows) > 1


def test_dataset_missing_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest"):
        Dataset(tmp_path)
