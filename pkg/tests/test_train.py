"""Optimizer, schedule, training loop, evaluation, and ablation runner."""

import json
import math
import os

import numpy as np
import pytest

from fundusseg import tensor as T
from fundusseg import train as tr
from fundusseg.checkpoint import Checkpoint, CheckpointError
from fundusseg.loss import LossWeights, total_loss
from fundusseg.network import ModelConfig, SegmentationNetwork
from fundusseg.synth import SceneConfig, generate_dataset
from fundusseg.tensor import Parameter
from fundusseg.train import (TrainConfig, TrainError, ablate, evaluate,
                             evaluate_model, lr_at, sgd_step, train)

SMALL_MODEL = dict(backbone_channels=(4, 8), feature_channels=8, reduction=8)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "tiny"
    cfg = SceneConfig().with_size(32)
    generate_dataset(root, cfg, {"train": 4, "val": 2, "test": 2}, seed=11)
    return str(root)


def smoke_config(data_root, out_dir, **overrides):
    base = dict(
        data_root=data_root, out_dir=out_dir, epochs=1, batch=2, crop=32,
        scale_min=1.0, scale_max=1.0, use_clahe=False, lr0=0.05,
        model=ModelConfig(**SMALL_MODEL))
    base.update(overrides)
    return TrainConfig(**base).validate()


# -- lr schedule and optimizer --------------------------------------------------


def test_lr_schedule_values():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.001
    assert lr_at(119, cfg) == 0.001
    assert lr_at(120, cfg) == pytest.approx(0.0001, rel=1e-12)
    assert lr_at(240, cfg) == pytest.approx(0.00001, rel=1e-12)
    for epoch in range(0, 1001):
        assert lr_at(epoch, cfg) == cfg.lr0 * cfg.step_gamma ** (epoch // 120)
    with pytest.raises(ValueError, match="epoch"):
        lr_at(-1, cfg)


def test_sgd_plain_step():
    p = Parameter(np.array([1.0]), "w")
    p.grad = np.array([1.0])
    sgd_step([p], {}, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert p.data[0] == 0.9


def test_sgd_momentum_two_steps():
    # v1 = 1, p = -0.1; v2 = 0.9 + 1 = 1.9, p = -0.1 - 0.19 = -0.29
    p = Parameter(np.array([0.0]), "w")
    vel = {}
    for _ in range(2):
        p.grad = np.array([1.0])
        sgd_step([p], vel, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert p.data[0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_zero_grad_decays_velocity_only():
    p = Parameter(np.array([2.0]), "w")
    vel = {"w": np.array([1.0])}
    p.grad = np.zeros(1)
    sgd_step([p], vel, lr=0.1, momentum=0.5, weight_decay=0.0)
    assert vel["w"][0] == 0.5
    assert p.data[0] == 2.0 - 0.1 * 0.5


def test_sgd_missing_grad_still_applies_weight_decay():
    p = Parameter(np.array([2.0]), "w")
    p.grad = None
    sgd_step([p], {}, lr=0.1, momentum=0.0, weight_decay=0.5)
    # g' = 0 + 0.5*2 = 1; p = 2 - 0.1*1
    assert p.data[0] == pytest.approx(1.9, abs=1e-15)


def test_sgd_shape_mismatch_rejected():
    p = Parameter(np.zeros(3), "w")
    p.grad = np.zeros(3)
    with pytest.raises(ValueError, match="shape"):
        sgd_step([p], {"w": np.zeros(4)}, lr=0.1, momentum=0.9,
                 weight_decay=0.0)


# -- config --------------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ValueError, match="lr0"):
        TrainConfig(lr0=0.0).validate()
    with pytest.raises(ValueError, match="momentum"):
        TrainConfig(momentum=1.0).validate()
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ValueError, match="crop"):
        TrainConfig(crop=33).validate()
    with pytest.raises(ValueError, match="dtype"):
        TrainConfig(dtype="float16").validate()
    with pytest.raises(ValueError, match="scale"):
        TrainConfig(scale_min=1.5, scale_max=1.0).validate()


def test_train_config_json_round_trip():
    cfg = TrainConfig(epochs=3, model=ModelConfig(**SMALL_MODEL),
                      loss=LossWeights(lam=0.25), use_clahe=False)
    blob = json.dumps(cfg.to_dict())
    again = TrainConfig.from_dict(json.loads(blob))
    assert again == cfg


# -- training loop ---------------------------------------------------------------


def test_train_smoke_writes_all_outputs(tiny_dataset, tmp_path):
    out = str(tmp_path / "run")
    summary = train(smoke_config(tiny_dataset, out))
    assert summary["epochs_run"] == 1
    assert os.path.exists(os.path.join(out, "config.json"))
    assert os.path.exists(os.path.join(out, "last.ckpt"))
    assert os.path.exists(os.path.join(out, "best.ckpt"))
    assert os.path.exists(os.path.join(out, "val_0000.csv"))
    lines = open(os.path.join(out, "train_log.csv")).read().splitlines()
    assert lines[0] == "epoch,step,loss,lr"
    assert len(lines) == 1 + 2  # 4 train samples / batch 2
    for line in lines[1:]:
        epoch, step, loss, lr = line.split(",")
        assert math.isfinite(float(loss))
        assert float(lr) == 0.05
    with open(os.path.join(out, "val_0000.csv")) as fh:
        assert fh.readline().strip() == "class,auc_pr,auc_roc"


def test_train_is_bitwise_deterministic(tiny_dataset, tmp_path):
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    train(smoke_config(tiny_dataset, out_a, epochs=2))
    train(smoke_config(tiny_dataset, out_b, epochs=2))
    log_a = open(os.path.join(out_a, "train_log.csv"), "rb").read()
    log_b = open(os.path.join(out_b, "train_log.csv"), "rb").read()
    assert log_a == log_b
    ck_a = open(os.path.join(out_a, "last.ckpt"), "rb").read()
    ck_b = open(os.path.join(out_b, "last.ckpt"), "rb").read()
    assert ck_a == ck_b


def test_lambda_zero_and_no_decay_freezes_vessel_head(tiny_dataset, tmp_path):
    cfg = smoke_config(tiny_dataset, str(tmp_path / "frozen"),
                       weight_decay=0.0,
                       loss=LossWeights(lam=0.0))
    init = SegmentationNetwork(cfg.model, dtype=np.float32, seed=cfg.seed)
    want = {k: p.data.copy() for k, p in init.param_dict().items()
            if k.startswith("vessel_head.")}
    assert want
    train(cfg)
    back = Checkpoint.load(os.path.join(cfg.out_dir, "last.ckpt"))
    for name, arr in want.items():
        assert np.array_equal(back.params[name], arr), name
    # sanity: lesion-side weights did move
    moved = [k for k in back.params
             if not k.startswith("vessel_head.")
             and not np.array_equal(back.params[k],
                                    init.param_dict()[k].data)]
    assert moved


def test_nan_loss_aborts_and_keeps_last_good_checkpoint(
        tiny_dataset, tmp_path, monkeypatch):
    calls = {"n": 0}
    real = tr.total_loss

    def poisoned(*args, **kwargs):
        calls["n"] += 1
        total, lesion, vessel = real(*args, **kwargs)
        if calls["n"] > 4:  # epoch 0 has 2 steps x 2 samples
            total = T.scale(total, float("nan"))
        return total, lesion, vessel

    monkeypatch.setattr(tr, "total_loss", poisoned)
    cfg = smoke_config(tiny_dataset, str(tmp_path / "nan"), epochs=3)
    with pytest.raises(TrainError, match="non-finite"):
        train(cfg)
    back = Checkpoint.load(os.path.join(cfg.out_dir, "last.ckpt"))
    assert back.epoch == 0  # the completed epoch survived
    lines = open(os.path.join(cfg.out_dir, "train_log.csv")).read().splitlines()
    assert len(lines) == 1 + 2  # header + the two finite epoch-0 steps


def test_accumulation_matches_mean_batch_gradient(tiny_dataset):
    from fundusseg.synth import Dataset
    data = Dataset(tiny_dataset)
    ids = data.splits["train"]
    model = ModelConfig(**SMALL_MODEL)
    weights = LossWeights()

    def load_input(i):
        image, labels, vessels = data.load(i)
        x = tr.preprocess(image, use_clahe=False, clahe_clip=2.0,
                          clahe_grid=8, dtype=np.float64)
        return x, labels.astype(np.int64), vessels.astype(np.int64)

    # route A: accumulate four 1/4-scaled single-sample backwards
    net_a = SegmentationNetwork(model, dtype=np.float64, seed=5)
    for i in ids:
        x, lab, ves = load_input(i)
        lesion, vessel = net_a.forward(x, training=True)
        T.scale(total_loss(lesion, lab, vessel, ves, weights)[0],
                1.0 / len(ids)).backward()

    # route B: one backward through the mean of four sample losses
    net_b = SegmentationNetwork(model, dtype=np.float64, seed=5)
    totals = []
    for i in ids:
        x, lab, ves = load_input(i)
        lesion, vessel = net_b.forward(x, training=True)
        totals.append(total_loss(lesion, lab, vessel, ves, weights)[0])
    mean = T.scale(totals[0] + totals[1] + totals[2] + totals[3],
                   1.0 / len(ids))
    mean.backward()

    for name, pa in net_a.param_dict().items():
        pb = net_b.param_dict()[name]
        if pa.grad is None and pb.grad is None:
            continue
        denom = max(np.abs(pa.grad).max(), np.abs(pb.grad).max(), 1e-30)
        rel = np.abs(pa.grad - pb.grad).max() / denom
        assert rel <= 1e-6, (name, rel)


# -- evaluation ------------------------------------------------------------------


def test_evaluate_matches_in_memory_model(tiny_dataset, tmp_path):
    from fundusseg.synth import Dataset
    data = Dataset(tiny_dataset)
    cfg = smoke_config(tiny_dataset, str(tmp_path / "ev"))
    net = SegmentationNetwork(cfg.model, dtype=np.float32, seed=3)
    rng = np.random.default_rng(0)
    img = (rng.random((3, 32, 32)) * 0.5).astype(np.float32)
    with T.no_grad():
        net.forward(img, training=True)  # perturb the running stats
    in_memory = evaluate_model(net, data, data.splits["test"],
                               use_clahe=False)

    path = str(tmp_path / "ev" / "m.ckpt")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Checkpoint(config=tr._checkpoint_config(cfg), epoch=0,
               params={k: p.data for k, p in net.param_dict().items()},
               state=net.state()).save(path)
    out_csv = str(tmp_path / "ev" / "summary.csv")
    reloaded = evaluate(path, tiny_dataset, split="test", out_csv=out_csv)
    assert reloaded == in_memory  # bitwise: same floats throughout
    rows = open(out_csv).read().splitlines()
    assert rows[0] == "class,auc_pr,auc_roc"
    assert len(rows) == 1 + 5  # EX, HE, MA, SE, vessel


def test_evaluate_rejects_mismatched_model_config(tiny_dataset, tmp_path):
    cfg = smoke_config(tiny_dataset, str(tmp_path / "mm"))
    train(cfg)
    ckpt = os.path.join(cfg.out_dir, "last.ckpt")
    other = ModelConfig(backbone_channels=(8, 16), feature_channels=16,
                        reduction=8)
    with pytest.raises(CheckpointError, match="incompatible"):
        evaluate(ckpt, tiny_dataset, split="test", model_config=other)
    evaluate(ckpt, tiny_dataset, split="test", model_config=cfg.model)


def test_evaluate_empty_split_rejected(tiny_dataset, tmp_path):
    cfg = smoke_config(tiny_dataset, str(tmp_path / "es"))
    train(cfg)
    with pytest.raises(ValueError, match="no samples"):
        evaluate(os.path.join(cfg.out_dir, "last.ckpt"), tiny_dataset,
                 split="nope")


# -- ablation --------------------------------------------------------------------


def test_ablate_emits_six_variant_rows(tiny_dataset, tmp_path):
    cfg = smoke_config(tiny_dataset, str(tmp_path / "ab"))
    out_csv = str(tmp_path / "ab" / "ablation.csv")
    rows = ablate(cfg, out_csv, seeds=(0,))
    assert [r["variant"] for r in rows] == [
        "baseline", "global", "concat", "global+cross", "global+self", "full"]
    lines = open(out_csv).read().splitlines()
    assert lines[0] == "variant,auc_pr_EX,auc_pr_HE,auc_pr_MA,auc_pr_SE"
    assert len(lines) == 7
    for line in lines[1:]:
        cells = line.split(",")
        assert len(cells) == 5
        for cell in cells[1:]:
            float(cell)  # parseable AUC_PR numbers
