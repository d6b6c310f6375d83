"""Deterministic SGD training, evaluation, and ablation runs.

The training loop is single-threaded and seed-deterministic: sample order,
augmentation draws, and parameter updates depend only on (seed, config),
so two identical runs produce bitwise-identical loss logs and checkpoints.
Batches are gradient accumulations over single-sample graphs — each
sample's loss is scaled by 1/B before backpropagation, which matches the
gradient of a B-sample mean loss.  Normalization statistics therefore come
from one image per forward pass, a deliberate consequence of the
batch-free tensor core.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError, config_hash
from .imgproc import ClaheParams, augment, clahe
from .loss import LossWeights, total_loss
from .metrics import write_summary_csv, per_class_aucs
from .network import ModelConfig, SegmentationNetwork, VARIANTS
from .synth import CLASS_NAMES, Dataset

LESION_NAMES = tuple(CLASS_NAMES[1:])          # EX, HE, MA, SE
VESSEL_NAMES = ("vessel_background", "vessel")


class TrainError(RuntimeError):
    """Raised when a training run cannot proceed (e.g. loss went NaN)."""


@dataclass
class TrainConfig:
    data_root: str = "data"
    out_dir: str = "run"
    epochs: int = 250
    batch: int = 16                 # gradient-accumulation count per step
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    step_epochs: int = 120          # decay the rate every this many epochs
    step_gamma: float = 0.1         # ... by this factor
    seed: int = 0
    crop: int = 64                  # training crop, pixels (square)
    scale_min: float = 0.8          # augmentation rescale range
    scale_max: float = 1.2
    use_clahe: bool = True
    clahe_clip: float = 2.0
    clahe_grid: int = 8
    val_every: int = 1              # epochs between validation passes
    val_limit: int = 0              # cap on validation samples; 0 = all
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def validate(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.step_epochs < 1:
            raise ValueError(f"step_epochs must be >= 1, got {self.step_epochs}")
        if self.step_gamma <= 0:
            raise ValueError(f"step_gamma must be positive, got {self.step_gamma}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.crop < 2 or self.crop % 2:
            raise ValueError(f"crop must be even and >= 2, got {self.crop}")
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError(f"need 0 < scale_min <= scale_max, got "
                             f"({self.scale_min}, {self.scale_max})")
        if self.val_every < 1:
            raise ValueError(f"val_every must be >= 1, got {self.val_every}")
        if self.val_limit < 0:
            raise ValueError(f"val_limit must be >= 0, got {self.val_limit}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        self.model.validate()
        self.loss.validate()
        return self

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "data_root", "out_dir", "epochs", "batch", "lr0", "momentum",
            "weight_decay", "step_epochs", "step_gamma", "seed", "crop",
            "scale_min", "scale_max", "use_clahe", "clahe_clip", "clahe_grid",
            "val_every", "val_limit", "dtype")}
        d["model"] = self.model.to_dict()
        d["loss"] = {"lesion": list(self.loss.lesion),
                     "vessel": list(self.loss.vessel), "lam": self.loss.lam}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "loss" in d:
            ld = d["loss"]
            d["loss"] = LossWeights(lesion=tuple(ld["lesion"]),
                                    vessel=tuple(ld["vessel"]),
                                    lam=ld["lam"])
        return cls(**d).validate()


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step-decayed learning rate: lr0 * gamma^(epoch // step_epochs)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.step_gamma ** (epoch // cfg.step_epochs)


def sgd_step(params, velocity: dict, *, lr: float, momentum: float,
             weight_decay: float) -> None:
    """One SGD-with-momentum update, in place.

    For each parameter: g' = g + wd*p; v <- momentum*v + g'; p <- p - lr*v.
    A missing gradient counts as zero (weight decay still applies).
    ``velocity`` maps parameter names to momentum buffers and is created
    lazily at zero.
    """
    for p in params:
        v = velocity.get(p.name)
        if v is None:
            v = np.zeros_like(p.data)
            velocity[p.name] = v
        if v.shape != p.data.shape:
            raise ValueError(f"momentum buffer {p.name!r} has shape {v.shape}, "
                             f"parameter has {p.data.shape}")
        g = p.grad if p.grad is not None else 0.0
        gp = g + weight_decay * p.data
        v *= momentum
        v += gp
        p.data -= lr * v


# -- preprocessing -------------------------------------------------------------

def preprocess(image_u8: np.ndarray, *, use_clahe: bool, clahe_clip: float,
               clahe_grid: int, dtype) -> np.ndarray:
    """(H,W,3) uint8 RGB -> (3,H,W) float input in [0, 1]."""
    if use_clahe:
        image_u8 = clahe(image_u8, ClaheParams(clahe_clip, clahe_grid))
    x = image_u8.astype(dtype).transpose(2, 0, 1)
    return np.ascontiguousarray(x / 255.0)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """(K,H,W) logits -> (K,H,W) float64 class probabilities."""
    z = logits.astype(np.float64)
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


# -- evaluation ----------------------------------------------------------------

def evaluate_model(net: SegmentationNetwork, data: Dataset, indices,
                   *, use_clahe: bool, clahe_clip: float = 2.0,
                   clahe_grid: int = 8) -> dict[str, tuple[float, float]]:
    """Pooled (AUC_PR, AUC_ROC) per lesion class and for the vessel class,
    from eval-mode forwards over the given sample indices."""
    lesion_probs, lesion_labels = [], []
    vessel_probs, vessel_labels = [], []
    for i in indices:
        image, labels, vessels = data.load(i)
        x = preprocess(image, use_clahe=use_clahe, clahe_clip=clahe_clip,
                       clahe_grid=clahe_grid, dtype=net.dtype)
        with T.no_grad():
            lesion, vessel = net.forward(x, training=False)
        lesion_probs.append(softmax_probs(lesion.data))
        lesion_labels.append(labels.astype(np.int64))
        vessel_probs.append(softmax_probs(vessel.data))
        vessel_labels.append(vessels.astype(np.int64))
    aucs = per_class_aucs(lesion_probs, lesion_labels, CLASS_NAMES, skip=(0,))
    aucs.update(per_class_aucs(vessel_probs, vessel_labels, VESSEL_NAMES,
                               skip=(0,)))
    return aucs


def mean_lesion_auc_pr(aucs: dict[str, tuple[float, float]]) -> float:
    """Mean AUC_PR over the four lesion classes, ignoring undefined ones."""
    vals = [aucs[name][0] for name in LESION_NAMES if name in aucs]
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate(checkpoint, data, split: str = "test", *, out_csv: str | None = None,
             model_config: ModelConfig | None = None, indices=None,
             ) -> dict[str, tuple[float, float]]:
    """Evaluate a checkpoint on a dataset split and optionally write the
    `class,auc_pr,auc_roc` summary CSV.

    ``checkpoint`` is a Checkpoint or a path; ``data`` a Dataset or a root
    directory.  If ``model_config`` is given, its hash must match the
    checkpoint's stored model config.
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(os.fspath(checkpoint))
    try:
        model_dict = checkpoint.config["model"]
        pre = checkpoint.config["preprocess"]
    except (TypeError, KeyError) as exc:
        raise CheckpointError(f"checkpoint config missing section: {exc}") from exc
    if model_config is not None and \
            config_hash(model_config.to_dict()) != config_hash(model_dict):
        raise CheckpointError(
            "checkpoint is incompatible with the requested model: config "
            f"hash {config_hash(model_dict)[:12]} != "
            f"{config_hash(model_config.to_dict())[:12]}")
    net = SegmentationNetwork(ModelConfig.from_dict(model_dict),
                              dtype=np.float32, seed=0)
    for name, p in net.param_dict().items():
        if name not in checkpoint.params:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        arr = checkpoint.params[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, "
                                  f"model expects {p.data.shape}")
        p.data = arr
    net.load_state(checkpoint.state)

    if not isinstance(data, Dataset):
        data = Dataset(data)
    if indices is None:
        indices = data.splits.get(split, [])
    if not len(indices):
        raise ValueError(f"split {split!r} has no samples")
    aucs = evaluate_model(net, data, indices, use_clahe=pre["use_clahe"],
                          clahe_clip=pre["clahe_clip"],
                          clahe_grid=pre["clahe_grid"])
    if out_csv is not None:
        write_summary_csv(out_csv, aucs)
    return aucs


# -- training ------------------------------------------------------------------

def _checkpoint_config(cfg: TrainConfig) -> dict:
    return {"model": cfg.model.to_dict(),
            "preprocess": {"use_clahe": cfg.use_clahe,
                           "clahe_clip": cfg.clahe_clip,
                           "clahe_grid": cfg.clahe_grid}}


def train(cfg: TrainConfig) -> dict:
    """Run the full training loop; returns a summary dict.

    Writes under cfg.out_dir: config.json, train_log.csv
    (epoch,step,loss,lr), per-epoch val_<epoch>.csv (class,auc_pr,auc_roc),
    last.ckpt every epoch and best.ckpt whenever the mean lesion AUC_PR on
    the validation split improves.  A NaN loss aborts the run with the
    last-good checkpoint retained.
    """
    cfg.validate()
    dtype = cfg.np_dtype
    data = Dataset(cfg.data_root)
    train_ids = data.splits.get("train", [])
    if not train_ids:
        raise TrainError(f"dataset at {cfg.data_root} has no train split")
    val_ids = data.splits.get("val", [])
    if cfg.val_limit:
        val_ids = val_ids[:cfg.val_limit]

    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    net = SegmentationNetwork(cfg.model, dtype=dtype, seed=cfg.seed)
    velocity: dict[str, np.ndarray] = {}
    ckpt_config = _checkpoint_config(cfg)
    last_path = os.path.join(cfg.out_dir, "last.ckpt")
    best_path = os.path.join(cfg.out_dir, "best.ckpt")
    log_rows: list[str] = ["epoch,step,loss,lr"]
    best_score = -math.inf
    summary: dict = {"out_dir": cfg.out_dir, "epochs_run": 0,
                     "best_score": None, "aborted": None}

    def flush_log():
        tmp = os.path.join(cfg.out_dir, "train_log.csv.tmp")
        with open(tmp, "w") as fh:
            fh.write("\n".join(log_rows) + "\n")
        os.replace(tmp, os.path.join(cfg.out_dir, "train_log.csv"))

    def save(path, epoch):
        Checkpoint(config=ckpt_config, epoch=epoch,
                   params={k: p.data for k, p in net.param_dict().items()},
                   momentum=dict(velocity), state=net.state()).save(path)

    n = len(train_ids)
    batch = min(cfg.batch, n)
    steps = n // batch
    try:
        for epoch in range(cfg.epochs):
            rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 7, epoch]))
            order = rng.permutation(n)
            lr = lr_at(epoch, cfg)
            for step in range(steps):
                chunk = order[step * batch:(step + 1) * batch]
                net.zero_grad()
                loss_sum = 0.0
                for j in chunk:
                    image, labels, vessels = data.load(train_ids[j])
                    img, (lab, ves) = augment(
                        image, [labels, vessels.astype(np.uint8)],
                        (cfg.crop, cfg.crop), rng,
                        (cfg.scale_min, cfg.scale_max))
                    x = preprocess(img, use_clahe=cfg.use_clahe,
                                   clahe_clip=cfg.clahe_clip,
                                   clahe_grid=cfg.clahe_grid, dtype=dtype)
                    lesion, vessel = net.forward(x, training=True)
                    total = total_loss(lesion, lab.astype(np.int64), vessel,
                                       ves.astype(np.int64), cfg.loss)[0]
                    loss_sum += float(total.data)
                    T.scale(total, 1.0 / len(chunk)).backward()
                step_loss = loss_sum / len(chunk)
                if not math.isfinite(step_loss):
                    summary["aborted"] = f"NaN loss at epoch {epoch} step {step}"
                    raise TrainError(
                        f"loss became non-finite at epoch {epoch} step {step}; "
                        f"last-good checkpoint retained at {last_path}")
                sgd_step(net.params(), velocity, lr=lr,
                         momentum=cfg.momentum,
                         weight_decay=cfg.weight_decay)
                log_rows.append(f"{epoch},{step},{step_loss!r},{lr!r}")

            summary["epochs_run"] = epoch + 1
            if val_ids and (epoch % cfg.val_every == 0
                            or epoch == cfg.epochs - 1):
                aucs = evaluate_model(net, data, val_ids,
                                      use_clahe=cfg.use_clahe,
                                      clahe_clip=cfg.clahe_clip,
                                      clahe_grid=cfg.clahe_grid)
                write_summary_csv(
                    os.path.join(cfg.out_dir, f"val_{epoch:04d}.csv"), aucs)
                score = mean_lesion_auc_pr(aucs)
                summary["val_aucs"] = aucs
                if not math.isnan(score) and score > best_score:
                    best_score = score
                    summary["best_score"] = score
                    summary["best_epoch"] = epoch
                    save(best_path, epoch)
            save(last_path, epoch)
    finally:
        flush_log()
    return summary


# -- ablation ------------------------------------------------------------------

def ablate(cfg: TrainConfig, out_csv: str, *, seeds=(0,)) -> list[dict]:
    """Train every architecture variant with shared seeds and data, then
    report test-split lesion AUC_PR per variant (averaged over seeds).

    Writes a CSV with one row per variant and one AUC_PR column per lesion
    class.  Returns the rows as dicts.
    """
    cfg.validate()
    rows = []
    for variant, overrides in VARIANTS.items():
        per_class = {name: [] for name in LESION_NAMES}
        for seed in seeds:
            run_cfg = replace(cfg, model=replace(cfg.model, **overrides),
                              seed=seed,
                              out_dir=os.path.join(cfg.out_dir,
                                                   f"{variant}_seed{seed}"))
            train(run_cfg)
            best = os.path.join(run_cfg.out_dir, "best.ckpt")
            last = os.path.join(run_cfg.out_dir, "last.ckpt")
            ckpt = best if os.path.exists(best) else last
            aucs = evaluate(ckpt, cfg.data_root, split="test")
            for name in LESION_NAMES:
                per_class[name].append(aucs[name][0])
        row = {"variant": variant}
        row.update({name: float(np.mean(per_class[name]))
                    for name in LESION_NAMES})
        rows.append(row)

    tmp = f"{out_csv}.tmp"
    with open(tmp, "w") as fh:
        fh.write("variant," + ",".join(f"auc_pr_{n}" for n in LESION_NAMES)
                 + "\n")
        for row in rows:
            fh.write(row["variant"] + ","
                     + ",".join(repr(row[n]) for n in LESION_NAMES) + "\n")
    os.replace(tmp, out_csv)
    return rows
