"""Command-line surface.

Subcommands: gen-data (synthesize a dataset), train, eval, ablate
(train every architecture variant over shared seeds), grad-check
(finite-difference verification), self-test (all built-in oracle
suites).  Configs are UTF-8 JSON files; any key, including nested ones,
can be overridden with ``--set key=value`` (dotted paths, JSON-parsed
values).  Exit code 0 on success, 1 with a diagnostic on stderr
otherwise; unknown flags exit 2 with usage text.
"""

from __future__ import annotations

import argparse
import json
import sys

from .checkpoint import CheckpointError
from .metrics import MetricError
from .synth import SceneConfig, generate_dataset
from .train import TrainConfig, TrainError, ablate, evaluate, train
from . import selftest

DEFAULT_SPLITS = {"train": 200, "val": 20, "test": 50}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text  # bare strings need no quotes


def _apply_sets(config: dict, sets: list[str]) -> dict:
    for item in sets:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValueError(f"--set expects key=value, got {item!r}")
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"--set {key!r}: {part!r} is not a section")
        node[parts[-1]] = _parse_value(value)
    return config


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        config = json.load(fh)
    if not isinstance(config, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fundusseg",
        description="Dual-branch lesion/vessel segmentation on synthetic "
                    "fundus scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a dataset")
    p.add_argument("--config", help="JSON with scene/splits/seed sections")
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--set", action="append", default=[], dest="sets",
                   metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON of training-config fields")
    p.add_argument("--out", help="run directory (overrides out_dir)")
    p.add_argument("--data", help="dataset root (overrides data_root)")
    p.add_argument("--set", action="append", default=[], dest="sets",
                   metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out-csv", required=True,
                   help="where to write class,auc_pr,auc_roc")
    p.add_argument("--split", default="test")

    p = sub.add_parser("ablate",
                       help="train all architecture variants, shared seeds")
    p.add_argument("--config", help="JSON of training-config fields")
    p.add_argument("--out", required=True, help="comparison CSV path")
    p.add_argument("--data", help="dataset root (overrides data_root)")
    p.add_argument("--seeds", default="0", help="comma-separated seed list")
    p.add_argument("--set", action="append", default=[], dest="sets",
                   metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("grad-check",
                       help="finite-difference gradient verification")
    p.add_argument("--sample", type=int, default=2,
                   help="elements probed per tensor in the model check")

    sub.add_parser("self-test", help="run every built-in oracle suite")
    return parser


def _cmd_gen_data(args) -> int:
    config = _apply_sets(_load_json(args.config), args.sets)
    scene = SceneConfig.from_dict(config.get("scene", {})) \
        if config.get("scene") else SceneConfig()
    splits = {k: int(v) for k, v in config.get("splits", DEFAULT_SPLITS).items()}
    seed = int(config.get("seed", 0))
    manifest = generate_dataset(args.out, scene, splits, seed)
    counts = ", ".join(f"{k}={len(v)}" for k, v in manifest["splits"].items())
    print(f"wrote {args.out}: {counts} (size {scene.size}, seed {seed})")
    return 0


def _train_config(args, *, out_is_run_dir: bool = True) -> TrainConfig:
    config = _apply_sets(_load_json(args.config), args.sets)
    if out_is_run_dir and args.out:
        config["out_dir"] = args.out
    if getattr(args, "data", None):
        config["data_root"] = args.data
    return TrainConfig.from_dict(config)


def _cmd_train(args) -> int:
    summary = train(_train_config(args))
    best = summary.get("best_score")
    line = f"trained {summary['epochs_run']} epochs -> {summary['out_dir']}"
    if best is not None:
        line += f" (best mean lesion AUC_PR {best:.4f} @ epoch {summary['best_epoch']})"
    print(line)
    return 0


def _cmd_eval(args) -> int:
    aucs = evaluate(args.checkpoint, args.data, split=args.split,
                    out_csv=args.out_csv)
    for name, (pr, roc) in aucs.items():
        print(f"{name}: auc_pr={pr:.4f} auc_roc={roc:.4f}")
    print(f"wrote {args.out_csv}")
    return 0


def _cmd_ablate(args) -> int:
    seeds = tuple(int(s) for s in args.seeds.split(",") if s)
    if not seeds:
        raise ValueError("--seeds must name at least one seed")
    rows = ablate(_train_config(args, out_is_run_dir=False), args.out,
                  seeds=seeds)
    width = max(len(r["variant"]) for r in rows)
    for row in rows:
        cells = "  ".join(f"{k}={v:.4f}" for k, v in row.items()
                          if k != "variant")
        print(f"{row['variant']:<{width}}  {cells}")
    print(f"wrote {args.out} ({len(rows)} variants x {len(seeds)} seeds)")
    return 0


def _cmd_grad_check(args) -> int:
    ok = selftest.run_suites((
        ("tensor-gradients", selftest.suite_tensor_gradients),
        ("model-gradients",
         lambda: selftest.suite_model_gradients(sample_per_tensor=args.sample)),
    ))
    return 0 if ok else 1


def _cmd_self_test(_args) -> int:
    return 0 if selftest.run_suites() else 1


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "grad-check": _cmd_grad_check,
    "self-test": _cmd_self_test,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (TrainError, CheckpointError, MetricError, ValueError, KeyError,
            TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
