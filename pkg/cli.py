"""Command-line harness.

    python cli.py train --config run.yaml --epochs 5
    python cli.py eval --checkpoint runs/evp/checkpoints/final.npz
    python cli.py sweep --config run.yaml --image-size 32,28,24,20

A YAML file provides the run configuration; flags and `--set a.b=value`
overrides win over it.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from pydantic import ValidationError

from backbone import build_backbone, save_backbone
from config import configure_logging, settings
from errors import ConfigError, EVPError
from image_data import normalize
from label_mapping import build_mapping, save_mapping
from prompt_geometry import default_geometry, export_prompt_image, save_prompt
from schemas import (
    BackboneSpec,
    CollisionPolicy,
    CorruptionKind,
    CorruptionSpec,
    DatasetSource,
    GeometryMode,
    Interpolation,
    MappingMode,
    MetricsRecord,
    NormalizationKind,
    RunConfig,
    Schedule,
    TokenPromptMode,
)
from sweeps import GRIDS, sweep
from trainer import (
    BACKBONE_FILE,
    MAPPING_FILE,
    evaluate_checkpoint,
    linear_probe,
    load_checkpoint,
    load_data,
    prepare_backbone,
    pretrain_backbone,
    run_directory,
    train,
    zero_shot,
)

logger = logging.getLogger(__name__)

NO_GEOMETRY = "NONE"

# flag dest -> dotted RunConfig path
FLAG_PATHS = {
    "name": "name",
    "output_dir": "output_dir",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "eval_batch_size": "eval_batch_size",
    "seed": "seed",
    "lr": "update.learning_rate",
    "schedule": "update.schedule",
    "normalization": "update.normalization.kind",
    "outer_size": "geometry.outer_size",
    "inner_size": "geometry.inner_size",
    "interpolation": "geometry.interpolation",
    "token_mode": "token_prompts.mode",
    "num_prompts": "token_prompts.num_prompts",
    "position_index": "token_prompts.position_index",
    "mapping": "mapping",
    "collision_policy": "collision_policy",
    "flip": "augmentation.flip",
    "randaug": "augmentation.randaug",
    "cutmix": "augmentation.cutmix",
    "dataset_source": "dataset.source",
    "dataset_path": "dataset.path",
    "num_classes": "dataset.num_classes",
    "subset_fraction": "dataset.subset_fraction",
    "backbone_checkpoint": "backbone.checkpoint",
}


def set_path(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[keys[-1]] = value


def parse_corruption(text: str) -> Dict[str, Any]:
    kind, _, severity = text.partition(":")
    try:
        return {"kind": CorruptionKind(kind.upper()).value, "severity": int(severity or 1)}
    except ValueError:
        raise ConfigError(f"corruption must look like KIND:SEVERITY, got {text!r}", {"kinds": [k.value for k in CorruptionKind]})


def parse_sizes(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"image sizes must be comma-separated integers, got {text!r}")


def read_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(f"config file not found: {config_path}")
    try:
        raw = yaml.safe_load(config_path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {config_path} is not valid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {config_path} must hold a mapping")
    return raw


def fill_geometry(raw: Dict[str, Any], mode: Optional[str]) -> None:
    """Pick canvas sizes for a geometry mode when the config leaves them out."""
    if mode == NO_GEOMETRY:
        raw["geometry"] = None
        return
    geometry = raw.get("geometry")
    if mode is not None:
        geometry = dict(geometry or {}, mode=mode)
    if not geometry:
        return
    if "outer_size" not in geometry or "inner_size" not in geometry:
        try:
            spec = BackboneSpec.model_validate(raw.get("backbone") or {})
        except ValidationError as e:
            raise ConfigError("invalid backbone configuration", {"errors": _errors(e)}) from e
        defaults = default_geometry(
            geometry.get("mode", GeometryMode.SHRINK_PAD.value), spec.native_size, spec.patch_size, spec.channels
        ).model_dump(mode="json")
        geometry = {**defaults, **{k: v for k, v in geometry.items() if v is not None}}
    raw["geometry"] = geometry


def _errors(error: ValidationError) -> List[str]:
    return [f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in error.errors()]


def load_run_config(args: argparse.Namespace) -> RunConfig:
    raw = read_config_file(getattr(args, "config", None))
    for dest, dotted in FLAG_PATHS.items():
        value = getattr(args, dest, None)
        if value is not None:
            set_path(raw, dotted, value)
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        set_path(raw, key.strip(), yaml.safe_load(value))
    if getattr(args, "corruption", None):
        set_path(raw, "dataset.corruption", parse_corruption(args.corruption))
    fill_geometry(raw, getattr(args, "geometry_mode", None))

    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError("invalid run configuration", {"errors": _errors(e)}) from e


def print_record(record: MetricsRecord) -> None:
    print(json.dumps(record.model_dump(exclude={"wall_time"})))


# Subcommands

def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    result = train(config, progress=args.progress)
    tests = [r for r in result.records if r.split == "test"]
    print(f"✅ Run {config.name} written to {result.run_dir}")
    if tests:
        print(f"📊 Final test accuracy {tests[-1].accuracy:.4f} (best epoch {result.best_epoch})")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    corruption = None
    if args.eval_corruption:
        try:
            corruption = CorruptionSpec(**parse_corruption(args.eval_corruption))
        except ValidationError as e:
            raise ConfigError("invalid corruption", {"errors": _errors(e)}) from e
    if args.zero_shot:
        print_record(zero_shot(load_run_config(args)))
        return 0
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint (or --zero-shot)")
    print_record(evaluate_checkpoint(args.checkpoint, split=args.split, corruption=corruption))
    return 0


def cmd_map_labels(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    backbone = prepare_backbone(config, args.progress)
    train_data, _ = load_data(config, backbone)
    mapping = build_mapping(
        backbone,
        train_data.images,
        train_data.labels,
        train_data.num_classes,
        policy=config.collision_policy,
        preprocess=lambda images: normalize(images, config.dataset.mean, config.dataset.std),
        batch_size=config.eval_batch_size,
    )
    output = Path(args.output) if args.output else run_directory(config) / MAPPING_FILE
    save_mapping(mapping, output)
    print(output.read_text(), end="")
    print(f"🔗 {len(mapping.collision_log)} collisions, mapping written to {output}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    sizes = parse_sizes(args.image_size) if args.image_size else None
    grid = "image-size" if sizes and args.grid is None else (args.grid or "image-size")
    result = sweep(config, grid, sizes=sizes)
    print(result.table, end="")
    return 0


def cmd_export_prompt(args: argparse.Namespace) -> int:
    classifier, config, _ = load_checkpoint(args.checkpoint)
    if classifier.prompt is None:
        raise ConfigError("checkpoint has no pixel prompt to export", {"checkpoint": args.checkpoint})
    path = export_prompt_image(classifier.prompt, args.output, config.dataset.mean, config.dataset.std)
    print(f"🖼️ Prompt image written to {path}")
    if args.arrays:
        print(f"💾 Prompt arrays written to {save_prompt(classifier.prompt, args.arrays)}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    if config.pretrain is not None:
        # the run's own source task, never a previously saved checkpoint
        fresh = config.backbone.model_copy(update={"checkpoint": None})
        pretrained = prepare_backbone(config.model_copy(update={"backbone": fresh}), args.progress)
    else:
        backbone = build_backbone(config.backbone)
        train_data, _ = load_data(config, backbone)
        pretrained = pretrain_backbone(
            config.backbone,
            train_data,
            epochs=config.epochs,
            learning_rate=config.update.learning_rate,
            batch_size=config.batch_size,
            seed=config.seed,
            mean=config.dataset.mean,
            std=config.dataset.std,
            progress=args.progress,
        )
    output = Path(args.output) if args.output else run_directory(config) / BACKBONE_FILE
    save_backbone(pretrained, output)
    print(f"💾 Backbone written to {output} (checksum {pretrained.checksum()[:12]})")
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    backbone = prepare_backbone(config, args.progress)
    train_data, test_data = load_data(config, backbone)
    result = linear_probe(
        backbone,
        train_data,
        test_data,
        config.dataset.mean,
        config.dataset.std,
        epochs=args.probe_epochs,
        learning_rate=args.probe_lr,
        seed=config.seed,
    )
    print(json.dumps({"train_accuracy": result.train_accuracy, "test_accuracy": result.test_accuracy, "parameters": result.parameters}))
    return 0


def add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. update.learning_rate=0.5")
    parser.add_argument("--name")
    parser.add_argument("--output-dir")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--eval-batch-size", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--lr", type=float, help="learning rate")
    parser.add_argument("--schedule", choices=[s.value for s in Schedule])
    parser.add_argument("--normalization", choices=[k.value for k in NormalizationKind])
    parser.add_argument("--geometry-mode", choices=[m.value for m in GeometryMode] + [NO_GEOMETRY])
    parser.add_argument("--outer-size", type=int)
    parser.add_argument("--inner-size", type=int)
    parser.add_argument("--interpolation", choices=[i.value for i in Interpolation])
    parser.add_argument("--token-mode", choices=[m.value for m in TokenPromptMode])
    parser.add_argument("--num-prompts", type=int)
    parser.add_argument("--position-index", type=int)
    parser.add_argument("--mapping", choices=[m.value for m in MappingMode])
    parser.add_argument("--collision-policy", choices=[p.value for p in CollisionPolicy])
    parser.add_argument("--flip", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--randaug", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--cutmix", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--dataset-source", choices=[s.value for s in DatasetSource])
    parser.add_argument("--dataset-path")
    parser.add_argument("--num-classes", type=int)
    parser.add_argument("--subset-fraction", type=float)
    parser.add_argument("--corruption", metavar="KIND:SEVERITY", help="evaluation-time corruption")
    parser.add_argument("--backbone-checkpoint", help="backbone file written by `pretrain`")
    parser.add_argument("--progress", action="store_true", help="show batch progress bars")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evp", description="Pixel and token prompt learning on a frozen toy ViT")
    parser.add_argument("--log-level", default=None, help=f"defaults to EVP_LOG_LEVEL ({settings.log_level})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="learn a prompt")
    add_run_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the zero-shot model")
    add_run_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--zero-shot", action="store_true", help="no learned parameters; uses the run flags")
    p.add_argument("--eval-corruption", metavar="KIND:SEVERITY", help="override the checkpoint's corruption")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("map-labels", help="build the frequency label mapping")
    add_run_flags(p)
    p.add_argument("--output", help="mapping table path")
    p.set_defaults(handler=cmd_map_labels)

    p = sub.add_parser("sweep", help="run an ablation grid")
    add_run_flags(p)
    p.add_argument("--grid", choices=list(GRIDS))
    p.add_argument("--image-size", help="comma-separated inner sizes, e.g. 32,28,24,20")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("export-prompt", help="write the learned prompt as an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True, help="PNG path")
    p.add_argument("--arrays", help="also write the prompt arrays here")
    p.set_defaults(handler=cmd_export_prompt)

    p = sub.add_parser("pretrain", help="pretrain a toy backbone on the configured dataset")
    add_run_flags(p)
    p.add_argument("--output", help="backbone file path")
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on frozen features")
    add_run_flags(p)
    p.add_argument("--probe-epochs", type=int, default=200)
    p.add_argument("--probe-lr", type=float, default=1e-2)
    p.set_defaults(handler=cmd_probe)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except EVPError as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
