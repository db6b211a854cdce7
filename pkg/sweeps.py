"""Ablation grids. Every cell is an independent `train` call on a derived config."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from backbone import FrozenBackbone
from config import settings
from errors import ConfigError, OutputError
from prompt_geometry import default_geometry
from schemas import (
    GeometryMode,
    NormalizationKind,
    NormalizationMode,
    PromptGeometry,
    RunConfig,
    TokenPromptConfig,
    TokenPromptMode,
)
from trainer import prepare_backbone, train

logger = logging.getLogger(__name__)

GRIDS = ("image-size", "normalization", "augmentation", "position")
DEFAULT_TOKEN_PROMPTS = 4


@dataclass
class SweepRow:
    label: str
    prompt_parameters: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float


@dataclass
class SweepResult:
    grid: str
    rows: List[SweepRow]
    table: str
    path: Optional[Path] = None


def _cell(config: RunConfig, label: str, root: Path, **updates) -> RunConfig:
    slug = label.replace(" ", "_").replace("/", "-").replace("+", "-")
    return config.model_copy(update={**updates, "name": f"{config.name}-{slug}", "output_dir": str(root / slug)})


def image_size_cells(config: RunConfig, root: Path, sizes: Sequence[int]) -> List[Tuple[str, RunConfig]]:
    native = config.backbone.native_size
    cells = []
    for size in sizes:
        if not 0 < size <= native:
            raise ConfigError("image sizes must lie in 1..native size", {"size": size, "native_size": native})
        geometry = PromptGeometry(outer_size=native, inner_size=size, channels=config.backbone.channels)
        label = f"k={size}"
        cells.append((label, _cell(config, label, root, geometry=geometry)))
    return cells


def normalization_cells(config: RunConfig, root: Path) -> List[Tuple[str, RunConfig]]:
    cells = []
    for kind in NormalizationKind:
        normalization = NormalizationMode(kind=kind, epsilon=config.update.normalization.epsilon)
        update = config.update.model_copy(update={"normalization": normalization})
        cells.append((kind.value, _cell(config, kind.value, root, update=update)))
    return cells


def augmentation_cells(config: RunConfig, root: Path) -> List[Tuple[str, RunConfig]]:
    base = config.augmentation
    variants = [
        ("none", dict(flip=False, randaug=False, cutmix=False)),
        ("flip", dict(flip=True, randaug=False, cutmix=False)),
        ("flip+randaug", dict(flip=True, randaug=True, cutmix=False)),
        ("flip+cutmix", dict(flip=True, randaug=False, cutmix=True)),
        ("flip+randaug+cutmix", dict(flip=True, randaug=True, cutmix=True)),
    ]
    return [(label, _cell(config, label, root, augmentation=base.model_copy(update=fields))) for label, fields in variants]


def position_cells(config: RunConfig, root: Path) -> List[Tuple[str, RunConfig]]:
    """Pixel prompts with and without positional embeddings, then the token-prompt variants."""
    spec = config.backbone
    num_prompts = config.token_prompts.num_prompts or DEFAULT_TOKEN_PROMPTS
    cells = []
    for label, mode in (
        ("small w/ PE", GeometryMode.SHRINK_PAD),
        ("big w/ PE", GeometryMode.OUTER_PAD_WITH_PE),
        ("big w/o PE", GeometryMode.OUTER_PAD_NO_PE),
    ):
        geometry = default_geometry(mode, spec.native_size, spec.patch_size, spec.channels)
        cells.append((label, _cell(config, label, root, geometry=geometry, token_prompts=TokenPromptConfig())))

    for label, mode in (("VPT", TokenPromptMode.VPT_SHALLOW), ("VPnT", TokenPromptMode.VP_N_T), ("DEEP", TokenPromptMode.DEEP)):
        position = (config.token_prompts.position_index if config.token_prompts.position_index is not None else 1) if mode == TokenPromptMode.VP_N_T else None
        tokens = TokenPromptConfig(
            mode=mode,
            num_prompts=num_prompts,
            position_index=position,
            init_std=config.token_prompts.init_std,
            seed=config.token_prompts.seed,
        )
        cells.append((label, _cell(config, label, root, geometry=None, token_prompts=tokens)))
    return cells


def format_table(grid: str, rows: List[SweepRow]) -> str:
    width = max([len("variant")] + [len(r.label) for r in rows])
    lines = [
        f"# {grid}",
        f"{'variant':<{width}}  {'params':>8}  {'train loss':>10}  {'train acc':>9}  {'test acc':>8}",
    ]
    for r in rows:
        lines.append(
            f"{r.label:<{width}}  {r.prompt_parameters:>8}  {r.train_loss:>10.5f}  {r.train_accuracy:>9.4f}  {r.test_accuracy:>8.4f}"
        )
    return "\n".join(lines) + "\n"


def run_cells(cells: List[Tuple[str, RunConfig]], backbone: Optional[FrozenBackbone] = None) -> List[SweepRow]:
    rows = []
    for label, cell in cells:
        logger.info("Sweep cell %s", label)
        result = train(cell, backbone=backbone)
        train_records = [r for r in result.records if r.split == "train"]
        test_records = [r for r in result.records if r.split == "test"]
        rows.append(
            SweepRow(
                label=label,
                prompt_parameters=result.classifier.prompt_parameters(),
                train_loss=train_records[-1].loss if train_records else float("nan"),
                train_accuracy=train_records[-1].accuracy if train_records else float("nan"),
                test_accuracy=test_records[-1].accuracy if test_records else float("nan"),
            )
        )
    return rows


def sweep(
    config: RunConfig,
    grid: str,
    sizes: Optional[Sequence[int]] = None,
    backbone: Optional[FrozenBackbone] = None,
) -> SweepResult:
    if grid not in GRIDS:
        raise ConfigError(f"unknown sweep grid: {grid}", {"known": list(GRIDS)})
    root = Path(config.output_dir) if config.output_dir else Path(settings.output_root) / config.name
    backbone = backbone if backbone is not None else prepare_backbone(config)
    # cells size their canvases from the architecture actually loaded
    config = config.model_copy(update={"backbone": backbone.spec.model_copy(update={"checkpoint": config.backbone.checkpoint})})
    builders: Dict[str, Callable[[], List[Tuple[str, RunConfig]]]] = {
        "image-size": lambda: image_size_cells(config, root, sizes or _default_sizes(config)),
        "normalization": lambda: normalization_cells(config, root),
        "augmentation": lambda: augmentation_cells(config, root),
        "position": lambda: position_cells(config, root),
    }
    rows = run_cells(builders[grid](), backbone)
    table = format_table(grid, rows)
    path = root / f"sweep-{grid}.txt"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(table)
    except OSError as e:
        raise OutputError(f"could not write {path}: {e}") from e
    return SweepResult(grid, rows, table, path)


def _default_sizes(config: RunConfig) -> List[int]:
    native = config.backbone.native_size
    return [native, native - 4, native - 8, native - 12]
