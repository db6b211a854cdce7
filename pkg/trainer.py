"""Training and evaluation around a frozen backbone.

Per batch: augment raw images -> normalize -> compose with the prompt ->
frozen forward -> input gradient -> one optimizer step. Metrics go to
`metrics.jsonl` (deterministic) and `timings.jsonl` (wall times).
"""
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

import storage
from backbone import FrozenBackbone, GradientResult, TokenPrompts, build_backbone, load_backbone, save_backbone
from config import settings
from corruptions import apply_corruption
from diversity import MixedTargets, apply_policy
from errors import ConfigError, DatasetError, GeometryError, IntegrityError, OutputError
from image_data import ImageDataset, load_split, normalize, subsample
from label_mapping import LabelMapping, arbitrary_mapping, build_mapping, remap_logits, save_mapping
from optimizer import PromptOptimizer
from prompt_geometry import PromptTemplate, compose, position_mode_for
from schemas import (
    OUTER_PAD_MODES,
    BackboneSpec,
    CorruptionSpec,
    HeadKind,
    MappingMode,
    MetricsRecord,
    PositionMode,
    PromptGeometry,
    RunConfig,
    TokenPromptMode,
)

logger = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoints"
FINAL_CHECKPOINT = "final.npz"
BEST_CHECKPOINT = "best.npz"
METRICS_FILE = "metrics.jsonl"
TIMINGS_FILE = "timings.jsonl"
SUMMARY_FILE = "summary.txt"
MANIFEST_FILE = "manifest.json"
BACKBONE_FILE = "backbone.npz"
MAPPING_FILE = "label_mapping.tsv"
METRIC_FIELDS = ("epoch", "split", "loss", "accuracy", "prompt_parameters")


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(settings.num_threads)


def epoch_permutation(size: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(size)


def check_geometry(geometry: PromptGeometry, spec: BackboneSpec) -> None:
    """The composed canvas must be something the backbone can patchify."""
    if geometry.channels != spec.channels:
        raise GeometryError("prompt channels differ from the backbone's", {"prompt": geometry.channels, "backbone": spec.channels})
    if geometry.mode in OUTER_PAD_MODES:
        border = geometry.outer_size - geometry.inner_size
        if geometry.inner_size != spec.native_size:
            raise GeometryError("outer padding keeps the image at native size", {"inner_size": geometry.inner_size, "native_size": spec.native_size})
        if border % (2 * spec.patch_size) != 0:
            raise GeometryError("outer border must be whole patches on each side", {"border": border, "patch_size": spec.patch_size})
    elif geometry.outer_size != spec.native_size:
        raise GeometryError("composed size must equal the backbone's native size", {"outer_size": geometry.outer_size, "native_size": spec.native_size})


class PromptedClassifier:
    """Frozen backbone plus whatever was learned for it: pixel prompt, token prompts, label mapping."""

    def __init__(
        self,
        backbone: FrozenBackbone,
        prompt: Optional[PromptTemplate] = None,
        token_prompts: Optional[TokenPrompts] = None,
        mapping: Optional[LabelMapping] = None,
        mean: Sequence[float] = (0.5, 0.5, 0.5),
        std: Sequence[float] = (0.25, 0.25, 0.25),
    ):
        if prompt is not None:
            check_geometry(prompt.geometry, backbone.spec)
        self.backbone = backbone
        self.prompt = prompt
        self.token_prompts = token_prompts
        self.mapping = mapping
        self.mean = tuple(mean)
        self.std = tuple(std)
        self.position_mode = position_mode_for(prompt.geometry) if prompt is not None else PositionMode.NATIVE
        self.head_index = mapping.index_tensor() if mapping is not None else None

    @property
    def native_size(self) -> int:
        return self.backbone.spec.native_size

    @property
    def num_outputs(self) -> int:
        return self.mapping.num_downstream if self.mapping is not None else self.backbone.num_classes

    def prompt_parameters(self) -> int:
        count = self.prompt.parameter_count() if self.prompt is not None else 0
        if self.token_prompts is not None and self.token_prompts.mode != TokenPromptMode.NONE:
            count += self.token_prompts.parameter_count()
        return count

    @torch.no_grad()
    def prepare(self, raw: torch.Tensor) -> torch.Tensor:
        inputs = normalize(raw, self.mean, self.std)
        return compose(inputs, self.prompt) if self.prompt is not None else inputs

    @torch.no_grad()
    def logits(self, raw: torch.Tensor) -> torch.Tensor:
        out = self.backbone(self.prepare(raw), self.token_prompts, self.position_mode)
        return remap_logits(out, self.mapping) if self.mapping is not None else out

    def probabilities(self, raw: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(raw), dim=-1)

    def gradient(self, raw: torch.Tensor, targets: Union[torch.Tensor, MixedTargets]) -> GradientResult:
        return self.backbone.input_gradient(self.prepare(raw), targets, self.token_prompts, self.position_mode, self.head_index)


@dataclass
class TrainResult:
    prompt: Optional[PromptTemplate]
    token_prompts: Optional[TokenPrompts]
    records: List[MetricsRecord]
    checkpoints: Dict[str, Path]
    run_dir: Path
    classifier: PromptedClassifier
    backbone_checksum: str
    mapping: Optional[LabelMapping] = None
    best_epoch: Optional[int] = None


@dataclass
class ProbeResult:
    train_accuracy: float
    test_accuracy: float
    parameters: int
    losses: List[float] = field(default_factory=list)


class MetricsWriter:
    """Append-only metrics stream. Wall time lives in its own file so metrics bytes stay reproducible."""

    def __init__(self, run_dir: Path):
        self.metrics_path = run_dir / METRICS_FILE
        self.timings_path = run_dir / TIMINGS_FILE
        self.summary_path = run_dir / SUMMARY_FILE
        try:
            self.metrics_path.write_text("")
            self.timings_path.write_text("")
        except OSError as e:
            raise OutputError(f"could not create metrics files in {run_dir}: {e}") from e

    @staticmethod
    def _append(path: Path, payload: dict) -> None:
        try:
            with path.open("a") as f:
                f.write(json.dumps(payload) + "\n")
        except OSError as e:
            raise OutputError(f"could not append to {path}: {e}") from e

    def write(self, record: MetricsRecord) -> None:
        self._append(self.metrics_path, {name: getattr(record, name) for name in METRIC_FIELDS})
        self._append(self.timings_path, {"epoch": record.epoch, "split": record.split, "wall_time": record.wall_time})

    def write_summary(self, config: RunConfig, records: List[MetricsRecord], best_epoch: Optional[int], prompt_parameters: int) -> None:
        lines = [f"run: {config.name}", f"prompt parameters: {prompt_parameters}"]
        lines.append(f"best epoch: {best_epoch if best_epoch is not None else '-'}")
        lines.append("")
        lines.append(f"{'epoch':>5}  {'split':<5}  {'loss':>10}  {'accuracy':>8}")
        for record in records:
            lines.append(f"{record.epoch:>5}  {record.split:<5}  {record.loss:>10.5f}  {record.accuracy:>8.4f}")
        lines.append("")
        lines.append("config:")
        lines.append(json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True))
        try:
            self.summary_path.write_text("\n".join(lines) + "\n")
        except OSError as e:
            raise OutputError(f"could not write {self.summary_path}: {e}") from e


def parse_metrics_lines(lines: Iterable[str], timings: Optional[Iterable[str]] = None) -> List[MetricsRecord]:
    wall = {}
    for line in timings or []:
        if line.strip():
            entry = json.loads(line)
            wall[(entry["epoch"], entry["split"])] = entry["wall_time"]
    records = []
    for line in lines:
        if line.strip():
            entry = json.loads(line)
            records.append(MetricsRecord(**entry, wall_time=wall.get((entry["epoch"], entry["split"]), 0.0)))
    return records


def read_metrics(run_dir: Union[str, Path]) -> List[MetricsRecord]:
    run_dir = Path(run_dir)
    metrics = run_dir / METRICS_FILE
    if not metrics.is_file():
        raise ConfigError(f"no metrics in {run_dir}")
    timings = run_dir / TIMINGS_FILE
    return parse_metrics_lines(
        metrics.read_text().splitlines(),
        timings.read_text().splitlines() if timings.is_file() else None,
    )


def run_directory(config: RunConfig) -> Path:
    run_dir = Path(config.output_dir) if config.output_dir else Path(settings.output_root) / config.name
    try:
        (run_dir / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputError(f"could not create run directory {run_dir}: {e}") from e
    return run_dir


def resolve_mapping(config: RunConfig, backbone: FrozenBackbone, train_data: ImageDataset) -> Optional[LabelMapping]:
    num_downstream = train_data.num_classes
    if config.mapping == MappingMode.NONE:
        if backbone.num_classes != num_downstream:
            raise ConfigError(
                "backbone head and dataset disagree on the class count; pick a label mapping",
                {"head": backbone.num_classes, "dataset": num_downstream},
            )
        return None
    if config.mapping == MappingMode.ARBITRARY:
        return arbitrary_mapping(num_downstream, backbone.num_classes, config.seed)
    return build_mapping(
        backbone,
        train_data.images,
        train_data.labels,
        num_downstream,
        policy=config.collision_policy,
        preprocess=lambda images: normalize(images, config.dataset.mean, config.dataset.std),
        batch_size=config.eval_batch_size,
    )


def prepare_backbone(config: RunConfig, progress: bool = False) -> FrozenBackbone:
    """The frozen model a run works against.

    A saved checkpoint wins; otherwise a `pretrain` block trains the toy ViT
    on its source task first; otherwise the seeded random initialisation.
    """
    if config.pretrain is None or config.backbone.checkpoint:
        return build_backbone(config.backbone)
    seed_everything(config.seed)
    source = config.pretrain
    spec = config.backbone
    data = load_split(source.dataset, "train", spec.native_size, spec.channels)
    logger.info("Pretraining backbone for %s on %d source images", config.name, len(data))
    return pretrain_backbone(
        spec,
        data,
        epochs=source.epochs,
        learning_rate=source.learning_rate,
        batch_size=source.batch_size,
        seed=config.seed,
        mean=source.dataset.mean,
        std=source.dataset.std,
        progress=progress,
    )


def load_data(config: RunConfig, backbone: FrozenBackbone) -> Tuple[ImageDataset, ImageDataset]:
    spec = backbone.spec
    train_data = load_split(config.dataset, "train", spec.native_size, spec.channels)
    train_data = subsample(train_data, config.dataset.subset_fraction, config.seed)
    test_data = load_split(config.dataset, "test", spec.native_size, spec.channels)
    return train_data, test_data


def build_token_prompts(config: RunConfig, backbone: FrozenBackbone) -> Optional[TokenPrompts]:
    if config.token_prompts.mode == TokenPromptMode.NONE:
        return None
    return TokenPrompts(config.token_prompts, backbone.spec.embed_dim, backbone.spec.depth)


def evaluate(
    classifier: PromptedClassifier,
    data: ImageDataset,
    *,
    corruption: Optional[CorruptionSpec] = None,
    batch_size: int = 256,
    epoch: int = 0,
    split: str = "test",
) -> MetricsRecord:
    """Accuracy and mean loss with the identity augmentation; corruption first when given."""
    if len(data) == 0:
        raise DatasetError(f"{split} split is empty")
    if int(data.labels.max()) >= classifier.num_outputs:
        raise ConfigError("dataset labels exceed the classifier outputs", {"outputs": classifier.num_outputs})

    started = time.perf_counter()
    images = apply_corruption(data.images, corruption) if corruption is not None else data.images
    loss_sum, correct = 0.0, 0
    for start in range(0, len(data), batch_size):
        labels = data.labels[start:start + batch_size]
        logits = classifier.logits(images[start:start + batch_size])
        loss_sum += float(F.cross_entropy(logits, labels, reduction="sum"))
        correct += int((logits.argmax(dim=-1) == labels).sum())
    return MetricsRecord(
        epoch=epoch,
        split=split,
        loss=loss_sum / len(data),
        accuracy=correct / len(data),
        wall_time=time.perf_counter() - started,
        prompt_parameters=classifier.prompt_parameters(),
    )


def train_epoch(
    classifier: PromptedClassifier,
    optimizer: PromptOptimizer,
    data: ImageDataset,
    config: RunConfig,
    epoch: int,
    progress: bool = False,
) -> MetricsRecord:
    started = time.perf_counter()
    order = torch.from_numpy(epoch_permutation(len(data), config.seed, epoch))
    starts = range(0, len(data), config.batch_size)
    loss_sum, correct = 0.0, 0

    for batch_index, start in enumerate(tqdm(starts, desc=f"epoch {epoch}", disable=not progress, leave=False)):
        index = order[start:start + config.batch_size]
        batch = apply_policy(
            data.images[index],
            data.labels[index],
            config.augmentation,
            epoch=epoch,
            batch_index=batch_index,
        )
        targets = batch.targets if config.augmentation.cutmix else batch.targets.labels_a
        result = classifier.gradient(batch.images, targets)
        grad_full = result.input_grad.sum(dim=0) if classifier.prompt is not None else None
        optimizer.step(grad_full, result.token_grad)

        loss_sum += result.loss * index.numel()
        correct += int((result.logits.argmax(dim=-1) == batch.targets.labels_a).sum())
        logger.debug("epoch %d batch %d loss=%.5f", epoch, batch_index, result.loss)

    return MetricsRecord(
        epoch=epoch,
        split="train",
        loss=loss_sum / len(data),
        accuracy=correct / len(data),
        wall_time=time.perf_counter() - started,
        prompt_parameters=classifier.prompt_parameters(),
    )


def save_checkpoint(path: Path, classifier: PromptedClassifier, config: RunConfig, epoch: int, backbone_checksum: str) -> Path:
    arrays = {}
    if classifier.prompt is not None:
        arrays["prompt_weight"] = classifier.prompt.weight.detach().cpu().numpy()
        arrays["prompt_mask"] = classifier.prompt.mask.cpu().numpy()
    if classifier.token_prompts is not None:
        arrays["tokens"] = classifier.token_prompts.tokens.detach().cpu().numpy()
    metadata = {
        "config": config.model_dump(mode="json"),
        "epoch": epoch,
        "backbone_checksum": backbone_checksum,
        "backbone_file": BACKBONE_FILE,
        "mapping": list(classifier.mapping.assignment) if classifier.mapping is not None else None,
        "prompt_parameters": classifier.prompt_parameters(),
    }
    return storage.save_arrays(path, arrays, metadata)


def load_checkpoint(path: Union[str, Path], backbone: Optional[FrozenBackbone] = None) -> Tuple[PromptedClassifier, RunConfig, dict]:
    """Rebuild the classifier a checkpoint was saved from; the backbone must match its recorded checksum."""
    path = Path(path)
    arrays, metadata = storage.load_arrays(path)
    if "config" not in metadata:
        raise ConfigError(f"{path} is not a run checkpoint")
    config = RunConfig.model_validate(metadata["config"])

    if backbone is None:
        stored = path.parent.parent / metadata.get("backbone_file", BACKBONE_FILE)
        backbone = load_backbone(stored) if stored.is_file() else prepare_backbone(config)
    if backbone.checksum() != metadata["backbone_checksum"]:
        raise IntegrityError("backbone differs from the one the checkpoint was trained against", {"path": str(path)})

    prompt = None
    if config.geometry is not None:
        prompt = PromptTemplate.from_arrays(
            {"weight": arrays["prompt_weight"], "mask": arrays["prompt_mask"]}, config.geometry, seed=config.seed
        )
    token_prompts = build_token_prompts(config, backbone)
    if token_prompts is not None:
        with torch.no_grad():
            token_prompts.tokens.copy_(torch.from_numpy(arrays["tokens"]))

    mapping = None
    if metadata.get("mapping") is not None:
        assignment = tuple(metadata["mapping"])
        table = np.zeros((len(assignment), backbone.num_classes), dtype=np.int64)
        mapping = LabelMapping(assignment, table, backbone.num_classes)

    classifier = PromptedClassifier(backbone, prompt, token_prompts, mapping, config.dataset.mean, config.dataset.std)
    return classifier, config, metadata


def evaluate_checkpoint(
    path: Union[str, Path],
    split: str = "test",
    corruption: Optional[CorruptionSpec] = None,
) -> MetricsRecord:
    classifier, config, metadata = load_checkpoint(path)
    data = load_split(config.dataset, split, classifier.native_size, classifier.backbone.spec.channels)
    if split == "train":
        data = subsample(data, config.dataset.subset_fraction, config.seed)
    if corruption is None and split == "test":
        corruption = config.dataset.corruption
    return evaluate(
        classifier,
        data,
        corruption=corruption,
        batch_size=config.eval_batch_size,
        epoch=metadata["epoch"],
        split=split,
    )


def write_manifest(run_dir: Path, config: RunConfig, backbone_checksum: str, **extra) -> Path:
    payload = {
        "name": config.name,
        "config": config.model_dump(mode="json"),
        "backbone_checksum": backbone_checksum,
        **extra,
    }
    return storage.write_json(run_dir / MANIFEST_FILE, payload)


def train(config: RunConfig, backbone: Optional[FrozenBackbone] = None, progress: bool = False) -> TrainResult:
    seed_everything(config.seed)
    run_dir = run_directory(config)
    backbone = backbone if backbone is not None else prepare_backbone(config, progress)
    reference = backbone.checksum()

    train_data, test_data = load_data(config, backbone)
    mapping = resolve_mapping(config, backbone, train_data)
    prompt = PromptTemplate(config.geometry, seed=config.seed) if config.geometry is not None else None
    token_prompts = build_token_prompts(config, backbone)
    classifier = PromptedClassifier(backbone, prompt, token_prompts, mapping, config.dataset.mean, config.dataset.std)

    save_backbone(backbone, run_dir / BACKBONE_FILE)
    if mapping is not None:
        save_mapping(mapping, run_dir / MAPPING_FILE)
    write_manifest(run_dir, config, reference, prompt_parameters=classifier.prompt_parameters())

    batches_per_epoch = math.ceil(len(train_data) / config.batch_size)
    optimizer = PromptOptimizer(config.update, config.epochs * batches_per_epoch, prompt, token_prompts)
    writer = MetricsWriter(run_dir)
    checkpoints = {
        "final": run_dir / CHECKPOINT_DIR / FINAL_CHECKPOINT,
        "best": run_dir / CHECKPOINT_DIR / BEST_CHECKPOINT,
    }

    logger.info(
        "Run %s started: %d train / %d test images, %d prompt parameters, %d epochs",
        config.name, len(train_data), len(test_data), classifier.prompt_parameters(), config.epochs,
    )
    records: List[MetricsRecord] = []
    best_accuracy, best_epoch = -1.0, None
    for epoch in range(config.epochs):
        train_record = train_epoch(classifier, optimizer, train_data, config, epoch, progress)
        test_record = evaluate(
            classifier,
            test_data,
            corruption=config.dataset.corruption,
            batch_size=config.eval_batch_size,
            epoch=epoch,
        )
        for record in (train_record, test_record):
            writer.write(record)
            records.append(record)
        if test_record.accuracy > best_accuracy:
            best_accuracy, best_epoch = test_record.accuracy, epoch
            save_checkpoint(checkpoints["best"], classifier, config, epoch, reference)
            logger.info("Best checkpoint at epoch %d (test accuracy %.4f)", epoch, best_accuracy)

    final_epoch = config.epochs - 1 if config.epochs else 0
    save_checkpoint(checkpoints["final"], classifier, config, final_epoch, reference)
    if best_epoch is None:
        save_checkpoint(checkpoints["best"], classifier, config, final_epoch, reference)
    writer.write_summary(config, records, best_epoch, classifier.prompt_parameters())
    write_manifest(
        run_dir, config, reference,
        prompt_parameters=classifier.prompt_parameters(),
        best_epoch=best_epoch,
        epochs_completed=config.epochs,
    )

    if backbone.checksum() != reference:
        raise IntegrityError("frozen backbone weights changed during the run", {"run": config.name})
    logger.info("Run %s finished in %s", config.name, run_dir)
    return TrainResult(prompt, token_prompts, records, checkpoints, run_dir, classifier, reference, mapping, best_epoch)


def zero_shot(config: RunConfig, backbone: Optional[FrozenBackbone] = None) -> MetricsRecord:
    """Frozen model with no learned parameters (the label mapping still applies)."""
    seed_everything(config.seed)
    backbone = backbone if backbone is not None else prepare_backbone(config)
    train_data, test_data = load_data(config, backbone)
    mapping = resolve_mapping(config, backbone, train_data)
    classifier = PromptedClassifier(backbone, mapping=mapping, mean=config.dataset.mean, std=config.dataset.std)
    return evaluate(classifier, test_data, corruption=config.dataset.corruption, batch_size=config.eval_batch_size)


@torch.no_grad()
def extract_features(backbone: FrozenBackbone, images: torch.Tensor, mean, std, batch_size: int = 256) -> torch.Tensor:
    chunks = [
        backbone.forward_features(normalize(images[start:start + batch_size], mean, std))
        for start in range(0, images.shape[0], batch_size)
    ]
    return torch.cat(chunks)


def linear_probe(
    backbone: FrozenBackbone,
    train_data: ImageDataset,
    test_data: ImageDataset,
    mean: Sequence[float] = (0.5, 0.5, 0.5),
    std: Sequence[float] = (0.25, 0.25, 0.25),
    epochs: int = 200,
    learning_rate: float = 1e-2,
    seed: int = 0,
) -> ProbeResult:
    """Reference baseline: a linear classifier on frozen CLS features, full-batch Adam."""
    train_features = extract_features(backbone, train_data.images, mean, std)
    test_features = extract_features(backbone, test_data.images, mean, std)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = nn.Linear(train_features.shape[1], train_data.num_classes)
    optimizer = torch.optim.Adam(head.parameters(), lr=learning_rate)

    losses = []
    for _ in range(epochs):
        loss = F.cross_entropy(head(train_features), train_data.labels)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())

    with torch.no_grad():
        train_accuracy = float((head(train_features).argmax(-1) == train_data.labels).float().mean())
        test_accuracy = float((head(test_features).argmax(-1) == test_data.labels).float().mean())
    parameters = sum(p.numel() for p in head.parameters())
    logger.info("Linear probe: train %.4f, test %.4f (%d parameters)", train_accuracy, test_accuracy, parameters)
    return ProbeResult(train_accuracy, test_accuracy, parameters, losses)


def pretrain_backbone(
    spec: BackboneSpec,
    data: ImageDataset,
    epochs: int,
    learning_rate: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    mean: Sequence[float] = (0.5, 0.5, 0.5),
    std: Sequence[float] = (0.25, 0.25, 0.25),
    progress: bool = False,
) -> FrozenBackbone:
    """Train a toy ViT with a linear head on a source task and hand it back frozen."""
    spec = spec.model_copy(update={"head": HeadKind.LINEAR, "num_classes": data.num_classes, "checkpoint": None})
    model = FrozenBackbone(spec, freeze=False)
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=learning_rate, weight_decay=0.05)
    inputs = normalize(data.images, mean, std)

    for epoch in tqdm(range(epochs), desc="pretrain", disable=not progress):
        order = torch.from_numpy(epoch_permutation(len(data), seed, epoch))
        for start in range(0, len(data), batch_size):
            index = order[start:start + batch_size]
            loss = F.cross_entropy(model(inputs[index]), data.labels[index])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        logger.debug("pretrain epoch %d loss=%.5f", epoch, loss.item())

    model.freeze()
    logger.info("Pretrained backbone on %d images, %d classes", len(data), data.num_classes)
    return model
