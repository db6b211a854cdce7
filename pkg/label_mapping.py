"""Downstream-class -> pretrained-class correspondence for fixed pretrained heads."""
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import torch

from errors import CapacityError, ConfigError, DatasetError, OutputError
from schemas import CollisionPolicy

logger = logging.getLogger(__name__)

TABLE_HEADER = "downstream\tpretrained\ttop_frequency"


@dataclass(frozen=True)
class Collision:
    downstream: int
    wanted: int
    owner: int
    assigned: int


@dataclass(frozen=True)
class LabelMapping:
    assignment: Tuple[int, ...]
    frequency_table: np.ndarray
    num_pretrained: int
    collision_log: List[Collision] = field(default_factory=list)

    @property
    def num_downstream(self) -> int:
        return len(self.assignment)

    def top_frequency(self, downstream: int) -> int:
        return int(self.frequency_table[downstream, self.assignment[downstream]])

    def index_tensor(self) -> torch.Tensor:
        return torch.tensor(self.assignment, dtype=torch.long)

    def checksum(self) -> str:
        return hashlib.sha256(",".join(str(a) for a in self.assignment).encode()).hexdigest()


def count_predictions(predictions: np.ndarray, labels: np.ndarray, num_downstream: int, num_pretrained: int) -> np.ndarray:
    table = np.zeros((num_downstream, num_pretrained), dtype=np.int64)
    np.add.at(table, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return table


def assign_from_frequencies(table: np.ndarray, policy: CollisionPolicy = CollisionPolicy.RESOLVE) -> Tuple[Tuple[int, ...], List[Collision]]:
    """Ties break toward the lower pretrained index.

    RESOLVE: classes go in descending order of their top count (lower index
    first on ties) and each claims its most frequent unclaimed pretrained class.
    """
    num_downstream, num_pretrained = table.shape
    if policy == CollisionPolicy.ALLOW_DUPLICATES:
        return tuple(int(np.argmax(row)) for row in table), []
    if num_downstream > num_pretrained:
        raise CapacityError("more downstream than pretrained classes", {"downstream": num_downstream, "pretrained": num_pretrained})

    order = sorted(range(num_downstream), key=lambda c: (-int(table[c].max()), c))
    assignment = [-1] * num_downstream
    owners = {}
    collisions = []
    for c in order:
        # stable sort keeps lower indices first among equal counts
        ranked = np.argsort(-table[c], kind="stable")
        wanted = int(ranked[0])
        chosen = next(int(p) for p in ranked if int(p) not in owners)
        if chosen != wanted:
            collisions.append(Collision(downstream=c, wanted=wanted, owner=owners[wanted], assigned=chosen))
            logger.info("Label collision: class %d wanted %d (held by %d), assigned %d", c, wanted, owners[wanted], chosen)
        owners[chosen] = c
        assignment[c] = chosen
    return tuple(assignment), collisions


@torch.no_grad()
def predict_classes(model: Callable[[torch.Tensor], torch.Tensor], images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    predictions = [model(images[start:start + batch_size]).argmax(dim=-1) for start in range(0, images.shape[0], batch_size)]
    return torch.cat(predictions).cpu().numpy()


def build_mapping(
    backbone,
    images: torch.Tensor,
    labels: torch.Tensor,
    num_downstream: int,
    policy: CollisionPolicy = CollisionPolicy.RESOLVE,
    preprocess: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    batch_size: int = 256,
) -> LabelMapping:
    """Run the promptless frozen model on every downstream class and vote."""
    counts = np.bincount(labels.cpu().numpy(), minlength=num_downstream)
    empty = [int(c) for c in np.flatnonzero(counts[:num_downstream] == 0)]
    if empty:
        raise DatasetError("every downstream class needs at least one image", {"empty_classes": empty})

    inputs = preprocess(images) if preprocess is not None else images
    predictions = predict_classes(backbone, inputs, batch_size)
    num_pretrained = int(backbone.num_classes)
    table = count_predictions(predictions, labels.cpu().numpy(), num_downstream, num_pretrained)
    assignment, collisions = assign_from_frequencies(table, policy)
    logger.info("Built label mapping for %d classes (%d collisions)", num_downstream, len(collisions))
    return LabelMapping(assignment, table, num_pretrained, collisions)


def arbitrary_mapping(num_downstream: int, num_pretrained: int, seed: int = 0) -> LabelMapping:
    if num_downstream > num_pretrained:
        raise CapacityError("more downstream than pretrained classes", {"downstream": num_downstream, "pretrained": num_pretrained})
    rng = np.random.default_rng(seed)
    assignment = tuple(int(p) for p in rng.permutation(num_pretrained)[:num_downstream])
    return LabelMapping(assignment, np.zeros((num_downstream, num_pretrained), dtype=np.int64), num_pretrained)


def remap_logits(pretrained_logits: torch.Tensor, mapping: LabelMapping) -> torch.Tensor:
    width = pretrained_logits.shape[-1]
    if any(a < 0 or a >= width for a in mapping.assignment):
        raise ConfigError("mapping points outside the pretrained logits", {"width": width})
    return pretrained_logits.index_select(-1, mapping.index_tensor().to(pretrained_logits.device))


def save_mapping(mapping: LabelMapping, path: Union[str, Path]) -> Path:
    path = Path(path)
    lines = [TABLE_HEADER]
    lines += [f"{c}\t{p}\t{mapping.top_frequency(c)}" for c, p in enumerate(mapping.assignment)]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise OutputError(f"could not write {path}: {e}") from e
    return path


def load_mapping(path: Union[str, Path], num_pretrained: int) -> LabelMapping:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"label mapping not found: {path}")
    rows = [line.split("\t") for line in path.read_text().splitlines()[1:] if line.strip()]
    rows.sort(key=lambda row: int(row[0]))
    if [int(row[0]) for row in rows] != list(range(len(rows))):
        raise ConfigError("label mapping table must list every downstream class once", {"path": str(path)})
    assignment = tuple(int(row[1]) for row in rows)
    table = np.zeros((len(rows), num_pretrained), dtype=np.int64)
    for c, row in enumerate(rows):
        table[c, assignment[c]] = int(row[2])
    return LabelMapping(assignment, table, num_pretrained)
