"""Dataset ingestion: synthetic blobs, CIFAR binary batches and image folders.

Every split is held in memory as raw [0, 1] images at the backbone's native
size, shape `(N, C, H, W)`, with integer labels.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torchvision import datasets as tv_datasets
from torchvision import transforms

from errors import ConfigError, DatasetError
from schemas import DatasetSource, DatasetSpec

logger = logging.getLogger(__name__)

LATENT_DIM = 8
TEXTURE_GRID = 4
TEXTURE_SCALE = 0.05
CIFAR_RECORD = 3073
CIFAR_SIDE = 32
SPLITS = ("train", "test")


@dataclass
class ImageDataset:
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    class_names: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels.numpy(), minlength=self.num_classes)

    def subset(self, indices) -> "ImageDataset":
        index = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return ImageDataset(self.images[index], self.labels[index], self.num_classes, list(self.class_names))


def normalize(images: torch.Tensor, mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    mean_t = torch.tensor(mean, dtype=images.dtype).view(-1, 1, 1)
    std_t = torch.tensor(std, dtype=images.dtype).view(-1, 1, 1)
    return (images - mean_t) / std_t


def _resize(images: torch.Tensor, size: int) -> torch.Tensor:
    if images.shape[-1] == size and images.shape[-2] == size:
        return images
    return F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False, antialias=True).clamp(0.0, 1.0)


def _split_code(split: str) -> int:
    if split not in SPLITS:
        raise ConfigError(f"unknown split: {split}", {"known": list(SPLITS)})
    return SPLITS.index(split)


def synthetic_blobs(spec: DatasetSpec, split: str, native_size: int, channels: int = 3) -> ImageDataset:
    """Gaussian class blobs in a small latent space, rendered as smooth textures.

    Class centres and the texture basis depend only on `data_seed`, so the
    train and test splits share them; per-sample noise differs per split.
    With `frame_width` set, every image sits inside the same class-texture
    frame (see `paint_frame`).
    """
    num_classes = spec.num_classes or 4
    structure = np.random.default_rng(spec.data_seed)
    centers = structure.standard_normal((num_classes, LATENT_DIM))
    centers = centers / np.linalg.norm(centers, axis=1, keepdims=True) * spec.margin
    basis = torch.from_numpy(structure.standard_normal((LATENT_DIM, channels, TEXTURE_GRID, TEXTURE_GRID))).float()
    basis = F.interpolate(basis, size=(native_size, native_size), mode="bilinear", align_corners=False)

    per_class = spec.samples_per_class if split == "train" else spec.test_samples_per_class
    noise = np.random.default_rng([spec.data_seed, 1 + _split_code(split)])
    labels = np.repeat(np.arange(num_classes), per_class)
    latents = centers[labels] + noise.standard_normal((labels.shape[0], LATENT_DIM))

    textures = torch.einsum("nl,lchw->nchw", torch.from_numpy(latents).float(), basis)
    images = (0.5 + TEXTURE_SCALE * textures).clamp(0.0, 1.0)
    if spec.frame_width:
        images = paint_frame(images, centers, basis, spec.frame_class, spec.frame_width)
    names = [f"blob_{c}" for c in range(num_classes)]
    return ImageDataset(images, torch.from_numpy(labels).long(), num_classes, names)


def paint_frame(images: torch.Tensor, centers: np.ndarray, basis: torch.Tensor, frame_class: int, width: int) -> torch.Tensor:
    """Overwrite the outer `width` pixels of every image with the noise-free texture of `frame_class`.

    The frame is identical across images and splits; only the centre still
    carries the sample's own class.
    """
    size = images.shape[-1]
    if frame_class >= centers.shape[0]:
        raise ConfigError("frame class outside the class range", {"frame_class": frame_class, "num_classes": centers.shape[0]})
    if 2 * width >= size:
        raise ConfigError("frame leaves no room for the image", {"frame_width": width, "native_size": size})
    frame = (0.5 + TEXTURE_SCALE * torch.einsum("l,lchw->chw", torch.from_numpy(centers[frame_class]).float(), basis)).clamp(0.0, 1.0)
    ring = torch.ones(size, size, dtype=torch.bool)
    ring[width:size - width, width:size - width] = False
    framed = images.clone()
    framed[:, :, ring] = frame[:, ring]
    return framed


def read_cifar_batch(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD != 0:
        raise DatasetError(f"{path} is not a CIFAR binary batch", {"bytes": int(raw.size), "record": CIFAR_RECORD})
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    return images, labels


def cifar_binary(spec: DatasetSpec, split: str, native_size: int) -> ImageDataset:
    root = Path(spec.path)
    pattern = "data_batch_*.bin" if split == "train" else "test_batch.bin"
    files = sorted(root.glob(pattern))
    if not files:
        raise DatasetError(f"no CIFAR {split} batches under {root}", {"pattern": pattern})

    parts = [read_cifar_batch(f) for f in files]
    images = torch.from_numpy(np.concatenate([p[0] for p in parts])).float() / 255.0
    labels = torch.from_numpy(np.concatenate([p[1] for p in parts]))
    num_classes = spec.num_classes or int(labels.max()) + 1
    if int(labels.max()) >= num_classes:
        raise DatasetError("CIFAR label outside the configured class count", {"num_classes": num_classes})
    return ImageDataset(_resize(images, native_size), labels, num_classes, [str(c) for c in range(num_classes)])


def image_folder(spec: DatasetSpec, split: str, native_size: int) -> ImageDataset:
    root = Path(spec.path) / split
    if not root.is_dir():
        raise DatasetError(f"image folder split not found: {root}")
    transform = transforms.Compose([transforms.Resize((native_size, native_size)), transforms.ToTensor()])
    try:
        folder = tv_datasets.ImageFolder(str(root), transform=transform)
    except (FileNotFoundError, RuntimeError) as e:
        raise DatasetError(f"could not read image folder {root}: {e}") from e

    images = torch.stack([folder[i][0] for i in range(len(folder))])
    labels = torch.tensor(folder.targets, dtype=torch.long)
    return ImageDataset(images, labels, len(folder.classes), list(folder.classes))


def load_split(spec: DatasetSpec, split: str, native_size: int, channels: int = 3) -> ImageDataset:
    _split_code(split)
    if spec.source == DatasetSource.SYNTHETIC:
        data = synthetic_blobs(spec, split, native_size, channels)
    else:
        if not spec.path:
            raise DatasetError(f"{spec.source.value} datasets need a path")
        if not Path(spec.path).exists():
            raise DatasetError(f"dataset path not found: {spec.path}")
        if spec.source == DatasetSource.CIFAR_BINARY:
            data = cifar_binary(spec, split, native_size)
        else:
            data = image_folder(spec, split, native_size)
    if data.images.shape[1] != channels:
        raise DatasetError("dataset channels differ from the backbone's", {"dataset": data.images.shape[1], "backbone": channels})
    logger.info("Loaded %s split: %d images, %d classes", split, len(data), data.num_classes)
    return data


def subsample(data: ImageDataset, fraction: float, seed: int = 0) -> ImageDataset:
    """Keep ceil(fraction * n_c) items of every class, drawn without replacement."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("subset fraction must be in (0, 1]", {"fraction": fraction})
    if fraction == 1.0:
        return data

    rng = np.random.default_rng(seed)
    labels = data.labels.numpy()
    keep = []
    for c in range(data.num_classes):
        members = np.flatnonzero(labels == c)
        # round first: 0.07 * 100 is 7.000000000000001
        count = math.ceil(round(fraction * members.size, 9))
        keep.append(rng.choice(members, size=count, replace=False))
    return data.subset(np.sort(np.concatenate(keep)))
