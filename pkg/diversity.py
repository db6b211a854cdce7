"""Input diversity: flip, a reduced RandAug and CutMix, applied before the prompt is padded on.

Augmentations operate on raw [0, 1] images at native size. Every random draw
comes from a numpy Generator seeded with (policy seed, epoch, batch index), so
a batch is augmented the same way on every replay.
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from errors import InvalidInputError
from schemas import AugmentationPolicy

RANDAUG_OPS = ("brightness", "contrast", "translate", "rotate")
# per unit of magnitude (0..10)
BRIGHTNESS_STEP = 0.09
CONTRAST_STEP = 0.09
TRANSLATE_STEP = 0.045
ROTATE_STEP = 3.0


@dataclass
class LabelPair:
    label_a: int
    label_b: int
    weight_a: float
    weight_b: float


@dataclass
class MixedTargets:
    labels_a: torch.Tensor
    labels_b: torch.Tensor
    weight_a: torch.Tensor

    @classmethod
    def plain(cls, labels: torch.Tensor) -> "MixedTargets":
        return cls(labels, labels.clone(), torch.ones(labels.shape[0]))


@dataclass
class AugmentedBatch:
    images: torch.Tensor
    targets: MixedTargets


def mixed_cross_entropy(logits: torch.Tensor, targets: Union[torch.Tensor, MixedTargets]) -> torch.Tensor:
    """Cross-entropy; for mixed targets the per-sample weighted sum of both labels' losses."""
    if isinstance(targets, torch.Tensor):
        return F.cross_entropy(logits, targets)
    weight_a = targets.weight_a.to(logits.dtype)
    loss_a = F.cross_entropy(logits, targets.labels_a, reduction="none")
    loss_b = F.cross_entropy(logits, targets.labels_b, reduction="none")
    return (weight_a * loss_a + (1 - weight_a) * loss_b).mean()


def flip(image: torch.Tensor) -> torch.Tensor:
    return torch.flip(image, dims=[-1])


def randaug_lite(image: torch.Tensor, magnitude: int, num_ops: int, rng: np.random.Generator) -> torch.Tensor:
    height, width = image.shape[-2:]
    out = image
    for index in rng.integers(0, len(RANDAUG_OPS), size=num_ops):
        op = RANDAUG_OPS[index]
        sign = 1.0 if rng.random() < 0.5 else -1.0
        if op == "brightness":
            out = TF.adjust_brightness(out, max(0.0, 1.0 + sign * BRIGHTNESS_STEP * magnitude))
        elif op == "contrast":
            out = TF.adjust_contrast(out, max(0.0, 1.0 + sign * CONTRAST_STEP * magnitude))
        elif op == "translate":
            dx = int(round(sign * TRANSLATE_STEP * magnitude * width))
            dy = int(round((1.0 if rng.random() < 0.5 else -1.0) * TRANSLATE_STEP * magnitude * height))
            out = TF.affine(out, angle=0.0, translate=[dx, dy], scale=1.0, shear=[0.0, 0.0])
        else:
            out = TF.rotate(out, angle=sign * ROTATE_STEP * magnitude)
    return out


def cutmix(
    image_a: torch.Tensor,
    label_a: int,
    image_b: torch.Tensor,
    label_b: int,
    lam: float,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[torch.Tensor, LabelPair]:
    """Paste a box of relative area 1 - lam from image_b into image_a.

    The box centre is uniform over the image and the box is clipped at the
    edges, so the pasted area can come out smaller than asked for. The
    returned weights use the area actually pasted.
    """
    if image_a.shape != image_b.shape:
        raise InvalidInputError("cutmix images differ in shape", {"a": tuple(image_a.shape), "b": tuple(image_b.shape)})
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError("cutmix ratio must be in [0, 1]", {"lam": lam})
    rng = rng if rng is not None else np.random.default_rng(0)

    height, width = image_a.shape[-2:]
    cut_ratio = math.sqrt(1.0 - lam)
    cut_h, cut_w = int(height * cut_ratio), int(width * cut_ratio)
    centre_y, centre_x = int(rng.integers(0, height)), int(rng.integers(0, width))
    top, bottom = (int(v) for v in np.clip([centre_y - cut_h // 2, centre_y + cut_h // 2], 0, height))
    left, right = (int(v) for v in np.clip([centre_x - cut_w // 2, centre_x + cut_w // 2], 0, width))

    mixed = image_a.clone()
    mixed[..., top:bottom, left:right] = image_b[..., top:bottom, left:right]
    weight_a = 1.0 - (bottom - top) * (right - left) / (height * width)
    return mixed, LabelPair(int(label_a), int(label_b), weight_a, 1.0 - weight_a)


def apply_policy(
    images: torch.Tensor,
    labels: torch.Tensor,
    policy: AugmentationPolicy,
    *,
    epoch: int = 0,
    batch_index: int = 0,
    training: bool = True,
) -> AugmentedBatch:
    """flip -> randaug_lite -> cutmix. Evaluation always gets the identity."""
    if not training:
        return AugmentedBatch(images, MixedTargets.plain(labels))

    rng = np.random.default_rng([policy.seed, epoch, batch_index])
    out = images.clone()
    batch = out.shape[0]

    if policy.flip:
        flipped = torch.from_numpy(rng.random(batch) < policy.flip_probability)
        if flipped.any():
            out[flipped] = flip(out[flipped])

    if policy.randaug:
        for i in range(batch):
            out[i] = randaug_lite(out[i], policy.randaug_magnitude, policy.randaug_ops, rng)

    targets = MixedTargets.plain(labels)
    if policy.cutmix and batch > 1:
        source = out.clone()
        partners = rng.permutation(batch)
        ratios = rng.beta(policy.cutmix_beta, policy.cutmix_beta, size=batch)
        labels_b = labels[torch.from_numpy(partners)]
        weight_a = torch.ones(batch)
        for i in range(batch):
            j = int(partners[i])
            out[i], pair = cutmix(source[i], int(labels[i]), source[j], int(labels[j]), float(ratios[i]), rng)
            weight_a[i] = pair.weight_a
        targets = MixedTargets(labels, labels_b, weight_a)

    return AugmentedBatch(out, targets)
