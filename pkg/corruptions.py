"""Synthetic common corruptions for robustness evaluation.

Severity 0 is the identity; severities 1..5 index the tables below. Images are
raw [0, 1] tensors and outputs are clipped back into that range.
"""
import math
from typing import Union

import torch
import torchvision.transforms.functional as TF

from errors import ConfigError
from schemas import CorruptionKind, CorruptionSpec

NOISE_SIGMA = (0.0, 0.04, 0.06, 0.08, 0.09, 0.10)
BLUR_SIGMA = (0.0, 0.4, 0.6, 0.7, 0.8, 1.0)
CONTRAST_FACTOR = (1.0, 0.75, 0.5, 0.4, 0.3, 0.15)


def _gaussian_noise(images: torch.Tensor, severity: int, seed: int) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    noise = torch.randn(images.shape, generator=generator, dtype=images.dtype)
    return images + NOISE_SIGMA[severity] * noise


def _blur(images: torch.Tensor, severity: int) -> torch.Tensor:
    sigma = BLUR_SIGMA[severity]
    kernel = 2 * math.ceil(3 * sigma) + 1
    return TF.gaussian_blur(images, kernel_size=[kernel, kernel], sigma=[sigma, sigma])


def _contrast(images: torch.Tensor, severity: int) -> torch.Tensor:
    mean = images.mean(dim=(-3, -2, -1), keepdim=True)
    return mean + CONTRAST_FACTOR[severity] * (images - mean)


def corrupt(images: torch.Tensor, kind: Union[CorruptionKind, str], severity: int, seed: int = 0) -> torch.Tensor:
    try:
        kind = CorruptionKind(kind)
    except ValueError:
        raise ConfigError(f"unknown corruption: {kind}", {"known": [k.value for k in CorruptionKind]})
    if not 0 <= severity < len(NOISE_SIGMA):
        raise ConfigError("corruption severity must be in 0..5", {"severity": severity})
    if severity == 0:
        return images.clone()

    if kind == CorruptionKind.GAUSSIAN_NOISE:
        out = _gaussian_noise(images, severity, seed)
    elif kind == CorruptionKind.BLUR:
        out = _blur(images, severity)
    else:
        out = _contrast(images, severity)
    return out.clamp(0.0, 1.0)


def apply_corruption(images: torch.Tensor, spec: CorruptionSpec) -> torch.Tensor:
    return corrupt(images, spec.kind, spec.severity, spec.seed)
