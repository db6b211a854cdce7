"""Pixel prompts: masks, shrinking and prompt/image composition.

All tensors are channel-first. A prompt over a K×K canvas with c channels is a
`(c, K, K)` tensor; images are `(c, H, W)` or batches `(B, c, H, W)`.
"""
import logging
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.utils import save_image

import storage
from errors import CompositionError, GeometryError, InvalidInputError
from schemas import GeometryMode, Interpolation, OUTER_PAD_MODES, PositionMode, PromptGeometry

logger = logging.getLogger(__name__)

PROMPT_INIT_STD = 0.02
# default shrink ratio, 164 of 224 pixels
DEFAULT_INNER_RATIO = 164 / 224


def pad_offsets(outer_size: int, inner_size: int) -> Tuple[int, int]:
    before = (outer_size - inner_size + 1) // 2
    return before, outer_size - inner_size - before


def make_mask(outer_size: int, inner_size: int, channels: int = 3) -> torch.Tensor:
    if outer_size <= 0 or inner_size <= 0 or channels <= 0:
        raise GeometryError("mask sizes must be positive", {"K": outer_size, "k": inner_size, "channels": channels})
    if inner_size > outer_size:
        raise GeometryError("inner size exceeds outer size", {"K": outer_size, "k": inner_size})

    mask = torch.ones(channels, outer_size, outer_size)
    top, _ = pad_offsets(outer_size, inner_size)
    mask[:, top:top + inner_size, top:top + inner_size] = 0
    return mask


def prompt_mask(geometry: PromptGeometry) -> torch.Tensor:
    if geometry.mode == GeometryMode.OVERLAY_ADD:
        if geometry.overlay_border:
            size = geometry.outer_size
            return make_mask(size, size - 2 * geometry.overlay_border, geometry.channels)
        return torch.ones(geometry.channels, geometry.outer_size, geometry.outer_size)
    return make_mask(geometry.outer_size, geometry.inner_size, geometry.channels)


def parameter_count(geometry: PromptGeometry) -> int:
    outer, inner, channels = geometry.outer_size, geometry.inner_size, geometry.channels
    if geometry.mode == GeometryMode.OVERLAY_ADD:
        if geometry.overlay_border:
            inner = outer - 2 * geometry.overlay_border
            return (outer ** 2 - inner ** 2) * channels
        return outer ** 2 * channels
    # OUTER_PAD keeps the native image as the inner block, so the same formula gives K'^2 - K^2
    return (outer ** 2 - inner ** 2) * channels


def default_inner_size(native_size: int) -> int:
    size = 2 * round(native_size * DEFAULT_INNER_RATIO / 2)
    return max(2, min(size, native_size))


def outer_pad_size(native_size: int, inner_size: int, patch_size: int, channels: int = 3) -> int:
    """Padded canvas for outer padding whose prompt size best matches a shrink-and-pad prompt.

    The border must be whole patches on every side so prompt patches and
    image patches never share a token.
    """
    target = (native_size ** 2 - inner_size ** 2) * channels
    step = 2 * patch_size
    best, best_gap = native_size + step, None
    size = native_size + step
    while size <= 2 * native_size + step:
        gap = abs((size ** 2 - native_size ** 2) * channels - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = size, gap
        size += step
    return best


def default_geometry(mode: GeometryMode, native_size: int, patch_size: int, channels: int = 3) -> PromptGeometry:
    """Canvas sizes each mode uses when none are given."""
    mode = GeometryMode(mode)
    if mode == GeometryMode.SHRINK_PAD:
        return PromptGeometry(outer_size=native_size, inner_size=default_inner_size(native_size), channels=channels, mode=mode)
    if mode in OUTER_PAD_MODES:
        outer = outer_pad_size(native_size, default_inner_size(native_size), patch_size, channels)
        return PromptGeometry(outer_size=outer, inner_size=native_size, channels=channels, mode=mode)
    return PromptGeometry(outer_size=native_size, inner_size=native_size, channels=channels, mode=mode)


def position_mode_for(geometry: PromptGeometry) -> PositionMode:
    if geometry.mode == GeometryMode.OUTER_PAD_WITH_PE:
        return PositionMode.INTERPOLATE
    if geometry.mode == GeometryMode.OUTER_PAD_NO_PE:
        return PositionMode.IMAGE_ONLY
    return PositionMode.NATIVE


def shrink(image: torch.Tensor, size: int, interpolation: Union[Interpolation, str] = Interpolation.BILINEAR) -> torch.Tensor:
    if image.numel() == 0 or image.dim() not in (3, 4):
        raise InvalidInputError("shrink needs a non-empty (C, H, W) or (B, C, H, W) image", {"shape": tuple(image.shape)})
    if size < 1:
        raise InvalidInputError("target size must be at least 1", {"size": size})

    if image.shape[-2] == size and image.shape[-1] == size:
        return image.clone()

    interpolation = Interpolation(interpolation)
    batch = image if image.dim() == 4 else image.unsqueeze(0)
    if interpolation == Interpolation.BILINEAR:
        resized = F.interpolate(batch, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    elif interpolation == Interpolation.AREA:
        resized = F.interpolate(batch, size=(size, size), mode="area")
    else:
        resized = F.interpolate(batch, size=(size, size), mode="nearest")
    return resized if image.dim() == 4 else resized[0]


class PromptTemplate(nn.Module):
    """Learnable canvas W with its mask M; the effective prompt is W ⊙ M."""

    def __init__(self, geometry: PromptGeometry, seed: int = 0, init_std: float = PROMPT_INIT_STD):
        super().__init__()
        self.geometry = geometry
        self.seed = seed

        generator = torch.Generator().manual_seed(seed)
        size = geometry.outer_size
        weight = torch.randn(geometry.channels, size, size, generator=generator) * init_std
        self.weight = nn.Parameter(weight)
        self.register_buffer("mask", prompt_mask(geometry))

    def effective(self) -> torch.Tensor:
        return self.weight * self.mask

    def parameter_count(self) -> int:
        return parameter_count(self.geometry)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return compose(image, self)

    def to_arrays(self):
        return {
            "weight": self.weight.detach().cpu().numpy(),
            "mask": self.mask.cpu().numpy(),
        }

    @classmethod
    def from_arrays(cls, arrays, geometry: PromptGeometry, seed: int = 0) -> "PromptTemplate":
        prompt = cls(geometry, seed=seed)
        weight = torch.from_numpy(np.array(arrays["weight"]))
        if tuple(weight.shape) != tuple(prompt.weight.shape):
            raise GeometryError(
                "stored prompt does not match its geometry",
                {"stored": tuple(weight.shape), "expected": tuple(prompt.weight.shape)},
            )
        with torch.no_grad():
            prompt.weight.copy_(weight)
        mask = torch.from_numpy(np.array(arrays["mask"]))
        if not torch.equal(mask, prompt.mask):
            raise GeometryError("stored mask does not match its geometry")
        return prompt


def compose(image: torch.Tensor, prompt: PromptTemplate) -> torch.Tensor:
    geometry = prompt.geometry
    batch = image if image.dim() == 4 else image.unsqueeze(0)
    if batch.dim() != 4 or batch.shape[1] != geometry.channels:
        raise CompositionError(
            "image channels do not match the prompt",
            {"shape": tuple(image.shape), "channels": geometry.channels},
        )
    height, width = batch.shape[-2:]
    effective = prompt.effective().to(batch.dtype)

    if geometry.mode == GeometryMode.SHRINK_PAD:
        inner = shrink(batch, geometry.inner_size, geometry.interpolation)
        before, after = pad_offsets(geometry.outer_size, geometry.inner_size)
        composed = F.pad(inner, (before, after, before, after)) + effective
    elif geometry.mode in OUTER_PAD_MODES:
        if height != geometry.inner_size or width != geometry.inner_size:
            raise CompositionError(
                "outer padding expects the image at its native size",
                {"image": (height, width), "native": geometry.inner_size},
            )
        before, after = pad_offsets(geometry.outer_size, geometry.inner_size)
        composed = F.pad(batch, (before, after, before, after)) + effective
    else:
        if height != geometry.outer_size or width != geometry.outer_size:
            raise CompositionError(
                "overlay prompt and image sizes differ",
                {"image": (height, width), "prompt": geometry.outer_size},
            )
        composed = batch + effective

    return composed if image.dim() == 4 else composed[0]


def crop_center(composed: torch.Tensor, geometry: PromptGeometry) -> torch.Tensor:
    top, _ = pad_offsets(geometry.outer_size, geometry.inner_size)
    size = geometry.inner_size
    return composed[..., top:top + size, top:top + size]


def save_prompt(prompt: PromptTemplate, path: Union[str, Path]) -> Path:
    metadata = {"geometry": prompt.geometry.model_dump(mode="json"), "seed": prompt.seed}
    return storage.save_arrays(path, prompt.to_arrays(), metadata)


def load_prompt(path: Union[str, Path]) -> PromptTemplate:
    arrays, metadata = storage.load_arrays(path)
    geometry = PromptGeometry.model_validate(metadata["geometry"])
    return PromptTemplate.from_arrays(arrays, geometry, seed=metadata.get("seed", 0))


def prompt_visualization(prompt: PromptTemplate, mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    """Effective prompt mapped back to pixel space and clipped to [0, 1]; unprompted pixels are black."""
    mean_t = torch.tensor(mean, dtype=torch.float32).view(-1, 1, 1)
    std_t = torch.tensor(std, dtype=torch.float32).view(-1, 1, 1)
    with torch.no_grad():
        pixels = (prompt.effective().float() * std_t + mean_t) * prompt.mask
    return pixels.clamp(0.0, 1.0)


def export_prompt_image(prompt: PromptTemplate, path: Union[str, Path], mean: Sequence[float], std: Sequence[float]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_image(prompt_visualization(prompt, mean, std), str(path))
    logger.info("Prompt image written to %s (%d parameters)", path, prompt.parameter_count())
    return path
