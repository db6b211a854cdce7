from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import GeometryError


# Pixel prompt geometry
class GeometryMode(str, Enum):
    SHRINK_PAD = "SHRINK_PAD"
    OUTER_PAD_WITH_PE = "OUTER_PAD_WITH_PE"
    OUTER_PAD_NO_PE = "OUTER_PAD_NO_PE"
    OVERLAY_ADD = "OVERLAY_ADD"


class Interpolation(str, Enum):
    BILINEAR = "bilinear"
    AREA = "area"
    NEAREST = "nearest"


class PositionMode(str, Enum):
    NATIVE = "NATIVE"
    INTERPOLATE = "INTERPOLATE"
    IMAGE_ONLY = "IMAGE_ONLY"


OUTER_PAD_MODES = (GeometryMode.OUTER_PAD_WITH_PE, GeometryMode.OUTER_PAD_NO_PE)


class PromptGeometry(BaseModel):
    """Canvas geometry of a pixel prompt.

    `outer_size` is the side of the composed input and `inner_size` the side of
    the image inside it. For the OUTER_PAD modes the image keeps its native
    size, so `inner_size` is the native size and `outer_size` the padded one.
    """

    model_config = ConfigDict(frozen=True)

    outer_size: int
    inner_size: int
    channels: int = 3
    mode: GeometryMode = GeometryMode.SHRINK_PAD
    interpolation: Interpolation = Interpolation.BILINEAR
    overlay_border: Optional[int] = None

    @model_validator(mode="after")
    def check_sizes(self):
        if self.outer_size <= 0 or self.inner_size <= 0 or self.channels <= 0:
            raise GeometryError(
                "geometry sizes must be positive",
                {"outer_size": self.outer_size, "inner_size": self.inner_size, "channels": self.channels},
            )
        if self.inner_size > self.outer_size:
            raise GeometryError(
                "inner size exceeds outer size",
                {"outer_size": self.outer_size, "inner_size": self.inner_size},
            )
        if self.mode in OUTER_PAD_MODES and self.inner_size == self.outer_size:
            raise GeometryError("outer padding needs a padded size larger than the image", {"size": self.outer_size})
        if self.mode == GeometryMode.OVERLAY_ADD:
            if self.inner_size != self.outer_size:
                raise GeometryError("overlay prompts cover the whole image (inner_size == outer_size)")
            if self.overlay_border is not None and not 0 < 2 * self.overlay_border <= self.outer_size:
                raise GeometryError("overlay border out of range", {"overlay_border": self.overlay_border})
        elif self.overlay_border is not None:
            raise GeometryError("overlay_border only applies to OVERLAY_ADD")
        return self


# Token prompts
class TokenPromptMode(str, Enum):
    NONE = "NONE"
    VPT_SHALLOW = "VPT_SHALLOW"
    VP_N_T = "VP_N_T"
    DEEP = "DEEP"


class TokenPromptConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: TokenPromptMode = TokenPromptMode.NONE
    num_prompts: int = Field(0, ge=0)
    position_index: Optional[int] = None
    init_std: float = Field(0.02, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def check_position(self):
        if self.mode == TokenPromptMode.VP_N_T and self.position_index is None:
            raise ValueError("VP_N_T needs position_index")
        return self


# Optimizer
class NormalizationKind(str, Enum):
    NONE = "NONE"
    L1 = "L1"
    LINF = "LINF"
    L2_PARTIAL = "L2_PARTIAL"
    L2_WHOLE = "L2_WHOLE"


class Schedule(str, Enum):
    CONSTANT = "CONSTANT"
    COSINE_DECAY = "COSINE_DECAY"


class NormalizationMode(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: NormalizationKind = NormalizationKind.L2_WHOLE
    epsilon: float = Field(1e-12, gt=0)


class UpdateRule(BaseModel):
    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(gt=0)
    schedule: Schedule = Schedule.COSINE_DECAY
    normalization: NormalizationMode = Field(default_factory=NormalizationMode)


# Input diversity
class AugmentationPolicy(BaseModel):
    model_config = ConfigDict(frozen=True)

    flip: bool = True
    flip_probability: float = Field(0.5, ge=0, le=1)
    randaug: bool = False
    randaug_magnitude: int = Field(9, ge=0, le=10)
    randaug_ops: int = Field(2, ge=1)
    cutmix: bool = False
    cutmix_beta: float = Field(1.0, gt=0)
    seed: int = 0


# Datasets
class DatasetSource(str, Enum):
    SYNTHETIC = "SYNTHETIC"
    IMAGE_FOLDER = "IMAGE_FOLDER"
    CIFAR_BINARY = "CIFAR_BINARY"


class CorruptionKind(str, Enum):
    GAUSSIAN_NOISE = "GAUSSIAN_NOISE"
    BLUR = "BLUR"
    CONTRAST = "CONTRAST"


class CorruptionSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: CorruptionKind
    severity: int = Field(ge=0, le=5)
    seed: int = 0


class DatasetSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    source: DatasetSource = DatasetSource.SYNTHETIC
    path: Optional[str] = None
    num_classes: Optional[int] = Field(4, ge=1)
    subset_fraction: float = Field(1.0, gt=0, le=1)
    corruption: Optional[CorruptionSpec] = None
    # synthetic blobs
    samples_per_class: int = Field(64, ge=1)
    test_samples_per_class: int = Field(32, ge=1)
    margin: float = Field(3.0, ge=0)
    data_seed: int = 0
    # constant frame cut from one class texture, painted over the outer ring of every image
    frame_width: int = Field(0, ge=0)
    frame_class: int = Field(0, ge=0)
    mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: Tuple[float, float, float] = (0.25, 0.25, 0.25)


# Backbone
class HeadKind(str, Enum):
    LINEAR = "LINEAR"
    COSINE = "COSINE_FIXED_CLASS_EMBEDDINGS"


class BackboneSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    native_size: int = Field(32, ge=1)
    patch_size: int = Field(4, ge=1)
    embed_dim: int = Field(64, ge=1)
    depth: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)
    mlp_ratio: int = Field(4, ge=1)
    channels: int = Field(3, ge=1)
    head: HeadKind = HeadKind.COSINE
    num_classes: int = Field(4, ge=1)
    logit_scale: float = Field(100.0, gt=0)
    seed: int = 0
    checkpoint: Optional[str] = None


class PretrainSpec(BaseModel):
    """Source task a toy backbone is trained on before the run freezes it."""

    model_config = ConfigDict(frozen=True)

    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    epochs: int = Field(ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    batch_size: int = Field(64, ge=1)


# Label mapping
class MappingMode(str, Enum):
    NONE = "NONE"
    FREQUENCY = "FREQUENCY"
    ARBITRARY = "ARBITRARY"


class CollisionPolicy(str, Enum):
    RESOLVE = "RESOLVE"
    ALLOW_DUPLICATES = "ALLOW_DUPLICATES"


# Runs
class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "evp"
    geometry: Optional[PromptGeometry] = None
    token_prompts: TokenPromptConfig = Field(default_factory=TokenPromptConfig)
    update: UpdateRule
    augmentation: AugmentationPolicy = Field(default_factory=AugmentationPolicy)
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    backbone: BackboneSpec = Field(default_factory=BackboneSpec)
    pretrain: Optional[PretrainSpec] = None
    mapping: MappingMode = MappingMode.NONE
    collision_policy: CollisionPolicy = CollisionPolicy.RESOLVE
    epochs: int = Field(ge=0)
    batch_size: int = Field(ge=1)
    eval_batch_size: int = Field(256, ge=1)
    seed: int = 0
    output_dir: Optional[str] = None


class MetricsRecord(BaseModel):
    epoch: int
    split: str
    loss: float
    accuracy: float = Field(ge=0, le=1)
    wall_time: float = 0.0
    prompt_parameters: int = 0


# API Response Types
class PredictionResponse(BaseModel):
    label: int
    probabilities: List[float]


class PromptInfoResponse(BaseModel):
    geometry: Optional[Dict[str, Any]] = None
    token_mode: str
    prompt_parameters: int


class MetricsResponse(BaseModel):
    message: str
    data: List[MetricsRecord]
