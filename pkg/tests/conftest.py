import os
import sys

import pytest

# Ensure project root is on sys.path
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from backbone import FrozenBackbone  # noqa: E402
from schemas import (  # noqa: E402
    AugmentationPolicy,
    BackboneSpec,
    DatasetSpec,
    HeadKind,
    PromptGeometry,
    RunConfig,
    UpdateRule,
)


@pytest.fixture
def tiny_spec() -> BackboneSpec:
    return BackboneSpec(native_size=16, patch_size=4, embed_dim=32, depth=2, heads=4, num_classes=4, seed=0)


@pytest.fixture
def linear_spec(tiny_spec) -> BackboneSpec:
    return tiny_spec.model_copy(update={"head": HeadKind.LINEAR})


@pytest.fixture
def tiny_backbone(tiny_spec) -> FrozenBackbone:
    return FrozenBackbone(tiny_spec)


@pytest.fixture
def tiny_dataset() -> DatasetSpec:
    return DatasetSpec(num_classes=4, samples_per_class=8, test_samples_per_class=4, data_seed=3)


@pytest.fixture
def tiny_geometry() -> PromptGeometry:
    return PromptGeometry(outer_size=16, inner_size=12)


@pytest.fixture
def tiny_config(tmp_path, tiny_spec, tiny_dataset, tiny_geometry) -> RunConfig:
    return RunConfig(
        name="tiny",
        geometry=tiny_geometry,
        update=UpdateRule(learning_rate=0.05),
        augmentation=AugmentationPolicy(flip=False),
        dataset=tiny_dataset,
        backbone=tiny_spec,
        epochs=2,
        batch_size=16,
        seed=0,
        output_dir=str(tmp_path / "tiny"),
    )
