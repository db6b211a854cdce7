import itertools
import json
import math
from unittest.mock import patch

import pytest
import torch

from backbone import FrozenBackbone
from errors import ConfigError, GeometryError, IntegrityError, OutputError
from image_data import ImageDataset, load_split
from prompt_geometry import PromptTemplate
from schemas import (
    AugmentationPolicy,
    BackboneSpec,
    CorruptionKind,
    CorruptionSpec,
    DatasetSpec,
    GeometryMode,
    HeadKind,
    MappingMode,
    PretrainSpec,
    PromptGeometry,
    RunConfig,
    Schedule,
    TokenPromptConfig,
    TokenPromptMode,
    UpdateRule,
)
from trainer import (
    BEST_CHECKPOINT,
    CHECKPOINT_DIR,
    FINAL_CHECKPOINT,
    MANIFEST_FILE,
    MAPPING_FILE,
    METRIC_FIELDS,
    METRICS_FILE,
    TIMINGS_FILE,
    PromptedClassifier,
    evaluate,
    evaluate_checkpoint,
    linear_probe,
    load_checkpoint,
    prepare_backbone,
    pretrain_backbone,
    read_metrics,
    train,
    zero_shot,
)


def test_zero_epochs_still_writes_a_complete_run(tiny_config):
    result = train(tiny_config.model_copy(update={"epochs": 0}))
    assert result.records == []
    assert result.best_epoch is None
    assert (result.run_dir / METRICS_FILE).read_text() == ""
    for name in (FINAL_CHECKPOINT, BEST_CHECKPOINT):
        assert (result.run_dir / CHECKPOINT_DIR / name).is_file()
    assert (result.run_dir / MANIFEST_FILE).is_file()


def test_training_lowers_the_train_loss(tiny_config):
    config = tiny_config.model_copy(update={"epochs": 40, "batch_size": 32, "update": UpdateRule(learning_rate=0.5)})
    result = train(config)
    train_records = [r for r in result.records if r.split == "train"]
    assert len(train_records) == 40
    assert train_records[-1].loss < train_records[0].loss


def test_runs_are_reproducible(tiny_config):
    first = train(tiny_config)
    metrics = (first.run_dir / METRICS_FILE).read_bytes()
    final = (first.run_dir / CHECKPOINT_DIR / FINAL_CHECKPOINT).read_bytes()

    second = train(tiny_config)
    assert (second.run_dir / METRICS_FILE).read_bytes() == metrics
    assert (second.run_dir / CHECKPOINT_DIR / FINAL_CHECKPOINT).read_bytes() == final


def test_metrics_lines_have_a_fixed_field_order(tiny_config):
    result = train(tiny_config)
    lines = (result.run_dir / METRICS_FILE).read_text().splitlines()
    assert len(lines) == 2 * tiny_config.epochs
    assert list(json.loads(lines[0])) == list(METRIC_FIELDS)
    assert [json.loads(line)["split"] for line in lines] == ["train", "test"] * tiny_config.epochs
    timing = json.loads((result.run_dir / TIMINGS_FILE).read_text().splitlines()[0])
    assert timing["wall_time"] >= 0
    assert [r.loss for r in read_metrics(result.run_dir)] == [r.loss for r in result.records]


@pytest.mark.parametrize(
    "geometry,tokens",
    [
        (PromptGeometry(outer_size=16, inner_size=12), TokenPromptConfig()),
        (None, TokenPromptConfig(mode=TokenPromptMode.VPT_SHALLOW, num_prompts=2)),
        (None, TokenPromptConfig(mode=TokenPromptMode.VP_N_T, num_prompts=2, position_index=1)),
        (None, TokenPromptConfig(mode=TokenPromptMode.DEEP, num_prompts=2)),
    ],
)
def test_frozen_weights_survive_every_prompt_kind(tiny_config, tiny_spec, geometry, tokens):
    config = tiny_config.model_copy(update={"geometry": geometry, "token_prompts": tokens, "epochs": 1})
    result = train(config)
    assert result.backbone_checksum == FrozenBackbone(tiny_spec).checksum()
    assert result.classifier.backbone.checksum() == result.backbone_checksum


def test_checkpoint_reproduces_the_last_test_record(tiny_config):
    result = train(tiny_config)
    record = evaluate_checkpoint(result.checkpoints["final"])
    last = result.records[-1]
    assert record.split == "test" and record.epoch == last.epoch
    assert record.accuracy == last.accuracy
    assert record.loss == pytest.approx(last.loss, rel=1e-6)


def test_checkpoint_logits_are_bit_exact(tiny_config):
    result = train(tiny_config)
    classifier, config, metadata = load_checkpoint(result.checkpoints["final"])
    images = load_split(config.dataset, "test", 16).images
    assert torch.equal(classifier.logits(images), result.classifier.logits(images))
    assert metadata["prompt_parameters"] == result.classifier.prompt_parameters()


def test_checkpoint_against_a_different_backbone_is_rejected(tiny_config, tiny_spec):
    result = train(tiny_config.model_copy(update={"epochs": 1}))
    other = FrozenBackbone(tiny_spec.model_copy(update={"seed": 1}))
    with pytest.raises(IntegrityError):
        load_checkpoint(result.checkpoints["final"], backbone=other)


def test_severity_zero_corruption_changes_nothing(tiny_config, tiny_backbone):
    test_data = load_split(tiny_config.dataset, "test", 16)
    classifier = PromptedClassifier(tiny_backbone)
    clean = evaluate(classifier, test_data)
    corrupted = evaluate(classifier, test_data, corruption=CorruptionSpec(kind=CorruptionKind.BLUR, severity=0))
    assert (corrupted.loss, corrupted.accuracy) == (clean.loss, clean.accuracy)


def test_random_logits_score_at_chance(tiny_backbone):
    generator = torch.Generator().manual_seed(0)
    n = 4000
    data = ImageDataset(torch.zeros(n, 3, 16, 16), torch.arange(n) % 4, 4)
    classifier = PromptedClassifier(tiny_backbone)
    with patch.object(classifier, "logits", side_effect=lambda raw: torch.randn(raw.shape[0], 4, generator=generator)):
        record = evaluate(classifier, data, batch_size=500)
    band = 4 * math.sqrt(0.25 * 0.75 / n)
    assert abs(record.accuracy - 0.25) < band


def test_class_count_mismatch_needs_a_mapping(tiny_config):
    config = tiny_config.model_copy(update={"dataset": tiny_config.dataset.model_copy(update={"num_classes": 3})})
    with pytest.raises(ConfigError):
        train(config)


def test_geometry_must_fit_the_backbone(tiny_config):
    config = tiny_config.model_copy(update={"geometry": PromptGeometry(outer_size=20, inner_size=12)})
    with pytest.raises(GeometryError):
        train(config)


def test_frequency_mapping_run(tiny_config, tiny_spec):
    config = tiny_config.model_copy(
        update={
            "backbone": tiny_spec.model_copy(update={"num_classes": 10}),
            "mapping": MappingMode.FREQUENCY,
            "epochs": 1,
        }
    )
    result = train(config)
    assert result.mapping.num_downstream == 4
    assert len(set(result.mapping.assignment)) == 4
    assert (result.run_dir / MAPPING_FILE).is_file()
    assert result.classifier.num_outputs == 4
    classifier, _, _ = load_checkpoint(result.checkpoints["final"])
    assert classifier.mapping.assignment == result.mapping.assignment


def test_unwritable_output_dir(tiny_config, tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    with pytest.raises(OutputError):
        train(tiny_config.model_copy(update={"output_dir": str(blocker / "run")}))


def test_changed_weights_are_reported(tiny_config):
    readings = itertools.chain(["before"], itertools.repeat("after"))
    with patch.object(FrozenBackbone, "checksum", side_effect=readings):
        with pytest.raises(IntegrityError):
            train(tiny_config.model_copy(update={"epochs": 1}))


def test_zero_shot_has_no_learned_parameters(tiny_config):
    record = zero_shot(tiny_config)
    assert record.prompt_parameters == 0
    assert record.split == "test"
    assert 0 <= record.accuracy <= 1


def test_linear_probe(tiny_config, tiny_backbone):
    train_data = load_split(tiny_config.dataset, "train", 16)
    test_data = load_split(tiny_config.dataset, "test", 16)
    result = linear_probe(tiny_backbone, train_data, test_data, epochs=50)
    assert result.parameters == 32 * 4 + 4
    assert result.losses[-1] < result.losses[0]
    assert 0 <= result.test_accuracy <= 1
    assert not any(p.requires_grad for p in tiny_backbone.parameters())


def test_pretrained_backbone_comes_back_frozen(tiny_config, tiny_spec):
    data = load_split(tiny_config.dataset, "train", 16)
    backbone = pretrain_backbone(tiny_spec, data, epochs=2, batch_size=16)
    assert not any(p.requires_grad for p in backbone.parameters())
    assert not backbone.training
    assert backbone.num_classes == data.num_classes
    untrained = FrozenBackbone(backbone.spec)
    assert backbone.checksum() != untrained.checksum()


def test_constant_schedule_run(tiny_config):
    config = tiny_config.model_copy(update={"update": UpdateRule(learning_rate=0.05, schedule=Schedule.CONSTANT), "epochs": 1})
    assert len(train(config).records) == 2


def test_probabilities_sum_to_one(tiny_backbone, tiny_geometry):
    classifier = PromptedClassifier(tiny_backbone, PromptTemplate(tiny_geometry))
    probabilities = classifier.probabilities(torch.rand(6, 3, 16, 16, generator=torch.Generator().manual_seed(0)))
    assert probabilities.shape == (6, 4)
    assert torch.all(probabilities >= 0)
    assert torch.allclose(probabilities.sum(dim=-1), torch.ones(6), atol=1e-6)


def test_prompt_centre_is_untouched_by_a_whole_run(tiny_config):
    config = tiny_config.model_copy(update={"epochs": 5, "batch_size": 8, "update": UpdateRule(learning_rate=0.5)})
    initial = PromptTemplate(config.geometry, seed=config.seed)
    result = train(config)
    centre = ~result.prompt.mask.bool()
    assert torch.equal(result.prompt.weight[centre], initial.weight[centre])
    assert not torch.equal(result.prompt.weight[~centre], initial.weight[~centre])


@pytest.mark.parametrize(
    "geometry,tokens",
    [
        (PromptGeometry(outer_size=16, inner_size=12), TokenPromptConfig()),
        (None, TokenPromptConfig(mode=TokenPromptMode.VPT_SHALLOW, num_prompts=2)),
        (None, TokenPromptConfig(mode=TokenPromptMode.VP_N_T, num_prompts=2, position_index=1)),
        (None, TokenPromptConfig(mode=TokenPromptMode.DEEP, num_prompts=2)),
    ],
)
def test_frozen_weights_hold_for_five_hundred_steps(tiny_config, tiny_spec, geometry, tokens):
    # 125 images per class at batch size 1 is 500 optimizer steps
    dataset = tiny_config.dataset.model_copy(update={"samples_per_class": 125})
    config = tiny_config.model_copy(
        update={"geometry": geometry, "token_prompts": tokens, "dataset": dataset, "epochs": 1, "batch_size": 1}
    )
    result = train(config)
    fresh = FrozenBackbone(tiny_spec).state_dict()
    for name, tensor in result.classifier.backbone.state_dict().items():
        assert torch.equal(tensor, fresh[name]), name
    assert result.backbone_checksum == FrozenBackbone(tiny_spec).checksum()


def test_pretrain_block_builds_the_same_frozen_backbone_every_time(tiny_config, linear_spec):
    source = tiny_config.dataset.model_copy(update={"data_seed": 5})
    config = tiny_config.model_copy(update={"pretrain": PretrainSpec(dataset=source, epochs=2, batch_size=16)})
    first, again = prepare_backbone(config), prepare_backbone(config)
    assert first.checksum() == again.checksum()
    assert first.spec.head == HeadKind.LINEAR
    assert first.checksum() != FrozenBackbone(linear_spec).checksum()
    assert not any(p.requires_grad for p in first.parameters())

    assert train(config.model_copy(update={"epochs": 1})).backbone_checksum == first.checksum()


def test_prompt_recovers_a_framed_task_the_frozen_model_gets_wrong(tmp_path):
    # the backbone learns the clean blobs; downstream every image sits inside a
    # class-0 frame that covers three quarters of the patches
    source = DatasetSpec(num_classes=4, samples_per_class=128, test_samples_per_class=32, margin=6.0)
    framed = source.model_copy(update={"samples_per_class": 64, "frame_width": 8, "frame_class": 0})
    config = RunConfig(
        name="framed",
        geometry=PromptGeometry(mode=GeometryMode.OUTER_PAD_NO_PE, outer_size=48, inner_size=32),
        update=UpdateRule(learning_rate=1.0),
        augmentation=AugmentationPolicy(flip=False),
        dataset=framed,
        backbone=BackboneSpec(native_size=32, patch_size=4, embed_dim=32, depth=2, heads=4, head=HeadKind.LINEAR, num_classes=4),
        pretrain=PretrainSpec(dataset=source, epochs=20, batch_size=32),
        epochs=20,
        batch_size=16,
        output_dir=str(tmp_path / "framed"),
    )
    backbone = prepare_backbone(config)
    clean = evaluate(PromptedClassifier(backbone), load_split(source, "test", 32))
    assert clean.accuracy >= 0.9

    baseline = zero_shot(config, backbone)
    n = 4 * framed.test_samples_per_class
    assert abs(baseline.accuracy - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / n)

    result = train(config, backbone)
    best = max(r.accuracy for r in result.records if r.split == "test")
    assert best >= 0.9
    assert result.backbone_checksum == backbone.checksum()
