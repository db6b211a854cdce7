import json

import pytest
import yaml

from backbone import load_backbone
from cli import build_parser, load_run_config, main
from errors import ConfigError
from schemas import GeometryMode
from trainer import CHECKPOINT_DIR, FINAL_CHECKPOINT, METRICS_FILE, prepare_backbone

TINY = {
    "name": "cli",
    "epochs": 1,
    "batch_size": 16,
    "update": {"learning_rate": 0.05},
    "augmentation": {"flip": False},
    "geometry": {"outer_size": 16, "inner_size": 12},
    "dataset": {"num_classes": 4, "samples_per_class": 8, "test_samples_per_class": 4, "data_seed": 3},
    "backbone": {"native_size": 16, "patch_size": 4, "embed_dim": 32, "depth": 2, "heads": 4, "num_classes": 4},
}


def _write(tmp_path, payload, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(payload))
    return str(path)


@pytest.fixture
def config_file(tmp_path):
    return _write(tmp_path, TINY)


@pytest.fixture
def run_dir(tmp_path):
    return tmp_path / "run"


def _train(config_file, run_dir, *extra):
    return main(["train", "--config", config_file, "--output-dir", str(run_dir), *extra])


def test_train_writes_a_run(config_file, run_dir, capsys):
    assert _train(config_file, run_dir) == 0
    assert (run_dir / METRICS_FILE).is_file()
    assert (run_dir / CHECKPOINT_DIR / FINAL_CHECKPOINT).is_file()
    assert "✅" in capsys.readouterr().out


def test_unknown_flag_is_a_usage_error(config_file):
    assert main(["train", "--config", config_file, "--warp-speed"]) == 2


def test_missing_dataset_exits_with_dataset_code(config_file, run_dir, tmp_path):
    code = _train(config_file, run_dir, "--dataset-source", "IMAGE_FOLDER", "--dataset-path", str(tmp_path / "missing"))
    assert code == 4


def test_missing_hyperparameter_is_a_config_error(tmp_path, run_dir, capsys):
    payload = {k: v for k, v in TINY.items() if k != "epochs"}
    assert _train(_write(tmp_path, payload), run_dir) == 3
    assert "epochs" in capsys.readouterr().err


def test_bad_yaml_is_a_config_error(tmp_path, run_dir):
    path = tmp_path / "broken.yaml"
    path.write_text("epochs: [1, 2\n")
    assert _train(str(path), run_dir) == 3


def test_eval_reproduces_the_last_test_record(config_file, run_dir, capsys):
    assert _train(config_file, run_dir, "--epochs", "2") == 0
    last = json.loads((run_dir / METRICS_FILE).read_text().splitlines()[-1])
    capsys.readouterr()

    assert main(["eval", "--checkpoint", str(run_dir / CHECKPOINT_DIR / FINAL_CHECKPOINT)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert list(printed) == list(last)
    assert (printed["epoch"], printed["split"], printed["accuracy"]) == (last["epoch"], last["split"], last["accuracy"])
    assert printed["loss"] == pytest.approx(last["loss"], rel=1e-6)


def test_eval_without_checkpoint_or_zero_shot(config_file):
    assert main(["eval", "--config", config_file]) == 3


def test_zero_shot_eval(config_file, capsys):
    assert main(["eval", "--zero-shot", "--config", config_file]) == 0
    assert json.loads(capsys.readouterr().out)["prompt_parameters"] == 0


def test_eval_corruption_flag(config_file, run_dir, capsys):
    _train(config_file, run_dir)
    checkpoint = str(run_dir / CHECKPOINT_DIR / FINAL_CHECKPOINT)
    capsys.readouterr()
    assert main(["eval", "--checkpoint", checkpoint, "--eval-corruption", "gaussian_noise:3"]) == 0
    assert main(["eval", "--checkpoint", checkpoint, "--eval-corruption", "fog:3"]) == 3


def test_sweep_image_sizes(config_file, run_dir, capsys):
    code = main(["sweep", "--config", config_file, "--output-dir", str(run_dir), "--image-size", "16,12,8,4"])
    assert code == 0
    rows = capsys.readouterr().out.splitlines()[2:]
    assert len(rows) == 4
    params = [int(row.split()[1]) for row in rows]
    assert params == sorted(params)
    assert (run_dir / "sweep-image-size.txt").is_file()


def test_export_prompt(config_file, run_dir, tmp_path):
    _train(config_file, run_dir)
    checkpoint = str(run_dir / CHECKPOINT_DIR / FINAL_CHECKPOINT)
    image, arrays = tmp_path / "prompt.png", tmp_path / "prompt.npz"
    assert main(["export-prompt", "--checkpoint", checkpoint, "--output", str(image), "--arrays", str(arrays)]) == 0
    assert image.is_file() and arrays.is_file()


def test_export_needs_a_pixel_prompt(config_file, run_dir, tmp_path):
    _train(config_file, run_dir, "--geometry-mode", "NONE", "--token-mode", "VPT_SHALLOW", "--num-prompts", "2")
    checkpoint = str(run_dir / CHECKPOINT_DIR / FINAL_CHECKPOINT)
    assert main(["export-prompt", "--checkpoint", checkpoint, "--output", str(tmp_path / "p.png")]) == 3


def test_map_labels(config_file, run_dir, tmp_path):
    output = tmp_path / "mapping.tsv"
    code = main(
        ["map-labels", "--config", config_file, "--output-dir", str(run_dir), "--set", "backbone.num_classes=10", "--output", str(output)]
    )
    assert code == 0
    lines = output.read_text().splitlines()
    assert lines[0] == "downstream\tpretrained\ttop_frequency"
    assert len(lines) == 5
    assert len({line.split("\t")[1] for line in lines[1:]}) == 4


def test_probe(config_file, capsys):
    assert main(["probe", "--config", config_file, "--probe-epochs", "20"]) == 0
    assert json.loads(capsys.readouterr().out)["parameters"] == 32 * 4 + 4


def test_pretrained_backbone_feeds_a_run(config_file, run_dir, tmp_path):
    backbone_file = tmp_path / "pretrained.npz"
    assert main(["pretrain", "--config", config_file, "--output-dir", str(run_dir), "--output", str(backbone_file)]) == 0
    assert not any(p.requires_grad for p in load_backbone(backbone_file).parameters())
    assert _train(config_file, tmp_path / "prompted", "--backbone-checkpoint", str(backbone_file)) == 0


def test_pretrain_uses_the_source_task_block(tmp_path, run_dir):
    payload = dict(TINY, pretrain={"epochs": 1, "batch_size": 16, "dataset": dict(TINY["dataset"], data_seed=8)})
    config_file = _write(tmp_path, payload)
    backbone_file = tmp_path / "source.npz"
    assert main(["pretrain", "--config", config_file, "--output-dir", str(run_dir), "--output", str(backbone_file)]) == 0
    expected = prepare_backbone(load_run_config(build_parser().parse_args(["train", "--config", config_file])))
    assert load_backbone(backbone_file).checksum() == expected.checksum()


def test_flags_and_set_override_the_file(config_file):
    args = build_parser().parse_args(
        ["train", "--config", config_file, "--lr", "0.2", "--set", "seed=7", "--set", "update.schedule=CONSTANT", "--cutmix"]
    )
    config = load_run_config(args)
    assert config.update.learning_rate == 0.2
    assert config.seed == 7
    assert config.update.schedule.value == "CONSTANT"
    assert config.augmentation.cutmix and not config.augmentation.flip


def test_geometry_mode_fills_the_canvas(config_file, tmp_path):
    bare = _write(tmp_path, {k: v for k, v in TINY.items() if k != "geometry"}, "bare.yaml")
    args = build_parser().parse_args(["train", "--config", bare, "--geometry-mode", "OUTER_PAD_NO_PE"])
    geometry = load_run_config(args).geometry
    assert geometry.mode == GeometryMode.OUTER_PAD_NO_PE
    assert (geometry.outer_size, geometry.inner_size) == (24, 16)

    args = build_parser().parse_args(["train", "--config", config_file, "--geometry-mode", "NONE"])
    assert load_run_config(args).geometry is None


def test_malformed_set_is_rejected(config_file):
    args = build_parser().parse_args(["train", "--config", config_file, "--set", "epochs"])
    with pytest.raises(ConfigError):
        load_run_config(args)
