import numpy as np
import pytest

import storage
from errors import ConfigError, OutputError


def _arrays():
    return {"weights": np.arange(12, dtype=np.float32).reshape(3, 4), "mask": np.array([True, False])}


def test_round_trip_keeps_arrays_and_metadata(tmp_path):
    path = storage.save_arrays(tmp_path / "a.npz", _arrays(), {"epoch": 3, "name": "run"})
    arrays, metadata = storage.load_arrays(path)
    assert set(arrays) == {"weights", "mask"}
    assert np.array_equal(arrays["weights"], _arrays()["weights"])
    assert arrays["mask"].dtype == np.bool_
    assert metadata == {"epoch": 3, "name": "run"}


def test_same_arrays_give_same_bytes(tmp_path):
    first = storage.save_arrays(tmp_path / "a.npz", _arrays(), {"k": 1})
    second = storage.save_arrays(tmp_path / "b.npz", dict(reversed(list(_arrays().items()))), {"k": 1})
    assert first.read_bytes() == second.read_bytes()


def test_checksum_tracks_values_and_shapes():
    base = storage.checksum(_arrays())
    assert base == storage.checksum(_arrays())
    changed = _arrays()
    changed["weights"][0, 0] = 1.0
    assert storage.checksum(changed) != base
    reshaped = _arrays()
    reshaped["weights"] = reshaped["weights"].reshape(4, 3)
    assert storage.checksum(reshaped) != base


def test_metadata_name_is_reserved(tmp_path):
    with pytest.raises(ConfigError):
        storage.save_arrays(tmp_path / "a.npz", {storage.METADATA_KEY: np.zeros(1)})


def test_missing_files(tmp_path):
    with pytest.raises(ConfigError):
        storage.load_arrays(tmp_path / "nope.npz")
    with pytest.raises(ConfigError):
        storage.read_json(tmp_path / "nope.json")


def test_unwritable_destination_is_an_output_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OutputError):
        storage.save_arrays(blocker / "a.npz", _arrays())
    with pytest.raises(OutputError):
        storage.write_json(blocker / "m.json", {"a": 1})


def test_json_round_trip(tmp_path):
    path = storage.write_json(tmp_path / "m.json", {"b": [1, 2], "a": "x"})
    assert storage.read_json(path) == {"a": "x", "b": [1, 2]}
