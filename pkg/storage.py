"""Named-array container shared by prompts, backbones and checkpoints.

A container is a zip of `.npy` members (shape and dtype live in each member's
header), stored uncompressed with a fixed timestamp so the same arrays always
produce the same bytes. `numpy.load` reads it like any `.npz`.
"""
import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from errors import ConfigError, OutputError

METADATA_KEY = "__metadata__"
FIXED_TIMESTAMP = (1980, 1, 1, 0, 0, 0)

PathLike = Union[str, Path]


def _npy_bytes(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    np.lib.format.write_array(buffer, np.ascontiguousarray(array), allow_pickle=False)
    return buffer.getvalue()


def save_arrays(path: PathLike, arrays: Mapping[str, np.ndarray], metadata: Optional[Mapping[str, Any]] = None) -> Path:
    path = Path(path)
    members = dict(arrays)
    if METADATA_KEY in members:
        raise ConfigError(f"'{METADATA_KEY}' is a reserved array name")
    if metadata is not None:
        encoded = json.dumps(metadata, sort_keys=True).encode("utf-8")
        members[METADATA_KEY] = np.frombuffer(encoded, dtype=np.uint8)

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
            for name in sorted(members):
                info = zipfile.ZipInfo(f"{name}.npy", date_time=FIXED_TIMESTAMP)
                info.external_attr = 0o644 << 16
                archive.writestr(info, _npy_bytes(members[name]))
    except OSError as e:
        raise OutputError(f"could not write {path}: {e}") from e
    return path


def load_arrays(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"container not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        arrays = {name: data[name] for name in data.files}
    raw = arrays.pop(METADATA_KEY, None)
    metadata = json.loads(raw.tobytes().decode("utf-8")) if raw is not None else {}
    return arrays, metadata


def checksum(arrays: Mapping[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in sorted(arrays):
        array = np.ascontiguousarray(arrays[name])
        digest.update(name.encode("utf-8"))
        digest.update(array.dtype.str.encode("ascii"))
        digest.update(str(array.shape).encode("ascii"))
        digest.update(array.tobytes())
    return digest.hexdigest()


def write_json(path: PathLike, payload: Mapping[str, Any]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise OutputError(f"could not write {path}: {e}") from e
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    return json.loads(path.read_text())
