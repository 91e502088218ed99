"""Checkpoint persistence: a JSON manifest plus a float32 little-endian payload.

``checkpoint.json`` lists the format version, the model config and every
tensor's name, shape and byte offset; ``checkpoint.bin`` holds the tensors
row-major and back to back in manifest order. Batch-norm running statistics
are stored alongside the trainable tensors.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, ModelParams, init_params

FORMAT_VERSION = 1
MANIFEST = "checkpoint.json"
PAYLOAD = "checkpoint.bin"
_DTYPE = np.dtype("<f4")


def named_arrays(params: ModelParams) -> dict[str, np.ndarray]:
    """Every persisted array by name, in manifest order."""
    out = {name: t.data for name, t in params.tensors().items()}
    for name, state in params.norm_states().items():
        out[f"{name}.running_mean"] = state.running_mean
        out[f"{name}.running_var"] = state.running_var
    return out


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(params: ModelParams) -> tuple[bytes, bytes]:
    """Manifest and payload bytes for ``params``."""
    entries, blobs, offset = [], [], 0
    for name, arr in named_arrays(params).items():
        blob = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": params.config.to_dict(),
        "tensors": entries,
    }
    return (json.dumps(manifest, indent=2) + "\n").encode("utf-8"), b"".join(blobs)


def save_checkpoint(params: ModelParams, path) -> Path:
    """Write ``checkpoint.json`` and ``checkpoint.bin`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest, payload = encode_checkpoint(params)
    # payload first so a reader never sees a manifest without its data
    atomic_write(path / PAYLOAD, payload)
    atomic_write(path / MANIFEST, manifest)
    return path


def _model_config(d: dict) -> ModelConfig:
    try:
        return ModelConfig(**d)
    except TypeError as e:
        raise CheckpointError(f"bad model config in manifest: {e}") from None


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        payload = (path / PAYLOAD).read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"missing checkpoint file: {e.filename}") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"manifest is not valid JSON: {e}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version!r}, expected {FORMAT_VERSION}")

    params = init_params(_model_config(manifest["model_config"]), seed=0)
    expected = named_arrays(params)
    listed = [e["name"] for e in manifest["tensors"]]
    if len(set(listed)) != len(listed):
        raise CheckpointError("duplicate tensor names in manifest")
    if set(listed) != set(expected):
        missing = sorted(set(expected) - set(listed))
        extra = sorted(set(listed) - set(expected))
        raise CheckpointError(f"manifest tensors do not match model: missing {missing}, unexpected {extra}")

    end = 0
    for entry in manifest["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        target = expected[name]
        if shape != target.shape:
            raise CheckpointError(f"tensor {name}: shape {shape} does not match model shape {target.shape}")
        nbytes = int(np.prod(shape)) * _DTYPE.itemsize
        if offset != end:
            raise CheckpointError(f"tensor {name}: offset {offset}, expected {end}")
        if offset + nbytes > len(payload):
            raise CheckpointError(f"tensor {name}: payload truncated ({len(payload)} bytes, need {offset + nbytes})")
        # in-place so the arrays referenced by params are the ones filled
        target[...] = np.frombuffer(payload, dtype=_DTYPE, count=nbytes // 4, offset=offset).reshape(shape)
        end = offset + nbytes
    if end != len(payload):
        raise CheckpointError(f"payload has {len(payload) - end} trailing bytes after tensor {listed[-1]}")
    return params
