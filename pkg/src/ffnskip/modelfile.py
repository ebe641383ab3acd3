"""Binary model container: JSON header plus raw little-endian float32 payload.

Layout on disk:

    bytes 0..3    magic b"FSKM"
    bytes 4..7    header length (uint32, little-endian)
    then          UTF-8 JSON header
    then          payload: row-major float32 tensor data

Header document::

    {
      "format_version": 1,
      "config": { ...ModelConfig fields... },
      "tensors": [{"name": str, "shape": [int, ...], "byte_offset": int}, ...],
      "payload_bytes": int
    }

Offsets are relative to payload start, ascending and non-overlapping; every
tensor of the architecture appears exactly once. The format is bit-exact:
save -> load round-trips preserve every tensor byte.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import (
    FLOAT,
    ModelConfig,
    Weights,
    freeze_weights,
    tensor_shapes,
    weights_from_dict,
    weights_to_dict,
)

MAGIC = b"FSKM"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    """Base class for malformed model files."""


class UnknownFormatVersionError(ModelFileError):
    pass


class MissingTensorError(ModelFileError):
    pass


class TensorShapeError(ModelFileError):
    pass


class TruncatedPayloadError(ModelFileError):
    pass


def save_model(path: str | Path, config: ModelConfig, weights: Weights) -> None:
    """Write config and weights; tensors are laid out in manifest order."""
    tensors = weights_to_dict(weights)
    manifest = []
    offset = 0
    chunks = []
    for name, shape in tensor_shapes(config).items():
        data = np.ascontiguousarray(tensors[name], dtype=FLOAT)
        raw = data.astype("<f4", copy=False).tobytes()
        manifest.append({"name": name, "shape": list(shape), "byte_offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": asdict(config),
        "tensors": manifest,
        "payload_bytes": offset,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(4, "little"))
        fh.write(header_bytes)
        for raw in chunks:
            fh.write(raw)


def load_model(path: str | Path) -> tuple[ModelConfig, Weights]:
    """Parse, validate, and materialize every tensor with its declared shape."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ModelFileError(f"{path}: not a model file (bad magic)")
    header_len = int.from_bytes(blob[4:8], "little")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise UnknownFormatVersionError(
            f"{path}: format_version {header.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    config = ModelConfig(**header["config"])
    payload = blob[8 + header_len :]
    declared = header["payload_bytes"]
    if len(payload) < declared:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload)} bytes, header declares {declared}"
        )

    expected = tensor_shapes(config)
    entries = {entry["name"]: entry for entry in header["tensors"]}
    if len(entries) != len(header["tensors"]):
        raise ModelFileError(f"{path}: duplicate tensor names in manifest")
    for name in expected:
        if name not in entries:
            raise MissingTensorError(f"{path}: manifest omits tensor {name!r}")
    for name in entries:
        if name not in expected:
            raise ModelFileError(f"{path}: manifest names unknown tensor {name!r}")

    prev_end = 0
    tensors: dict[str, np.ndarray] = {}
    for entry in sorted(header["tensors"], key=lambda e: e["byte_offset"]):
        name = entry["name"]
        shape = tuple(entry["shape"])
        if shape != expected[name]:
            raise TensorShapeError(
                f"{path}: tensor {name!r} declared {shape}, architecture requires {expected[name]}"
            )
        start = entry["byte_offset"]
        nbytes = int(np.prod(shape)) * 4
        if start < prev_end:
            raise ModelFileError(f"{path}: tensor {name!r} overlaps the previous tensor")
        if start + nbytes > declared:
            raise TruncatedPayloadError(
                f"{path}: tensor {name!r} extends past declared payload"
            )
        tensors[name] = (
            np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start)
            .astype(FLOAT, copy=True)
            .reshape(shape)
        )
        prev_end = start + nbytes

    weights = weights_from_dict(config, tensors)
    freeze_weights(weights)
    return config, weights
