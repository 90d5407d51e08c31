"""Checkpoint file format.

Layout: magic ``TLM1`` (4 bytes), little-endian uint64 header length, a
UTF-8 JSON header, then the concatenated little-endian float32 tensor
payload. The header carries the model config and a tensor manifest
(name, shape, dtype, byte offset into the payload). Round-trips preserve
the float32 tensors bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import BadMagicError, ShapeMismatchError, TruncatedFileError
from .model import ModelCheckpoint, ModelConfig

MAGIC = b"TLM1"
_LEN = struct.Struct("<Q")


def save_checkpoint(model: ModelCheckpoint, path) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name in model.config.tensor_names():
        tensor = np.ascontiguousarray(model.tensors[name], dtype="<f4")
        blob = tensor.tobytes()
        manifest.append(
            {"name": name, "shape": list(tensor.shape), "dtype": "f32", "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"config": asdict(model.config), "tensors": manifest},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}")
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: missing header length")
    (header_len,) = _LEN.unpack_from(raw, 4)
    header_end = 12 + header_len
    if len(raw) < header_end:
        raise TruncatedFileError(f"{path}: header truncated")
    try:
        header = json.loads(raw[12:header_end].decode("utf-8"))
        config = ModelConfig(**header["config"])
        manifest = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ShapeMismatchError(f"{path}: malformed header: {exc}") from exc

    payload = raw[header_end:]
    tensors = {}
    expected_end = 0
    for entry in manifest:
        shape = tuple(entry["shape"])
        if entry.get("dtype") != "f32":
            raise ShapeMismatchError(f"{path}: unsupported dtype {entry.get('dtype')}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        stop = start + 4 * count
        expected_end = max(expected_end, stop)
        if stop > len(payload):
            raise TruncatedFileError(
                f"{path}: payload ends before tensor {entry['name']}"
            )
        tensors[entry["name"]] = np.frombuffer(
            payload, dtype="<f4", count=count, offset=start
        ).reshape(shape).copy()
    if expected_end != len(payload):
        raise ShapeMismatchError(
            f"{path}: payload has {len(payload)} bytes, manifest covers {expected_end}"
        )
    try:
        return ModelCheckpoint(config, tensors)
    except Exception as exc:
        raise ShapeMismatchError(f"{path}: {exc}") from exc
