"""TEVM checkpoint container.

Layout (little-endian): magic ``b"TEVM"``, u32 length of the JSON header,
the UTF-8 JSON header, then the concatenated float32 tensor payload. The
header holds ``{"config": ..., "tensors": [{"name", "shape", "offset"}]}``
where ``offset`` is in bytes from the start of the payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TEVM"


class CheckpointFormatError(ValueError):
    pass


def encode_checkpoint(config: dict, tensors: dict[str, np.ndarray], extra: dict | None = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {"config": config, "tensors": manifest}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(blob)) + blob + b"".join(chunks)


def decode_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise CheckpointFormatError("bad magic: not a TEVM checkpoint")
    if len(data) < 8:
        raise CheckpointFormatError("truncated header length")
    (hlen,) = struct.unpack_from("<I", data, 4)
    if len(data) < 8 + hlen:
        raise CheckpointFormatError("truncated JSON header")
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable JSON header: {exc}") from exc
    payload = memoryview(data)[8 + hlen:]
    tensors = {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointFormatError(f"tensor {entry['name']!r} runs past the end of the payload")
        tensors[entry["name"]] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
    return header, tensors


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray], extra: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(config, tensors, extra))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
