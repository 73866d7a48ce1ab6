"""Binary weight checkpoints.

Wire format: magic bytes ``DALA`` + version byte 0x01, then one record
per tensor: u16 name length (little-endian), UTF-8 name, u8 rank, rank
u32 dims (little-endian), then the raw 32-bit little-endian floats.

The model architecture rides inside the same format as a reserved record
named ``__meta__/architecture``: a rank-1 tensor whose float values are
the UTF-8 bytes of the architecture JSON (byte values are exact in
float32, so the round trip is lossless).  Readers that do not know the
convention simply see one extra tensor.
"""

from __future__ import annotations

import io
import struct
from typing import Optional

import numpy as np

from .blocks import Backbone, BackboneConfig
from .exceptions import CheckpointFormatError
from .imageops import atomic_write_bytes

__all__ = [
    "MAGIC",
    "VERSION",
    "ARCHITECTURE_RECORD",
    "write_checkpoint",
    "read_checkpoint",
    "save_model",
    "load_model",
    "load_weights_into",
]

MAGIC = b"DALA"
VERSION = 1
ARCHITECTURE_RECORD = "__meta__/architecture"


def _encode_record(name: str, array: np.ndarray) -> bytes:
    name_bytes = name.encode("utf-8")
    if len(name_bytes) > 0xFFFF:
        raise CheckpointFormatError(f"tensor name too long: {name!r}")
    if array.ndim > 0xFF:
        raise CheckpointFormatError(f"tensor rank {array.ndim} exceeds format limit")
    out = bytearray()
    out += struct.pack("<H", len(name_bytes))
    out += name_bytes
    out += struct.pack("<B", array.ndim)
    out += struct.pack(f"<{array.ndim}I", *array.shape)
    out += np.ascontiguousarray(array, dtype="<f4").tobytes()
    return bytes(out)


def write_checkpoint(
    path, tensors: dict[str, np.ndarray], architecture_json: Optional[str] = None
) -> None:
    """Serialize named float arrays (insertion order preserved); the
    architecture record, when given, is written first."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    if architecture_json is not None:
        payload = np.frombuffer(architecture_json.encode("utf-8"), dtype=np.uint8)
        buf.write(_encode_record(ARCHITECTURE_RECORD, payload.astype(np.float32)))
    for name, array in tensors.items():
        if name == ARCHITECTURE_RECORD:
            raise CheckpointFormatError(f"{name!r} is reserved for the architecture")
        buf.write(_encode_record(name, np.asarray(array)))
    atomic_write_bytes(path, buf.getvalue())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointFormatError("truncated checkpoint file")
    return data


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], Optional[str]]:
    """Parse a checkpoint into (tensors, architecture JSON or None)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic bytes")
        version = _read_exact(fh, 1)[0]
        if version != VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        tensors: dict[str, np.ndarray] = {}
        architecture = None
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise CheckpointFormatError("truncated checkpoint file")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len).decode("utf-8")
            rank = _read_exact(fh, 1)[0]
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = _read_exact(fh, 4 * count)
            # copy: frombuffer views are read-only, tensors must be writable
            array = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
            if name == ARCHITECTURE_RECORD:
                byte_values = array.astype(np.int64)
                if np.any(byte_values < 0) or np.any(byte_values > 255):
                    raise CheckpointFormatError("corrupt architecture record")
                architecture = byte_values.astype(np.uint8).tobytes().decode("utf-8")
            else:
                if name in tensors:
                    raise CheckpointFormatError(f"duplicate tensor {name!r}")
                tensors[name] = array
    return tensors, architecture


def save_model(path, model: Backbone) -> None:
    """Checkpoint with the architecture embedded; bitwise round-trips."""
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    write_checkpoint(path, tensors, architecture_json=model.config.to_json())


def load_weights_into(model: Backbone, tensors: dict[str, np.ndarray]) -> None:
    """Strict by-name assignment; the first mismatch aborts with the
    offending tensor named and the model untouched."""
    params = model.named_parameters()
    staged = {}
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointFormatError(f"checkpoint is missing tensor {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointFormatError(
                f"tensor {name!r} has shape {tuple(arr.shape)}, model expects {tuple(p.shape)}"
            )
        staged[name] = np.ascontiguousarray(arr, dtype=p.data.dtype)
    extra = set(tensors) - set(params)
    if extra:
        raise CheckpointFormatError(f"checkpoint has unknown tensor {sorted(extra)[0]!r}")
    for name, p in params.items():
        p.data = staged[name]


def load_model(path) -> Backbone:
    """Rebuild the model from the embedded architecture and load every
    parameter bitwise."""
    tensors, architecture = read_checkpoint(path)
    if architecture is None:
        raise CheckpointFormatError(f"{path}: no architecture record present")
    config = BackboneConfig.from_json(architecture)
    model = Backbone(config, seed=0)
    load_weights_into(model, tensors)
    return model
