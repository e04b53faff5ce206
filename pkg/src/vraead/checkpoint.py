"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic     8 bytes   b"VRAECKPT"
    version   u32
    cfg_len   u32, then cfg_len bytes of UTF-8 JSON (model config + metadata)
    n_arrays  u32
    per array:
        name_len u16, name (UTF-8)
        ndim     u8, shape as ndim x u64
        data     prod(shape) x float64 little-endian
    sha256    32 bytes over everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import ModelConfig

MAGIC = b"VRAECKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def encode_checkpoint(arrays: Mapping[str, np.ndarray], config: ModelConfig, meta: dict | None = None) -> bytes:
    header = json.dumps({"model": config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    if len(blob) < len(MAGIC) + 32 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch (file corrupted)")
    pos = len(MAGIC)
    version, cfg_len = struct.unpack_from("<II", body, pos)
    pos += 8
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    header = json.loads(body[pos:pos + cfg_len].decode())
    pos += cfg_len
    (n_arrays,) = struct.unpack_from("<I", body, pos)
    pos += 4
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return ModelConfig.from_dict(header["model"]), arrays, header.get("meta", {})


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], config: ModelConfig,
                    meta: dict | None = None) -> bytes:
    blob = encode_checkpoint(arrays, config, meta)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(blob)
    return blob


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None
                    ) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    """Read and verify a checkpoint; ``expected`` must agree on the architecture."""
    config, arrays, meta = decode_checkpoint(Path(path).read_bytes())
    if expected is not None and expected.architecture() != config.architecture():
        diff = {k: (v, config.architecture()[k]) for k, v in expected.architecture().items()
                if config.architecture()[k] != v}
        raise ConfigMismatchError(f"checkpoint config differs from expected (expected, found): {diff}")
    return config, arrays, meta
