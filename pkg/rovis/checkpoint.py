"""Binary checkpoint format.

Layout (all integers little-endian):
    b"RVIS" | uint32 version | uint32 config_len | config JSON
    uint32 record_count
    per record: uint16 name_len | name | uint8 ndim | uint32 dims... | float64 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
from loguru import logger

from .errors import FormatError, ShapeError
from .rng import Rng
from .segmenter import ModelConfig, Segmenter

MAGIC = b"RVIS"
FORMAT_VERSION = 1


def encode_checkpoint(config: ModelConfig, state: Dict[str, np.ndarray]) -> bytes:
    config_blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(config_blob)), config_blob, struct.pack("<I", len(state))]
    for name, value in state.items():
        raw_name = name.encode("utf-8")
        value = np.ascontiguousarray(value, dtype="<f8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        parts.append(value.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.offset = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise FormatError(f"{self.source}: truncated checkpoint at byte {self.offset}")
        chunk = self.blob[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Tuple[ModelConfig, Dict[str, np.ndarray]]:
    reader = _Reader(blob, source)
    if reader.take(4) != MAGIC:
        raise FormatError(f"{source}: not a rovis checkpoint (bad magic)")
    version, config_len = reader.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: checkpoint version {version}, expected {FORMAT_VERSION}")
    try:
        config = ModelConfig.from_dict(json.loads(reader.take(config_len).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{source}: unreadable config block: {exc}") from exc
    (count,) = reader.unpack("<I")
    state: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        state[name] = np.frombuffer(reader.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if reader.offset != len(blob):
        raise FormatError(f"{source}: {len(blob) - reader.offset} trailing bytes")
    return config, state


def save_checkpoint(model: Segmenter, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model.config, model.state_dict()))
    logger.success(f"Saved checkpoint: {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Segmenter:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"checkpoint not found: {path}")
    config, state = decode_checkpoint(path.read_bytes(), str(path))
    model = Segmenter(config, Rng(0))
    try:
        model.load_state_dict(state)
    except ShapeError as exc:
        raise FormatError(f"{path}: parameters do not match the stored config: {exc}") from exc
    logger.info(f"Loaded checkpoint {path} ({model.parameter_count():,} parameters)")
    return model
