"""
Little-endian tensor container shared by checkpoints and generated datasets.

Layout::

    b"RUNL"                 magic
    u16 version             currently 1
    u16 reserved            0
    u32 header_len
    header                  UTF-8 JSON {"kind": ..., "metadata": {...}}
    u32 tensor_count
    per tensor:
        u16 name_len, name (UTF-8)
        u8 dtype            0 = float64, 1 = int64, 2 = uint8
        u8 ndim
        ndim x u32 extents
        payload             C order, little-endian
    u32 CRC-32 of every preceding byte
"""

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from errors import ContainerFormatError, DataNotFoundError, UnsupportedVersionError

MAGIC = b"RUNL"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_CODES = {dtype: code for code, dtype in _DTYPES.items()}


class ContainerHeader(BaseModel):
    kind: str
    metadata: Dict[str, Any] = Field(default_factory=dict)


@dataclass
class Container:
    kind: str
    metadata: Dict[str, Any] = field(default_factory=dict)
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)


def _dtype_code(arr: np.ndarray, name: str) -> int:
    key = np.dtype(arr.dtype).newbyteorder("<") if arr.dtype.itemsize > 1 else np.dtype(arr.dtype)
    if key not in _CODES:
        raise ValueError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
    return _CODES[key]


def encode(container: Container, version: int = VERSION) -> bytes:
    header = ContainerHeader(kind=container.kind, metadata=container.metadata).model_dump_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<HHI", version, 0, len(header)), header]
    parts.append(struct.pack("<I", len(container.tensors)))
    for name, arr in container.tensors.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr, name)
        encoded_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded_name)))
        parts.append(encoded_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, path: Optional[str]):
        self.buf = buf
        self.pos = 0
        self.path = path

    def fail(self, message: str, offset: Optional[int] = None) -> ContainerFormatError:
        return ContainerFormatError(message, self.path, self.pos if offset is None else offset)

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise self.fail(f"truncated {what}: needs {n} bytes, {len(self.buf) - self.pos} left")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes, path: Optional[str] = None) -> Container:
    reader = _Reader(buf, path)
    if reader.take(4, "magic") != MAGIC:
        raise reader.fail("not a tensor container (bad magic)", 0)
    version, _reserved, header_len = reader.unpack("<HHI", "preamble")
    if version > VERSION:
        raise UnsupportedVersionError(
            f"container version {version} is newer than the supported version {VERSION}", path, 4
        )
    if version < 1:
        raise reader.fail(f"invalid container version {version}", 4)

    if len(buf) < reader.pos + 4:
        raise reader.fail("truncated container: no checksum")
    body_end = len(buf) - 4
    (stored,) = struct.unpack("<I", buf[body_end:])
    if zlib.crc32(buf[:body_end]) != stored:
        raise ContainerFormatError("checksum mismatch", path, body_end)
    reader.buf = buf[:body_end]

    header_start = reader.pos
    try:
        header = ContainerHeader.model_validate_json(reader.take(header_len, "header"))
    except ValidationError as exc:
        raise reader.fail(f"malformed header: {exc.error_count()} error(s)", header_start) from exc

    (count,) = reader.unpack("<I", "tensor count")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        entry = reader.pos
        (name_len,) = reader.unpack("<H", "tensor name length")
        try:
            name = reader.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise reader.fail("tensor name is not UTF-8", entry + 2) from exc
        code, ndim = reader.unpack("<BB", f"dtype of {name!r}")
        if code not in _DTYPES:
            raise reader.fail(f"tensor {name!r}: unknown dtype code {code}", reader.pos - 2)
        extents = reader.unpack(f"<{ndim}I", f"extents of {name!r}")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(extents, dtype=np.int64)) * dtype.itemsize
        payload = reader.take(nbytes, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(extents).astype(dtype.newbyteorder("="))
    if reader.pos != body_end:
        raise reader.fail(f"{body_end - reader.pos} trailing bytes after the last tensor")
    return Container(kind=header.kind, metadata=header.metadata, tensors=tensors)


def write_container(path: Union[str, Path], container: Container) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(container))


def read_container(path: Union[str, Path], kind: Optional[str] = None) -> Container:
    path = Path(path)
    if not path.is_file():
        raise DataNotFoundError(f"no such file: {path}")
    container = decode(path.read_bytes(), str(path))
    if kind is not None and container.kind != kind:
        raise ContainerFormatError(f"expected a {kind!r} container, found {container.kind!r}", str(path), 12)
    return container
