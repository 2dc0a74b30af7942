"""Reader/writer for the safetensors tensor container layout.

Layout: 8-byte little-endian header length N, N bytes of UTF-8 JSON mapping
tensor name -> {"dtype", "shape", "data_offsets": [begin, end]}, then the
packed row-major tensor bytes. An optional "__metadata__" entry maps str -> str.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

_DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
    "I16": np.dtype("<i2"),
    "I8": np.dtype("i1"),
    "U8": np.dtype("u1"),
    "BOOL": np.dtype("?"),
}
_NAMES = {v: k for k, v in _DTYPES.items()}


class ContainerError(ValueError):
    pass


def _bf16_to_f32(raw: bytes, shape: list[int]) -> np.ndarray:
    u16 = np.frombuffer(raw, dtype="<u2").astype(np.uint32)
    return (u16 << 16).view(np.float32).reshape(shape)


def read_header(data: bytes) -> tuple[dict, dict[str, str], int]:
    if len(data) < 8:
        raise ContainerError("file shorter than the 8-byte header length")
    (n,) = struct.unpack("<Q", data[:8])
    if 8 + n > len(data):
        raise ContainerError(f"header length {n} exceeds file size {len(data)}")
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"malformed header: {e}") from e
    if not isinstance(header, dict):
        raise ContainerError("header is not a JSON object")
    meta = header.pop("__metadata__", None) or {}
    return header, meta, 8 + n


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    header, meta, start = read_header(data)
    body = memoryview(data)[start:]
    out: dict[str, np.ndarray] = {}
    for name, info in header.items():
        try:
            dtype, shape, (b, e) = info["dtype"], list(info["shape"]), info["data_offsets"]
        except (KeyError, TypeError, ValueError) as err:
            raise ContainerError(f"{name}: malformed header entry") from err
        if not 0 <= b <= e <= len(body):
            raise ContainerError(f"{name}: data offsets {b}..{e} outside the data block")
        raw = bytes(body[b:e])
        count = int(np.prod(shape)) if shape else 1
        if dtype == "BF16":
            if len(raw) != 2 * count:
                raise ContainerError(f"{name}: {len(raw)} bytes for shape {shape}")
            out[name] = _bf16_to_f32(raw, shape)
            continue
        if dtype not in _DTYPES:
            raise ContainerError(f"{name}: unsupported dtype {dtype}")
        dt = _DTYPES[dtype]
        if len(raw) != dt.itemsize * count:
            raise ContainerError(f"{name}: {len(raw)} bytes for shape {shape} of {dtype}")
        out[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return out, meta


def load_file(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return loads(Path(path).read_bytes())


def dumps(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> bytes:
    header: dict = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d to 1-d
            arr = arr.copy(order="C")
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _NAMES:
            raise ContainerError(f"{name}: cannot store dtype {arr.dtype}")
        raw = arr.astype(dt, copy=False).tobytes()
        header[name] = {"dtype": _NAMES[dt], "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        chunks.append(raw)
        offset += len(raw)
    hb = json.dumps(header, separators=(",", ":")).encode("utf-8")
    hb += b" " * (-len(hb) % 8)
    return struct.pack("<Q", len(hb)) + hb + b"".join(chunks)


def save_file(tensors: Mapping[str, np.ndarray], path: str | Path, metadata: Mapping[str, str] | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, metadata))
