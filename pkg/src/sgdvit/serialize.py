"""Binary tensor file and checkpoint formats.

Raw tensor record:
    magic ``SGDT`` | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank |
    1 pad byte (to 8) | rank x u64 little-endian dims | little-endian scalars.

Checkpoint: a text manifest mapping parameter names to byte offsets (relative
to the start of the data section), followed by ``---`` and the concatenated
raw tensor records in one file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

_MAGIC = b"SGDT"
_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

_CKPT_HEADER = "SGDVIT-CKPT v1"
_SEPARATOR = "---"


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise DataError(f"unsupported dtype {arr.dtype}; expected float32/float64")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    head = _MAGIC + struct.pack("<BBBx", _VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    body = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return head + dims + body


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one raw tensor record; returns (array, bytes consumed)."""
    if buf[offset:offset + 4] != _MAGIC:
        raise DataError("raw tensor: bad magic bytes")
    version, code, rank = struct.unpack_from("<BBBx", buf, offset + 4)
    if version != _VERSION:
        raise DataError(f"raw tensor: unsupported version {version}")
    if code not in _DTYPES:
        raise DataError(f"raw tensor: unknown dtype code {code}")
    if rank < 1:
        raise DataError("raw tensor: rank must be >= 1")
    pos = offset + 8
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dtype = _DTYPES[code]
    count = int(np.prod(dims))
    nbytes = count * dtype.itemsize
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims)
    return arr.astype(arr.dtype.newbyteorder("=")), pos + nbytes - offset


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = tensor_from_bytes(fh.read())
    return arr


@dataclass
class ManifestEntry:
    name: str
    offset: int
    dtype: str
    shape: tuple[int, ...]


def save_checkpoint(path, named_arrays: dict[str, np.ndarray]) -> None:
    blobs: list[bytes] = []
    lines = [_CKPT_HEADER]
    offset = 0
    for name, arr in named_arrays.items():
        blob = tensor_to_bytes(arr)
        shape = "x".join(str(d) for d in (arr.shape or (1,)))
        dtype = "f64" if arr.dtype == np.float64 else "f32"
        lines.append(f"name={name} offset={offset} dtype={dtype} shape={shape}")
        blobs.append(blob)
        offset += len(blob)
    lines.append(_SEPARATOR)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def read_manifest(path) -> list[ManifestEntry]:
    """Parse the manifest only; no tensor payloads are read."""
    entries = []
    with open(path, "rb") as fh:
        header = fh.readline().decode("utf-8").rstrip("\n")
        if header != _CKPT_HEADER:
            raise DataError(f"not a checkpoint file: {path}")
        for raw in fh:
            line = raw.decode("utf-8").rstrip("\n")
            if line == _SEPARATOR:
                break
            fields = dict(part.split("=", 1) for part in line.split(" "))
            entries.append(ManifestEntry(
                name=fields["name"],
                offset=int(fields["offset"]),
                dtype=fields["dtype"],
                shape=tuple(int(d) for d in fields["shape"].split("x")),
            ))
        else:
            raise DataError(f"checkpoint manifest missing separator: {path}")
    return entries


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    sep = (_SEPARATOR + "\n").encode("utf-8")
    head_end = data.find(b"\n" + sep)
    if head_end < 0:
        raise DataError(f"checkpoint manifest missing separator: {path}")
    data_start = head_end + 1 + len(sep)
    entries = read_manifest(path)
    out: dict[str, np.ndarray] = {}
    for e in entries:
        arr, _ = tensor_from_bytes(data, data_start + e.offset)
        if tuple(arr.shape) != e.shape:
            raise DataError(f"checkpoint entry {e.name}: manifest/payload shape mismatch")
        out[e.name] = arr
    return out
