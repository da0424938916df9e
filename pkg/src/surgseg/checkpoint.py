"""Self-describing binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..3    magic ``b"SSCK"``
    bytes 4..7    u32 header length N
    bytes 8..8+N  UTF-8 JSON header
    remainder     raw array payload, concatenated in manifest order

The JSON header carries ``version``, ``byte_order``, a free-form
``config`` mapping (enough to rebuild the model), a free-form ``meta``
mapping (iteration counter, loss history, normalization constants, ...)
and an ``arrays`` manifest listing name/shape/dtype for every tensor in
the payload.  Arrays are stored C-contiguous in little-endian byte
order, so a save/load cycle is bit-exact.

Writes go through a temporary file in the target directory followed by
``os.replace``, so a crash mid-write never clobbers an existing
checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import DataError

MAGIC = b"SSCK"
FORMAT_VERSION = 1

_HEADER_LEN = struct.Struct("<I")


@dataclass
class Checkpoint:
    """In-memory view of a loaded container."""

    arrays: dict[str, np.ndarray]
    config: dict[str, Any] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _as_little_endian(arr: np.ndarray) -> np.ndarray:
    """Return a C-contiguous little-endian view/copy of ``arr``.

    ``np.asarray(..., order="C")`` rather than ``ascontiguousarray``:
    the latter silently promotes 0-d arrays to 1-d.
    """
    a = np.asarray(arr, order="C")
    if a.dtype.byteorder == ">":
        a = a.astype(a.dtype.newbyteorder("<"))
    return a


def checkpoint_bytes(
    arrays: Mapping[str, np.ndarray],
    config: Mapping[str, Any] | None = None,
    meta: Mapping[str, Any] | None = None,
) -> bytes:
    """Serialize arrays plus headers to the container byte string."""
    manifest = []
    chunks = []
    for name, arr in arrays.items():
        if not isinstance(arr, np.ndarray):
            raise TypeError(f"array {name!r} is {type(arr).__name__}, expected ndarray")
        a = _as_little_endian(arr)
        manifest.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str})
        chunks.append(a.tobytes())
    header = {
        "version": FORMAT_VERSION,
        "byte_order": "little",
        "config": dict(config or {}),
        "meta": dict(meta or {}),
        "arrays": manifest,
    }
    try:
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise DataError(f"checkpoint header is not JSON-serializable: {exc}") from exc
    return MAGIC + _HEADER_LEN.pack(len(header_bytes)) + header_bytes + b"".join(chunks)


def save_checkpoint(
    path: str | Path,
    arrays: Mapping[str, np.ndarray],
    config: Mapping[str, Any] | None = None,
    meta: Mapping[str, Any] | None = None,
) -> None:
    """Atomically write a container to ``path``."""
    path = Path(path)
    blob = checkpoint_bytes(arrays, config, meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def _parse_header(blob: bytes, source: str) -> tuple[dict[str, Any], int]:
    if len(blob) < len(MAGIC) + _HEADER_LEN.size:
        raise DataError(f"{source}: too short to be a checkpoint container")
    if blob[: len(MAGIC)] != MAGIC:
        raise DataError(f"{source}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (header_len,) = _HEADER_LEN.unpack_from(blob, len(MAGIC))
    start = len(MAGIC) + _HEADER_LEN.size
    if len(blob) < start + header_len:
        raise DataError(f"{source}: truncated header ({header_len} bytes declared)")
    try:
        header = json.loads(blob[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: unreadable header: {exc}") from exc
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise DataError(f"{source}: unsupported container version {version!r}")
    if header.get("byte_order") != "little":
        raise DataError(f"{source}: unsupported byte order {header.get('byte_order')!r}")
    return header, start + header_len


def checkpoint_from_bytes(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    """Parse a container byte string back into arrays + headers."""
    header, offset = _parse_header(blob, source)
    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        name, shape, dtype_str = entry["name"], tuple(entry["shape"]), entry["dtype"]
        dtype = np.dtype(dtype_str)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(blob):
            raise DataError(f"{source}: truncated payload at array {name!r}")
        arr = np.frombuffer(blob, dtype=dtype, count=max(int(np.prod(shape, dtype=np.int64)), 0), offset=offset)
        arrays[name] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise DataError(f"{source}: {len(blob) - offset} trailing bytes after payload")
    return Checkpoint(
        arrays=arrays,
        config=dict(header.get("config", {})),
        meta=dict(header.get("meta", {})),
        version=int(header["version"]),
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a container from disk."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_from_bytes(blob, source=str(path))


def read_header(path: str | Path) -> dict[str, Any]:
    """Read only the JSON header of a container (cheap inspection)."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            prefix = fh.read(len(MAGIC) + _HEADER_LEN.size)
            if len(prefix) < len(MAGIC) + _HEADER_LEN.size:
                raise DataError(f"{path}: too short to be a checkpoint container")
            if prefix[: len(MAGIC)] != MAGIC:
                raise DataError(f"{path}: bad magic {prefix[:4]!r}, expected {MAGIC!r}")
            (header_len,) = _HEADER_LEN.unpack_from(prefix, len(MAGIC))
            header_bytes = fh.read(header_len)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(header_bytes) < header_len:
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable header: {exc}") from exc
    return header
