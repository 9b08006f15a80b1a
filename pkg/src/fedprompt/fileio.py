"""Binary container formats.

Two little-endian formats share the same primitives:

* checkpoint container ("FMVP"): named tensor map, used for model
  checkpoints and dataset dumps;
* embedding file ("FMVE"): per-class text-feature and attribute-embedding
  matrices, so precomputed real embeddings can be ingested.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"FMVP"
EMBEDDING_MAGIC = b"FMVE"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: np.float32, 1: np.float64}
_DTYPE_BY_NAME = {"float32": 0, "float64": 1}


class FormatError(ValueError):
    """Malformed or truncated container file."""


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated at byte offset {self.pos} "
                f"(needed {n} bytes, {len(self.blob) - self.pos} left)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def utf8(self, n: int) -> str:
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.path}: bad UTF-8 name at byte offset {self.pos}") from exc


def _write_name(parts: list[bytes], name: str) -> None:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"name too long: {name[:40]}...")
    parts.append(struct.pack("<H", len(raw)))
    parts.append(raw)


# ---------------------------------------------------------------------------
# checkpoint container


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    parts: list[bytes] = [CHECKPOINT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.name not in _DTYPE_BY_NAME:
            raise FormatError(f"tensor '{name}': unsupported dtype {arr.dtype}")
        if arr.ndim > 0xFF:
            raise FormatError(f"tensor '{name}': too many dims")
        _write_name(parts, name)
        parts.append(struct.pack("<BB", _DTYPE_BY_NAME[arr.dtype.name], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        parts.append(little.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> dict[str, np.ndarray]:
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint container")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    count = r.u32()
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.utf8(r.u16())
        code = r.u8()
        if code not in _DTYPE_CODES:
            raise FormatError(f"{path}: tensor '{name}' has unknown dtype code {code}")
        dtype = _DTYPE_CODES[code]
        ndim = r.u8()
        dims = tuple(r.u32() for _ in range(ndim))
        n_bytes = int(np.prod(dims, dtype=np.int64)) * np.dtype(dtype).itemsize
        payload = r.take(n_bytes)
        arr = np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype)
        out[name] = arr.reshape(dims)
        if not np.isfinite(out[name]).all():
            raise FormatError(f"{path}: tensor '{name}' contains non-finite values")
    if r.pos != len(r.blob):
        raise FormatError(f"{path}: {len(r.blob) - r.pos} trailing bytes at offset {r.pos}")
    return out


# ---------------------------------------------------------------------------
# embedding file


def save_embeddings(path, d_t: int, classes: list[tuple[str, np.ndarray, np.ndarray]]) -> None:
    """classes: ordered (name, composite_rows, attribute_rows), both (J, d_t)."""
    parts: list[bytes] = [EMBEDDING_MAGIC, struct.pack("<III", FORMAT_VERSION, d_t, len(classes))]
    for name, t_rows, a_rows in classes:
        t_rows = np.ascontiguousarray(t_rows, dtype=np.float32)
        a_rows = np.ascontiguousarray(a_rows, dtype=np.float32)
        if t_rows.shape != a_rows.shape or t_rows.ndim != 2 or t_rows.shape[1] != d_t:
            raise FormatError(f"class '{name}': embedding shapes {t_rows.shape}/{a_rows.shape} vs d_t={d_t}")
        if t_rows.shape[0] < 1:
            raise FormatError(f"class '{name}': needs at least one attribute row")
        _write_name(parts, name)
        parts.append(struct.pack("<I", t_rows.shape[0]))
        parts.append(t_rows.tobytes())
        parts.append(a_rows.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_embeddings(path) -> tuple[int, list[tuple[str, np.ndarray, np.ndarray]]]:
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(4) != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic, not an embedding file")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    d_t = r.u32()
    if d_t < 1:
        raise FormatError(f"{path}: header d_t must be positive")
    count = r.u32()
    seen: set[str] = set()
    classes: list[tuple[str, np.ndarray, np.ndarray]] = []
    for _ in range(count):
        name = r.utf8(r.u16())
        if name in seen:
            raise FormatError(f"{path}: duplicate class '{name}'")
        seen.add(name)
        j = r.u32()
        if j < 1:
            raise FormatError(f"{path}: class '{name}' has no attribute rows")
        n_bytes = j * d_t * 4
        t_rows = np.frombuffer(r.take(n_bytes), dtype="<f4").astype(np.float32).reshape(j, d_t)
        a_rows = np.frombuffer(r.take(n_bytes), dtype="<f4").astype(np.float32).reshape(j, d_t)
        for label, rows in (("composite", t_rows), ("attribute", a_rows)):
            if not np.isfinite(rows).all():
                raise FormatError(f"{path}: class '{name}' has non-finite {label} values")
        classes.append((name, t_rows, a_rows))
    if r.pos != len(r.blob):
        raise FormatError(f"{path}: {len(r.blob) - r.pos} trailing bytes at offset {r.pos}")
    return d_t, classes
