"""Binary point-set files, checkpoints and key=value manifests.

MNO1 point-set layout (little-endian)::

    b"MNO1" | u32 N | u32 F | u32 O
    f32 positions[N*3] | f32 features[N*F] | f32 targets[N*O]
    u32 name_len | utf-8 name

Checkpoint layout (little-endian)::

    b"MNOC" | u32 version | u32 len | key=value header text (config, manifest)
    u32 n_records, then per record:
    u32 name_len | name | u32 ndim | u32 dims[ndim] | f32 payload
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .geometry import DataError, PointSample

__all__ = [
    "write_pointset",
    "read_pointset",
    "read_corpus",
    "write_checkpoint",
    "read_checkpoint",
    "write_keyvalue",
    "read_keyvalue",
    "file_sha256",
    "CHECKPOINT_VERSION",
]

MAGIC = b"MNO1"
CKPT_MAGIC = b"MNOC"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")


def write_pointset(sample: PointSample, path) -> None:
    n, f, o = sample.n_points, sample.n_features, sample.n_outputs
    name = sample.name.encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<III", n, f, o),
        np.ascontiguousarray(sample.positions, dtype="<f4").tobytes(),
        np.ascontiguousarray(sample.features, dtype="<f4").tobytes(),
        np.ascontiguousarray(sample.targets, dtype="<f4").tobytes(),
        _U32.pack(len(name)),
        name,
    ]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, nbytes: int, what: str) -> bytes:
        end = self.pos + nbytes
        if end > len(self.buf):
            raise DataError(
                f"{self.source}: truncated while reading {what} at byte {self.pos}: "
                f"expected {end} bytes, file has {len(self.buf)}"
            )
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def f32(self, count: int, what: str) -> np.ndarray:
        offset = self.pos
        arr = np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(np.float32)
        if not np.isfinite(arr).all():
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise DataError(f"{self.source}: non-finite {what} value at byte {offset + 4 * bad}")
        return arr


def read_pointset(path) -> PointSample:
    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    n, f, o = r.u32("N"), r.u32("F"), r.u32("O")
    pos = r.f32(n * 3, "positions").reshape(n, 3)
    feats = r.f32(n * f, "features").reshape(n, f)
    targets = r.f32(n * o, "targets").reshape(n, o)
    name_len = r.u32("name length")
    name = r.take(name_len, "name").decode("utf-8")
    if r.pos != len(r.buf):
        raise DataError(f"{path}: {len(r.buf) - r.pos} trailing bytes after byte {r.pos}")
    return PointSample(pos, feats, targets, name)


def read_corpus(data_dir) -> list[PointSample]:
    """All ``*.mno`` files of a directory in filename order."""
    files = sorted(Path(data_dir).glob("*.mno"))
    if not files:
        raise DataError(f"no .mno files in {data_dir}")
    return [read_pointset(p) for p in files]


def write_keyvalue(values: Mapping[str, object], path) -> None:
    lines = [f"{k}={v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_keyvalue(text: str, source: str = "<text>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_keyvalue(path) -> dict[str, str]:
    return parse_keyvalue(Path(path).read_text(encoding="utf-8"), str(path))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_checkpoint(path, arrays: Mapping[str, np.ndarray], header: Mapping[str, object]) -> None:
    head = "\n".join(f"{k}={v}" for k, v in header.items()).encode("utf-8")
    parts = [CKPT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(head)), head,
             _U32.pack(len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4, "magic") != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic at byte 0)")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = parse_keyvalue(r.take(r.u32("header length"), "header").decode("utf-8"), str(path))
    arrays = {}
    for _ in range(r.u32("record count")):
        name = r.take(r.u32("name length"), "record name").decode("utf-8")
        shape = tuple(r.u32("dim") for _ in range(r.u32("ndim")))
        arrays[name] = r.f32(int(np.prod(shape)), name).reshape(shape)
    return header, arrays
