"""Binary container for named float32 tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"MIMT"
    version u32      currently 1
    count   u32      number of named tensors
    per tensor:
        name_len u32
        name     UTF-8 bytes
        rank     u32
        dims     rank * u64
        data     product(dims) * float32

Model checkpoints prepend a plain-text header of sorted ``key=value``
lines terminated by one empty line, then the container verbatim. Loads
never tolerate a short read: truncation raises CheckpointError with the
failing byte offset.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MIMT"
VERSION = 1


class CheckpointError(Exception):
    """Malformed or truncated checkpoint data."""


def dump_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    """Serialize a name -> array mapping (insertion order preserved)."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=np.float32)
        enc = name.encode("utf-8")
        out += struct.pack("<I", len(enc))
        out += enc
        out += struct.pack("<I", data.ndim)
        for d in data.shape:
            out += struct.pack("<Q", d)
        out += data.astype("<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, blob: bytes, offset: int = 0):
        self.blob = blob
        self.pos = offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes at offset {self.pos}, "
                f"have {len(self.blob) - self.pos}"
            )
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def parse_tensors(blob: bytes, offset: int = 0) -> dict[str, np.ndarray]:
    """Parse a container from `blob` starting at `offset`."""
    r = _Reader(blob, offset)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"bad magic at offset {offset}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u32()
        name = r.take(name_len).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u64() for _ in range(rank))
        n = 1
        for d in dims:
            n *= d
        raw = r.take(4 * n)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if r.pos != len(blob):
        raise CheckpointError(f"trailing garbage after offset {r.pos}")
    return tensors


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dump_tensors(tensors))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return parse_tensors(Path(path).read_bytes())


# -- model checkpoints: text header + container ------------------------------


def dump_with_header(header: dict[str, str], tensors: dict[str, np.ndarray]) -> bytes:
    lines = []
    for key in sorted(header):
        value = str(header[key])
        if "=" in key or "\n" in key:
            raise CheckpointError(f"invalid header key {key!r}")
        if "\n" in value:
            raise CheckpointError(f"header value for {key!r} contains a newline")
        lines.append(f"{key}={value}\n")
    return "".join(lines).encode("utf-8") + b"\n" + dump_tensors(tensors)


def parse_with_header(blob: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    if blob[:4] == MAGIC:
        # headerless file: the container starts at byte 0
        return {}, parse_tensors(blob)
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise CheckpointError("missing header terminator (blank line)")
    header: dict[str, str] = {}
    text = blob[:sep].decode("utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if "=" not in line:
            raise CheckpointError(f"header line {lineno} is not key=value: {line!r}")
        key, value = line.split("=", 1)
        header[key] = value
    return header, parse_tensors(blob, sep + 2)


def save_with_header(path: str | Path, header: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dump_with_header(header, tensors))


def load_with_header(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    return parse_with_header(Path(path).read_bytes())
