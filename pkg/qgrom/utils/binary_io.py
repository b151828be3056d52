"""Little-endian archive conventions shared by snapshot and basis files.

Layout: 8-byte magic, then the header/payload fields written in order,
then a trailing 8-byte blake2b checksum of every preceding byte.
"""
import hashlib
import os
import struct
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from qgrom.core.errors import SnapshotFormatError

CHECKSUM_SIZE = 8
TAG_WIDTH = 8


def checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=CHECKSUM_SIZE).digest()


class ArchiveWriter:
    def __init__(self, magic: bytes):
        if len(magic) != 8:
            raise ValueError("archive magic must be 8 bytes")
        self._parts: List[bytes] = [magic]

    def tag(self, text: str, width: int = TAG_WIDTH) -> "ArchiveWriter":
        raw = text.encode("ascii")
        if len(raw) > width:
            raise ValueError(f"tag '{text}' longer than {width} bytes")
        self._parts.append(raw.ljust(width, b"\0"))
        return self

    def u64(self, *values: int) -> "ArchiveWriter":
        self._parts.append(struct.pack(f"<{len(values)}Q", *(int(v) for v in values)))
        return self

    def f64(self, values, order: str = "C") -> "ArchiveWriter":
        arr = np.asarray(values, dtype="<f8")
        self._parts.append(arr.tobytes(order=order))
        return self

    def to_bytes(self) -> bytes:
        body = b"".join(self._parts)
        return body + checksum(body)

    def write(self, path) -> Path:
        """Write atomically: the target is replaced only once the file is complete."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(self.to_bytes())
        os.replace(tmp, path)
        return path


class ArchiveReader:
    def __init__(self, data: bytes, magic: bytes, source: Optional[str] = None):
        self.source = source or "<bytes>"
        if len(data) < len(magic) + CHECKSUM_SIZE:
            raise SnapshotFormatError(f"{self.source}: file too short ({len(data)} bytes)")
        if data[: len(magic)] != magic:
            raise SnapshotFormatError(
                f"{self.source}: bad magic {data[:len(magic)]!r}, expected {magic!r}"
            )
        body, stored = data[:-CHECKSUM_SIZE], data[-CHECKSUM_SIZE:]
        if checksum(body) != stored:
            raise SnapshotFormatError(f"{self.source}: checksum mismatch (corrupted or truncated)")
        self._body = body
        self._pos = len(magic)

    @classmethod
    def open(cls, path, magic: bytes) -> "ArchiveReader":
        path = Path(path)
        if not path.is_file():
            raise SnapshotFormatError(f"{path}: no such archive")
        return cls(path.read_bytes(), magic, source=str(path))

    def _take(self, size: int) -> bytes:
        if self._pos + size > len(self._body):
            raise SnapshotFormatError(f"{self.source}: truncated payload")
        chunk = self._body[self._pos:self._pos + size]
        self._pos += size
        return chunk

    def tag(self, width: int = TAG_WIDTH) -> str:
        return self._take(width).rstrip(b"\0").decode("ascii")

    def u64(self, count: int = 1) -> Tuple[int, ...]:
        return struct.unpack(f"<{count}Q", self._take(8 * count))

    def f64(self, shape, order: str = "C") -> np.ndarray:
        shape = tuple(int(s) for s in np.atleast_1d(shape))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self._take(8 * n), dtype="<f8").astype(float)
        return arr.reshape(shape, order=order)

    def finish(self) -> None:
        if self._pos != len(self._body):
            raise SnapshotFormatError(f"{self.source}: {len(self._body) - self._pos} trailing bytes")
