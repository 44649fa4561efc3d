"""Binary PGM ("P5") reading and writing.

Supports maxval 255 (one byte per sample) and 65535 (two bytes, big-endian
per the format convention).  Reads return float64 arrays in [0, maxval];
writes clamp, round half-up, and are atomic (temp file + rename) so a
failed command never leaves a partial artifact behind.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .errors import ArgumentError, DataFormatError, ShapeError

_WHITESPACE = b" \t\n\r\x0b\x0c"


class _Scanner:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def skip_space_and_comments(self) -> None:
        while self.pos < len(self.data):
            ch = self.data[self.pos : self.pos + 1]
            if ch in (b"#",):
                nl = self.data.find(b"\n", self.pos)
                self.pos = len(self.data) if nl < 0 else nl + 1
            elif ch in _WHITESPACE:
                self.pos += 1
            else:
                return

    def read_int(self, what: str, limit: int) -> int:
        self.skip_space_and_comments()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos : self.pos + 1].isdigit():
            self.pos += 1
        if self.pos == start:
            raise DataFormatError(f"expected {what} in header", offset=start)
        value = int(self.data[start : self.pos])
        if value > limit:
            raise DataFormatError(
                f"header overflow: {what} {value} exceeds {limit}", offset=start
            )
        return value


def read_pgm(path) -> np.ndarray:
    """Parse a binary PGM file into a float64 (height, width) array."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 2:
        raise DataFormatError("file too short for a PGM magic", offset=0)
    magic = data[:2]
    if magic == b"P2":
        raise DataFormatError("unsupported format 'P2' (ASCII PGM); only binary P5",
                              offset=0)
    if magic != b"P5":
        raise DataFormatError(f"bad magic {magic!r}, expected b'P5'", offset=0)
    sc = _Scanner(data)
    sc.pos = 2
    width = sc.read_int("width", 1 << 20)
    height = sc.read_int("height", 1 << 20)
    maxval = sc.read_int("maxval", 65535)
    if maxval < 1:
        raise DataFormatError("maxval must be >= 1", offset=sc.pos)
    # exactly one whitespace byte separates the header from the raster
    if sc.pos >= len(data) or data[sc.pos : sc.pos + 1] not in _WHITESPACE:
        raise DataFormatError("missing whitespace before raster", offset=sc.pos)
    sc.pos += 1
    bytes_per = 1 if maxval < 256 else 2
    expected = width * height * bytes_per
    payload = data[sc.pos :]
    if len(payload) < expected:
        raise DataFormatError(
            f"truncated raster: expected {expected} bytes, found {len(payload)}",
            offset=sc.pos + len(payload),
        )
    if len(payload) > expected:
        raise DataFormatError("trailing data after raster", offset=sc.pos + expected)
    dtype = np.uint8 if bytes_per == 1 else np.dtype(">u2")
    values = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    return values.reshape(height, width)


def write_pgm(image: np.ndarray, path, maxval: int = 255) -> None:
    """Write a 2-D array as binary PGM, clamping and rounding half-up."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"PGM image must be 2-D, got shape {image.shape}")
    if maxval not in (255, 65535):
        raise ArgumentError(f"maxval must be 255 or 65535, got {maxval}")
    quantised = np.floor(np.clip(image, 0, maxval) + 0.5)
    dtype = np.uint8 if maxval == 255 else np.dtype(">u2")
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode("ascii")
    payload = quantised.astype(dtype).tobytes()
    atomic_write_bytes(path, header + payload)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, os.fspath(path))
    except BaseException:
        os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
