"""Binary PNM image I/O (P6 color, P5 grayscale) plus raw f64 maps.

The parser follows the PNM header grammar: magic, then width, height and
maxval tokens separated by whitespace runs that may contain ``#`` comments
running to end-of-line, then exactly one whitespace byte before the raster.
Only 8-bit data (maxval <= 255) is supported; wider samples are rejected
rather than silently truncated.  All errors carry the byte offset at which
parsing stopped.

Confidence maps ride alongside as headerless little-endian float64 rasters;
their shape comes from the paired PGM.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = ["PnmError", "read_ppm", "write_ppm", "read_pgm", "write_pgm",
           "read_f64", "write_f64"]

_WS = b" \t\n\r\x0b\x0c"


class PnmError(ValueError):
    """Malformed PNM data; reports the file and byte offset."""

    def __init__(self, path: str, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = path
        self.offset = offset


def _skip_space(buf: bytes, pos: int) -> int:
    while pos < len(buf):
        b = buf[pos]
        if b in _WS:
            pos += 1
        elif b == 0x23:                       # '#' comment to end of line
            while pos < len(buf) and buf[pos] not in b"\r\n":
                pos += 1
        else:
            break
    return pos


def _token(buf: bytes, pos: int, path: str, what: str) -> tuple[bytes, int]:
    pos = _skip_space(buf, pos)
    if pos >= len(buf):
        raise PnmError(path, pos, f"unexpected end of file, expected {what}")
    start = pos
    while pos < len(buf) and buf[pos] not in _WS and buf[pos] != 0x23:
        pos += 1
    return buf[start:pos], pos


def _int_token(buf: bytes, pos: int, path: str, what: str) -> tuple[int, int]:
    tok, end = _token(buf, pos, path, what)
    if not tok.isdigit():
        raise PnmError(path, end - len(tok), f"{what} is not a number: {tok!r}")
    return int(tok), end


def _read_raster(path: str, magic: bytes, channels: int):
    with open(path, "rb") as fh:
        buf = fh.read()
    got, pos = _token(buf, 0, path, "magic")
    if got != magic:
        raise PnmError(path, pos - len(got),
                       f"bad magic {got!r}, expected {magic.decode()}")
    width, pos = _int_token(buf, pos, path, "width")
    height, pos = _int_token(buf, pos, path, "height")
    maxval, pos = _int_token(buf, pos, path, "maxval")
    if width < 1 or height < 1:
        raise PnmError(path, pos, f"non-positive dimensions {width}x{height}")
    if not (1 <= maxval <= 255):
        raise PnmError(path, pos,
                       f"maxval {maxval} unsupported (only 8-bit, 1..255)")
    if pos >= len(buf) or buf[pos] not in _WS:
        raise PnmError(path, pos, "expected single whitespace before raster")
    pos += 1
    need = width * height * channels
    if len(buf) - pos < need:
        raise PnmError(path, len(buf),
                       f"raster truncated: {len(buf) - pos} of {need} bytes")
    if len(buf) - pos > need:
        raise PnmError(path, pos + need,
                       f"{len(buf) - pos - need} trailing bytes after raster")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data, width, height, maxval


def read_ppm(path: str) -> np.ndarray:
    """P6 file -> float64 image [3, H, W] in [0, 1]."""
    data, w, h, maxval = _read_raster(path, b"P6", 3)
    img = data.reshape(h, w, 3).transpose(2, 0, 1)
    return img.astype(np.float64) / maxval


def write_ppm(path: str, img: np.ndarray) -> None:
    """float image [3, H, W] in [0, 1] -> P6 file (values quantized to 8 bits,
    round-half-away handled by round-to-nearest-even of numpy)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] image, got {img.shape}")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.transpose(1, 2, 0).tobytes())


def read_pgm(path: str) -> np.ndarray:
    """P5 file -> uint8 array [H, W] of raw sample values."""
    data, w, h, _ = _read_raster(path, b"P5", 1)
    return data.reshape(h, w).copy()


def write_pgm(path: str, arr: np.ndarray, maxval: int = 255) -> None:
    """uint8-compatible [H, W] array -> P5 file.  Class maps go in raw
    (values 0/1, maxval 255 for viewer compatibility)."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"expected [H, W] array, got {arr.shape}")
    if arr.min() < 0 or arr.max() > maxval:
        raise ValueError(f"values outside [0, {maxval}]")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(arr.astype(np.uint8).tobytes())


def read_f64(path: str, shape: tuple[int, ...]) -> np.ndarray:
    """Raw little-endian float64 raster of the given shape."""
    n = int(np.prod(shape))
    blob = open(path, "rb").read()
    if len(blob) != 8 * n:
        raise PnmError(path, len(blob),
                       f"f64 raster has {len(blob)} bytes, expected {8 * n}")
    return np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape(shape)


def write_f64(path: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
    with open(path, "wb") as fh:
        fh.write(arr.astype("<f8", copy=False).tobytes())
