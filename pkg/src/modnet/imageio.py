"""Binary PPM/PGM image files (P6 and P5, 8-bit)."""

from __future__ import annotations

import os

import numpy as np

__all__ = ["write_ppm", "read_ppm", "write_pgm", "read_pgm", "ImageFormatError"]


class ImageFormatError(ValueError):
    pass


def _header(magic: bytes, width: int, height: int) -> bytes:
    return b"%s\n%d %d\n255\n" % (magic, width, height)


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ImageFormatError(f"PPM wants uint8 HxWx3, got {image.dtype} "
                               f"{image.shape}")
    height, width = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(_header(b"P6", width, height))
        fh.write(image.tobytes())


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ImageFormatError(f"PGM wants uint8 HxW, got {image.dtype} "
                               f"{image.shape}")
    height, width = image.shape
    with open(path, "wb") as fh:
        fh.write(_header(b"P5", width, height))
        fh.write(image.tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    # Header is whitespace-separated tokens, with optional '#' comment lines.
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise ImageFormatError(f"{path}: truncated header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise ImageFormatError(f"{path}: unterminated comment")
            pos += 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()}, "
                               f"got {tokens[0].decode(errors='replace')}")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise ImageFormatError(f"{path}: non-numeric header fields") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    expected = width * height * channels
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise ImageFormatError(f"{path}: raster has {len(raster)} bytes, "
                               f"expected {expected}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, channels).copy()


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)
