"""Binary netpbm readers/writers: PPM (P6) for images, PGM (P5) for masks/maps.

8-bit only (maxval 255). Chosen for bit-exact round trips with zero
dependencies; every byte of the payload is significant.
"""

from __future__ import annotations

import numpy as np


class NetpbmError(ValueError):
    """Malformed netpbm header or payload."""


def _read_header(data: bytes, magic: bytes):
    if data[:2] != magic:
        raise NetpbmError(f"bad magic {data[:2]!r}, expected {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise NetpbmError("truncated header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as e:
        raise NetpbmError(f"non-integer header fields {fields}") from e
    if width < 1 or height < 1:
        raise NetpbmError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 supported, got {maxval}")
    return width, height, pos


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into uint8 [3, H, W]."""
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, pos = _read_header(data, b"P6")
    need = width * height * 3
    payload = data[pos:pos + need]
    if len(payload) != need:
        raise NetpbmError(f"payload has {len(payload)} bytes, expected {need}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return img.transpose(2, 0, 1).copy()


def write_ppm(path, image: np.ndarray):
    """Write uint8 [3, H, W] as binary P6."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3 or img.dtype != np.uint8:
        raise NetpbmError(f"expected uint8 [3, H, W], got {img.dtype} {img.shape}")
    _, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.transpose(1, 2, 0).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 file into uint8 [H, W]."""
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, pos = _read_header(data, b"P5")
    need = width * height
    payload = data[pos:pos + need]
    if len(payload) != need:
        raise NetpbmError(f"payload has {len(payload)} bytes, expected {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, image: np.ndarray):
    """Write uint8 [H, W] as binary P5."""
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise NetpbmError(f"expected uint8 [H, W], got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
