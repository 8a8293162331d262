"""Binary netpbm I/O: 16-bit PGM depth frames (millimeters) and 8-bit PPM
color frames. 16-bit PGM samples are big-endian per the netpbm convention;
depth converts to meters (float32) on read."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InvalidSpec


def _read_header(data: bytes, magic: bytes):
    pos = 0
    fields = []
    if not data.startswith(magic):
        raise InvalidSpec(f"expected {magic.decode()} file")
    pos = len(magic)
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    return fields[0], fields[1], fields[2], pos + 1


def write_pgm16(path: str | Path, depth_m: np.ndarray) -> None:
    """Write a depth image (meters, float) as 16-bit binary PGM in millimeters."""
    depth_m = np.asarray(depth_m)
    mm = np.clip(np.rint(depth_m * 1000.0), 0, 65535).astype(">u2")
    h, w = mm.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(mm.tobytes())


def read_pgm16(path: str | Path) -> np.ndarray:
    """Read a 16-bit binary PGM depth image (millimeters) as meters float32."""
    data = Path(path).read_bytes()
    w, h, maxval, off = _read_header(data, b"P5")
    if maxval != 65535:
        raise InvalidSpec(f"depth PGM must be 16-bit (maxval 65535), got {maxval}")
    mm = np.frombuffer(data, dtype=">u2", count=w * h, offset=off).reshape(h, w)
    return (mm.astype(np.float32)) / 1000.0


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Write an (h, w, 3) uint8 image as binary PPM."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InvalidSpec("PPM image must be (h, w, 3) uint8")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, maxval, off = _read_header(data, b"P6")
    if maxval != 255:
        raise InvalidSpec(f"color PPM must be 8-bit (maxval 255), got {maxval}")
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=off).reshape(h, w, 3).copy()
