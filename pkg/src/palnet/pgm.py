"""Binary PGM (P5, maxval 255) reading and writing."""

from __future__ import annotations

import numpy as np


class PgmError(Exception):
    pass


def write_pgm(path: str, values: np.ndarray) -> None:
    """Write a uint8 image; float inputs must already be in [0, 255]."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise PgmError(f"PGM images are 2-D, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(data):
            raise PgmError(f"{path}: truncated header")
        ch = data[pos : pos + 1]
        if ch == b"#":  # comment to end of line
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise PgmError(f"{path}: unterminated comment")
            pos += 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            fields.append(data[pos:end])
            pos = end
    if fields[0] != b"P5":
        raise PgmError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as exc:
        raise PgmError(f"{path}: corrupt header: {exc}") from exc
    if maxval != 255:
        raise PgmError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    pixels = data[pos : pos + w * h]
    if len(pixels) != w * h:
        raise PgmError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def to_unit_float(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 255.0


def normalized_gray(values: np.ndarray) -> np.ndarray:
    """Min-max scale to uint8; a flat map becomes uniform mid-gray."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo < 1e-12:
        return np.full(v.shape, 128, dtype=np.uint8)
    return np.clip(np.rint((v - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
