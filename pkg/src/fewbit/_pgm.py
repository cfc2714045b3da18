"""Binary greyscale PGM (P5, 8-bit) read/write."""
from __future__ import annotations

import numpy as np


def to_uint8(image, lo=None, hi=None) -> np.ndarray:
    """Scale to 0..255; values are clipped to [lo, hi] (default [0, 1])."""
    image = np.asarray(image, dtype=np.float64)
    lo = 0.0 if lo is None else lo
    hi = 1.0 if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    return np.round(np.clip((image - lo) / span, 0.0, 1.0) * 255).astype(np.uint8)


def encode_pgm(image, lo=None, hi=None) -> bytes:
    pixels = to_uint8(image, lo, hi)
    if pixels.ndim != 2:
        raise ValueError(f"PGM needs a 2-d image, got shape {pixels.shape}")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path, image, lo=None, hi=None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(image, lo, hi))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)
