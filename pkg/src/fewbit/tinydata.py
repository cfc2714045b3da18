"""Tiny-dataset container and storage accounting.

File layout (little-endian)::

    magic   4s   b"TINY"
    version u16  1
    items   u64
    bits    u32  bits per item
    labels  u8   1 if a label section follows the payload
    payload      all items' bits concatenated, MSB-first within each byte,
                 zero-padded once at the very end
    [labels]     items x u16

Padding is applied to the whole payload rather than per item so that
72,000 ten-bit codes occupy exactly 90,000 bytes.
"""
from __future__ import annotations

import bz2
import math
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .validation import check_bits

MAGIC = b"TINY"
VERSION = 1
_HEADER = struct.Struct("<4sHQIB")
HEADER_SIZE = _HEADER.size  # 19

CODECS = {
    "deflate": lambda b: zlib.compress(b, 9),
    "bzip2": lambda b: bz2.compress(b, 9),
}


class TinyFormatError(ValueError):
    pass


def payload_size(item_count: int, bits_per_item: int) -> int:
    return -(-int(item_count) * int(bits_per_item) // 8)


def pack(features, labels=None) -> bytes:
    """Serialize (items, bits) 0/1 codes and optional u16 answers."""
    if isinstance(features, (list, tuple)):
        lengths = {len(f) for f in features}
        if len(lengths) > 1:
            raise ValueError(f"all bit vectors must share one length, got lengths {sorted(lengths)}")
        features = np.asarray(features, dtype=np.uint8).reshape(len(features), -1)
    bits = check_bits(features)
    n, width = bits.shape
    has_labels = labels is not None
    out = [_HEADER.pack(MAGIC, VERSION, n, width, int(has_labels)),
           np.packbits(bits.reshape(-1), bitorder="big").tobytes()]
    if has_labels:
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ValueError(f"expected {n} labels, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
            raise ValueError("labels must fit in u16")
        out.append(labels.astype("<u2").tobytes())
    return b"".join(out)


def unpack(blob: bytes) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverse of :func:`pack`; returns ``(bits, labels or None)``."""
    blob = bytes(blob)
    if len(blob) < HEADER_SIZE:
        raise TinyFormatError(f"truncated header: expected {HEADER_SIZE} bytes, got {len(blob)}")
    magic, version, n, width, flag = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise TinyFormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise TinyFormatError(f"unsupported version {version} at offset 4")
    if flag not in (0, 1):
        raise TinyFormatError(f"bad label flag {flag} at offset 18")
    size = payload_size(n, width)
    expected = HEADER_SIZE + size + (2 * n if flag else 0)
    if len(blob) != expected:
        kind = "truncated" if len(blob) < expected else "trailing bytes in"
        raise TinyFormatError(f"{kind} file: expected {expected} bytes, got {len(blob)}")
    raw = np.frombuffer(blob, dtype=np.uint8, count=size, offset=HEADER_SIZE)
    bits = np.unpackbits(raw, count=n * width, bitorder="big").reshape(n, width)
    labels = None
    if flag:
        labels = np.frombuffer(blob, dtype="<u2", count=n, offset=HEADER_SIZE + size).astype(np.int64)
    return bits, labels


def save(path, features, labels=None) -> None:
    with open(path, "wb") as fh:
        fh.write(pack(features, labels))


def load(path):
    with open(path, "rb") as fh:
        return unpack(fh.read())


def random_floats(count: int, rng: np.random.Generator) -> np.ndarray:
    """Float32 values with uniformly random bit patterns (NaN/Inf patterns redrawn).

    Uniform reals in [0, 1) are a poor incompressibility probe: their
    exponent byte is nearly constant, so only ~25 of 32 bits carry entropy.
    """
    words = rng.integers(0, 2 ** 32, size=int(count), dtype=np.uint32)
    while True:
        bad = (words & 0x7F800000) == 0x7F800000
        if not bad.any():
            return words.view(np.float32)
        words[bad] = rng.integers(0, 2 ** 32, size=int(bad.sum()), dtype=np.uint32)


def sig3(x: float) -> float:
    """Round to 3 significant figures."""
    if x == 0 or not math.isfinite(x):
        return x
    return float(f"{x:.3g}")


@dataclass(frozen=True)
class SizeReport:
    item_count: int
    dims: int
    n_bits: int
    codec: str
    packed_bytes: int
    file_bytes: int
    raw_float_bytes: int
    coded_float_bytes: int
    raw_over_packed: float
    coded_over_packed: float
    coded_over_raw: float

    def to_dict(self) -> dict:
        return asdict(self)


def size_report(item_count: int, dims: int, n_bits: int, float_buffer, codec: str = "deflate") -> SizeReport:
    """Bytes for packed codes vs 32-bit floats, raw and losslessly coded."""
    if codec not in CODECS:
        raise ValueError(f"unknown codec {codec!r}; choose from {sorted(CODECS)}")
    buf = np.ascontiguousarray(float_buffer, dtype="<f4").reshape(-1)
    if buf.size != item_count * dims:
        raise ValueError(f"float buffer holds {buf.size} values, expected items x dims = {item_count * dims}")
    packed = payload_size(item_count, n_bits)
    raw = item_count * dims * 4
    coded = len(CODECS[codec](buf.tobytes()))
    ratio = (lambda a, b: sig3(a / b)) if packed else (lambda a, b: math.inf)
    return SizeReport(item_count, dims, n_bits, codec, packed, packed + HEADER_SIZE, raw, coded,
                      ratio(raw, packed), ratio(coded, packed), sig3(coded / raw) if raw else math.nan)


@dataclass(frozen=True)
class SupervisionSize:
    bits_per_video: float
    coded_bytes: int
    num_videos: int
    codec: str

    def __float__(self) -> float:
        return self.bits_per_video


def supervision_size(qa_text: bytes, num_videos: int, codec: str = "bzip2") -> SupervisionSize:
    """Coded size of the training QA text in bits, divided over the videos."""
    if isinstance(qa_text, str):
        qa_text = qa_text.encode("utf-8")
    if not qa_text:
        raise ValueError("QA text is empty")
    if num_videos < 1:
        raise ValueError("num_videos must be >= 1")
    if codec not in CODECS:
        raise ValueError(f"unknown codec {codec!r}; choose from {sorted(CODECS)}")
    coded = len(CODECS[codec](qa_text))
    return SupervisionSize(8 * coded / num_videos, coded, int(num_videos), codec)
