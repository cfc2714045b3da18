"""Named child random streams derived from one integer seed."""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "binarizer", "shuffle", "attack", "eval")


def child_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name`` under ``seed``.

    The stream key uses crc32 of the name so it is stable across processes
    and Python versions (unlike ``hash``).
    """
    key = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(key))
