"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from .tasks import ANSWERS, FRAME_SIZE, N_FRAMES, QUESTIONS


def check_videos(X, dtype=np.float32) -> np.ndarray:
    """Accept a (n, T, H, W) clip array with values in [0, 1]."""
    X = check_array(X, ensure_2d=False, allow_nd=True, dtype=dtype)
    if X.ndim != 4 or X.shape[1:] != (N_FRAMES, FRAME_SIZE, FRAME_SIZE):
        raise ValueError(f"expected clips of shape (n, {N_FRAMES}, {FRAME_SIZE}, {FRAME_SIZE}), got {X.shape}")
    return X


def check_questions(questions, n: int) -> np.ndarray:
    if questions is None:
        raise ValueError("questions are required: one question-type id per sample")
    q = np.asarray(questions)
    if q.ndim != 1 or not np.issubdtype(q.dtype, np.integer):
        raise ValueError("questions must be a 1-d integer array of question-type ids")
    check_consistent_length(q, np.empty(n))
    if q.size and (q.min() < 0 or q.max() >= len(QUESTIONS)):
        raise ValueError(f"question ids must lie in [0, {len(QUESTIONS)})")
    return q.astype(np.int64)


def check_answers(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise ValueError("answers must be a 1-d integer array of answer ids")
    check_consistent_length(y, np.empty(n))
    if y.size and (y.min() < 0 or y.max() >= len(ANSWERS)):
        raise ValueError(f"answer ids must lie in [0, {len(ANSWERS)})")
    return y.astype(np.int64)


def check_bits(bits, n_bits: int | None = None) -> np.ndarray:
    """(n, N) array of 0/1 values as uint8."""
    bits = np.asarray(bits)
    if bits.ndim == 1:
        bits = bits[None, :]
    if bits.ndim != 2:
        raise ValueError(f"bit codes must be a 2-d (items, bits) array, got shape {bits.shape}")
    if n_bits is not None and bits.shape[1] != n_bits:
        raise ValueError(f"expected {n_bits}-bit codes, got {bits.shape[1]}")
    if bits.size and not np.isin(bits, (0, 1)).all():
        raise ValueError("bit codes may only contain 0 and 1")
    return bits.astype(np.uint8)


def check_batch_size(batch_size: int) -> int:
    if int(batch_size) < 2:
        raise ValueError(f"batch_size must be >= 2 for batch norm, got {batch_size}")
    return int(batch_size)
