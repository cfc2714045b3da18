"""The few-bit bottleneck: encode, batch-norm, tanh, binarize, decode.

Training uses stochastic binarization with a straight-through backward pass;
inference uses the sign rule (``a >= 0`` maps to bit 1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._rng import child_rng
from .diffcore import BatchNorm, Dense, Module, Tensor, functional as F
from .diffcore.tensor import get_default_dtype

SWEEP_LEVELS = (1, 2, 4, 10, 100, 1000)
BINARIZERS = ("stochastic", "sign", "identity")


@dataclass(frozen=True)
class FeatCompConfig:
    n_bits: int
    input_dims: tuple = (8, 4, 4, 16)
    seed: int = 0

    def __post_init__(self):
        if int(self.n_bits) < 1:
            raise ValueError(f"n_bits must be >= 1, got {self.n_bits}")
        dims = tuple(int(d) for d in np.atleast_1d(self.input_dims))
        if not dims or min(dims) < 1:
            raise ValueError(f"input_dims must be positive, got {self.input_dims}")
        object.__setattr__(self, "n_bits", int(self.n_bits))
        object.__setattr__(self, "input_dims", dims)

    @property
    def flat_dim(self) -> int:
        return int(np.prod(self.input_dims))


def to_bits(signs: np.ndarray) -> np.ndarray:
    """{-1, +1} -> {0, 1}."""
    return (np.asarray(signs) > 0).astype(np.uint8)


def to_signs(bits: np.ndarray, dtype=None) -> np.ndarray:
    """{0, 1} -> {-1, +1} via ``2 * bit - 1``."""
    return (2 * np.asarray(bits, dtype=np.int8) - 1).astype(dtype or get_default_dtype())


def binarize_deterministic(a) -> np.ndarray:
    """Sign rule with ties going to 1."""
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    return (data >= 0).astype(np.uint8)


def binarize_stochastic(a: Tensor, rng: np.random.Generator) -> Tensor:
    """Draw b = +1 with probability (1 + a) / 2, else -1; gradient passes straight through."""
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if a.size and (a.data.max() > 1 + 1e-6 or a.data.min() < -1 - 1e-6):
        raise ValueError(f"binarize_stochastic: activations must lie in [-1, 1], got range "
                         f"[{a.data.min():.6g}, {a.data.max():.6g}]")
    u = rng.random(a.shape)
    b = np.where(u < (1 + a.data) / 2, 1, -1).astype(a.dtype)
    return F.straight_through(a, b)


class FeatComp(Module):
    """``f_dec . BIN . tanh . BN . f_enc`` over a flattened feature tensor."""

    def __init__(self, config: FeatCompConfig, rng: np.random.Generator | None = None, dtype=None):
        self.config = config
        rng = rng if rng is not None else child_rng(config.seed, "init", 1)
        d, n = config.flat_dim, config.n_bits
        self.enc = Dense(d, n, rng, dtype=dtype)
        self.bn = BatchNorm(n, dtype=dtype)
        self.dec = Dense(n, d, rng, dtype=dtype)

    @property
    def n_bits(self) -> int:
        return self.config.n_bits

    def encode(self, x: Tensor) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        dims, d = self.config.input_dims, self.config.flat_dim
        if x.shape == dims or x.shape == (d,):
            flat = F.reshape(x, (1, d))
        elif x.shape[1:] == dims or (x.ndim == 2 and x.shape[1] == d):
            flat = F.reshape(x, (x.shape[0], d))
        else:
            raise F.ShapeError(f"encode: input of shape {x.shape} does not flatten to {dims}")
        return self.enc(flat)

    def activate(self, xp: Tensor) -> Tensor:
        if self.training and xp.shape[0] < 2:
            raise ValueError("activate: train mode needs a batch of at least 2 items for batch norm")
        return F.tanh(self.bn(xp))

    def decode(self, b: Tensor) -> Tensor:
        b = b if isinstance(b, Tensor) else Tensor(b)
        if b.shape[-1] != self.n_bits:
            raise F.ShapeError(f"decode: expected {self.n_bits} bits, got shape {b.shape}")
        if b.ndim == 1:
            b = F.reshape(b, (1, self.n_bits))
        out = self.dec(b)
        return F.reshape(out, (b.shape[0],) + self.config.input_dims)

    def binarize(self, a: Tensor, binarizer: str, rng: np.random.Generator | None) -> tuple[Tensor, np.ndarray]:
        if binarizer == "stochastic":
            if rng is None:
                raise ValueError("stochastic binarization needs an rng")
            b = binarize_stochastic(a, rng)
            return b, to_bits(b.data)
        if binarizer == "sign":
            bits = binarize_deterministic(a)
            return F.straight_through(a, to_signs(bits, a.dtype)), bits
        if binarizer == "identity":
            return a, binarize_deterministic(a)
        raise ValueError(f"unknown binarizer {binarizer!r}; expected one of {BINARIZERS}")

    def forward(self, x: Tensor, rng: np.random.Generator | None = None,
                binarizer: str | None = None) -> tuple[Tensor, np.ndarray]:
        """Return ``(x_dec, x_bin)``; x_bin is a (B, N) uint8 array."""
        binarizer = binarizer or ("stochastic" if self.training else "sign")
        a = self.activate(self.encode(x))
        b, bits = self.binarize(a, binarizer, rng)
        return self.decode(b), bits

    def compress(self, x) -> np.ndarray:
        """Eval-mode bits for a batch of features; does not touch BN statistics."""
        was = self.training
        self.eval()
        try:
            return binarize_deterministic(self.activate(self.encode(x)))
        finally:
            self.train(was)
