"""
Tensor kernel layer for the grouped-query attention toolkit.
Dense row-major arrays (numpy), shape-checked matmul, stable row softmax,
order-independent mean pooling and a deterministic SplitMix64 generator.
"""

import numpy as np
from typing import List, Optional, Sequence

from config import Config

# Dense arrays are plain ndarrays, float32 or float64
Tensor = np.ndarray

DTYPES = {
    'f32': np.float32,
    'f64': np.float64
}

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class DimensionError(ValueError):
    """Raised when operand extents do not line up."""


class NonFiniteError(ArithmeticError):
    """Raised when a NaN or Inf shows up in an input or result."""


class ArgumentError(ValueError):
    """Raised for invalid non-shape arguments."""


def dtype_for(precision: Optional[str] = None):
    """Map a precision tag ('f32' / 'f64') to a numpy dtype."""
    precision = precision or Config.PRECISION
    try:
        return DTYPES[precision]
    except KeyError:
        raise ArgumentError(f"Unknown precision '{precision}'") from None


def ensure_finite(a: Tensor, context: str = "tensor") -> Tensor:
    """Raise NonFiniteError if any element is NaN or Inf."""
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"Non-finite values in {context}")
    return a


def zeros(shape: Sequence[int], precision: Optional[str] = None) -> Tensor:
    return np.zeros(tuple(shape), dtype=dtype_for(precision))


def identity(n: int, precision: Optional[str] = None) -> Tensor:
    return np.eye(n, dtype=dtype_for(precision))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product, accumulated in the operands' precision.

    `a` may carry leading batch axes; `b` is a matrix or a broadcast-compatible stack.

    Args:
        a (Tensor): [..., m, k]
        b (Tensor): [..., k, n]

    Returns:
        Tensor: [..., m, n]

    Raises:
        DimensionError: If the inner extents differ or an operand is not at least 2-D
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul precision mismatch: {a.dtype} vs {b.dtype}")
    return ensure_finite(np.matmul(a, b), "matmul result")


def softmax_rows(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Row-wise softmax over the last axis with max subtraction.

    Args:
        a (Tensor): Finite scores [..., n]
        mask (np.ndarray): Optional boolean array broadcastable to `a`; False entries
            get exactly zero probability. Every row needs at least one True entry.

    Returns:
        Tensor: Probabilities, each row summing to 1
    """
    ensure_finite(a, "softmax input")
    if mask is None:
        shifted = a - np.max(a, axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(mask, a.shape)
        if not np.all(np.any(mask, axis=-1)):
            raise ArgumentError("softmax mask leaves an empty row")
        row_max = np.max(np.where(mask, a, -np.inf), axis=-1, keepdims=True)
        shifted = np.where(mask, a - row_max, 0)
        e = np.where(mask, np.exp(shifted), 0).astype(a.dtype, copy=False)
    return e / np.sum(e, axis=-1, keepdims=True)


def mean_over(arrays: List[Tensor]) -> Tensor:
    """
    Elementwise arithmetic mean of equally shaped tensors.

    Values are sorted along the stacking axis before summation, so the result does
    not depend on argument order. Where all inputs agree the common value is
    returned exactly.

    Raises:
        ArgumentError: On an empty list
        DimensionError: On differing shapes
    """
    if not arrays:
        raise ArgumentError("mean_over needs at least one tensor")
    first = arrays[0]
    for other in arrays[1:]:
        if other.shape != first.shape:
            raise DimensionError(f"mean_over shape mismatch: {first.shape} vs {other.shape}")
    if len(arrays) == 1:
        return first.copy()

    stacked = np.sort(np.stack(arrays, axis=0), axis=0)
    low, high = stacked[0], stacked[-1]
    mean = (np.sum(stacked, axis=0) / first.dtype.type(len(arrays))).astype(first.dtype)
    # Rounding may nudge the mean just outside [low, high]
    mean = np.clip(mean, low, high)
    return ensure_finite(np.where(low == high, low, mean), "mean_over result")


def _splitmix(x: np.ndarray) -> np.ndarray:
    z = x
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *tags: int) -> int:
    """Derive a child seed from a parent seed and integer tags."""
    value = seed & _MASK64
    with np.errstate(over='ignore'):
        for tag in tags:
            x = np.array([(value + (tag & _MASK64) + 1) & _MASK64], dtype=np.uint64) * _GOLDEN
            value = int(_splitmix(x)[0])
    return value


class Rng:
    """
    Counter-based SplitMix64 generator.

    Draw i of a stream is mix(seed + i * golden), so identical seeds give identical
    streams on every platform. Instances are single-owner; fork for other owners.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        """Draw `n` raw 64-bit values."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over='ignore'):
            return _splitmix(np.uint64(self.seed) + idx * _GOLDEN)

    def uniform(self, shape: Sequence[int]) -> np.ndarray:
        """Float64 draws in [0, 1) with 53 random bits each."""
        shape = tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        bits = self.next_u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) * (1.0 / (1 << 53))).reshape(shape)

    def normal(self, shape: Sequence[int], std: float = 1.0, precision: Optional[str] = None) -> Tensor:
        """Zero-mean normal draws via Box-Muller."""
        shape = tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        u1 = 1.0 - self.uniform((n,))
        u2 = self.uniform((n,))
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return (z * std).reshape(shape).astype(dtype_for(precision))

    def integers(self, high: int, shape: Sequence[int]) -> np.ndarray:
        """Integers in [0, high)."""
        if high < 1:
            raise ArgumentError(f"integers needs high >= 1, got {high}")
        return np.minimum(np.floor(self.uniform(shape) * high).astype(np.int64), high - 1)

    def fork(self, tag: int) -> "Rng":
        """Independent child stream; does not advance this generator."""
        return Rng(derive_seed(self.seed, tag))
