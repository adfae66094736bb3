"""Quantized tensor types and dense <-> coordinate-sparse conversions.

Conventions used throughout the package:

* values are symmetric signed int8 (no zero point, no per-channel scales),
* dot products accumulate into 32-bit integers (the math is done in int64
  internally, but layer contracts keep every accumulator inside int32),
* requantization is a per-layer power-of-two right shift with
  round-half-away-from-zero rounding and saturation to [-128, 127],
* flat positions are row-major, and sparse entries are stored with strictly
  increasing positions so every structure has one canonical serialization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

INT8_MIN = -128
INT8_MAX = 127

# A dot product of up to 4096 int8*int8 terms stays inside int32:
# 4096 * 128 * 128 = 2**26 < 2**31.
MAX_SAFE_DOT_TERMS = 4096


def _require_int8_range(values: np.ndarray, what: str) -> None:
    if values.size and (values.min() < INT8_MIN or values.max() > INT8_MAX):
        raise ValueError(f"{what} outside signed 8-bit range [-128, 127]")


@dataclass(frozen=True, eq=False)
class QTensor:
    """Dense signed-int8 tensor; shape is carried by the values array."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.dtype != np.int8:
            _require_int8_range(arr, "QTensor values")
            arr = arr.astype(np.int8)
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, QTensor)
            and self.shape == other.shape
            and bool(np.array_equal(self.values, other.values))
        )


@dataclass(frozen=True, eq=False)
class SparseKernel:
    """One output channel's weights in coordinate form.

    ``positions`` are flat row-major indices into ``shape``, strictly
    increasing; ``weights`` are the matching nonzero int8 values.
    """

    kernel_id: int
    shape: tuple[int, ...]
    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64)
        w = np.asarray(self.weights)
        if w.dtype != np.int8:
            _require_int8_range(w, f"kernel {self.kernel_id} weights")
            w = w.astype(np.int8)
        if pos.shape != w.shape or pos.ndim != 1:
            raise ValueError(f"kernel {self.kernel_id}: positions/weights shape mismatch")
        if pos.size:
            if pos[0] < 0 or pos[-1] >= int(np.prod(self.shape)):
                raise ValueError(f"kernel {self.kernel_id}: position out of bounds")
            if np.any(np.diff(pos) <= 0):
                raise ValueError(f"kernel {self.kernel_id}: positions must be strictly increasing")
        if np.any(w == 0):
            raise ValueError(f"kernel {self.kernel_id}: zero weights are not stored")
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_entries(
        cls,
        kernel_id: int,
        shape: Sequence[int],
        entries: Iterable[tuple[Sequence[int] | int, int]],
    ) -> "SparseKernel":
        """Build from (multi-index or flat position, weight) pairs."""
        shape = tuple(shape)
        flat = []
        for pos, w in entries:
            if isinstance(pos, (int, np.integer)):
                flat.append((int(pos), int(w)))
            else:
                flat.append((int(np.ravel_multi_index(tuple(pos), shape)), int(w)))
        flat.sort()
        positions = np.array([p for p, _ in flat], dtype=np.int64)
        weights = np.array([w for _, w in flat], dtype=np.int64)
        _require_int8_range(weights, f"kernel {kernel_id} weights")
        return cls(kernel_id, shape, positions, weights.astype(np.int8))

    @property
    def n_nonzero(self) -> int:
        return int(self.positions.size)

    def entries(self) -> list[tuple[tuple[int, ...], int]]:
        """Entries as (multi-index, weight) pairs in row-major order."""
        return [
            (tuple(int(i) for i in np.unravel_index(int(p), self.shape)), int(w))
            for p, w in zip(self.positions, self.weights)
        ]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SparseKernel)
            and self.kernel_id == other.kernel_id
            and self.shape == other.shape
            and bool(np.array_equal(self.positions, other.positions))
            and bool(np.array_equal(self.weights, other.weights))
        )


def sparse_to_dense(kernel: SparseKernel) -> QTensor:
    """Scatter a coordinate-form kernel into a dense int8 tensor."""
    flat = np.zeros(int(np.prod(kernel.shape)), dtype=np.int8)
    flat[kernel.positions] = kernel.weights
    return QTensor(flat.reshape(kernel.shape))


def dense_to_sparse(tensor: QTensor | np.ndarray, kernel_id: int) -> SparseKernel:
    """Collect the nonzero positions of a dense tensor, row-major."""
    values = tensor.values if isinstance(tensor, QTensor) else np.asarray(tensor, dtype=np.int8)
    flat = values.reshape(-1)
    positions = np.flatnonzero(flat).astype(np.int64)
    return SparseKernel(kernel_id, values.shape, positions, flat[positions])


@dataclass(frozen=True)
class Requantizer:
    """Power-of-two right shift, round half away from zero, int8 saturation."""

    right_shift: int = 0

    def __post_init__(self):
        if self.right_shift < 0:
            raise ValueError("right_shift must be non-negative")

    def apply(self, acc: np.ndarray | int) -> np.ndarray:
        acc = np.asarray(acc, dtype=np.int64)
        if self.right_shift > 0:
            half = 1 << (self.right_shift - 1)
            magnitude = (np.abs(acc) + half) >> self.right_shift
            acc = np.sign(acc) * magnitude
        return np.clip(acc, INT8_MIN, INT8_MAX).astype(np.int8)


def requantize(acc: np.ndarray | int, requantizer: Requantizer) -> np.ndarray | int:
    """Requantize a 32-bit accumulator (or array of them) to int8."""
    out = requantizer.apply(acc)
    if np.isscalar(acc) or np.ndim(acc) == 0:
        return int(out)
    return out
