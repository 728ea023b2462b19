"""Dense N-dimensional value grid used throughout the pipeline.

A Tensor is a shape tuple plus a flat, row-major value buffer. Values are
float32 at rest (files, checkpoints); float64 tensors are accepted so that
numerical verification can run entirely in 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor extents do not match an operation's contract."""


@dataclass
class Tensor:
    shape: tuple[int, ...]
    data: np.ndarray  # flat, row-major over `shape`

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.data = np.asarray(self.data)
        if self.data.ndim != 1:
            self.data = self.data.reshape(-1)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        n = math.prod(self.shape) if self.shape else 1
        if self.data.size != n:
            raise ShapeError(
                f"shape {self.shape} implies {n} values, buffer holds {self.data.size}"
            )

    @classmethod
    def from_array(cls, arr, dtype=np.float32) -> "Tensor":
        a = np.asarray(arr, dtype=dtype)
        return cls(a.shape, a.reshape(-1).copy())

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "Tensor":
        shape = tuple(int(s) for s in shape)
        return cls(shape, np.zeros(math.prod(shape), dtype=dtype))

    def view(self) -> np.ndarray:
        """Row-major ndarray view of the buffer."""
        return self.data.reshape(self.shape)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def copy(self) -> "Tensor":
        return Tensor(self.shape, self.data.copy())

    def assert_finite(self, context: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {context}")
        return self


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    a = np.asarray(x)
    if dtype is None:
        dtype = a.dtype if a.dtype in (np.float32, np.float64) else np.float32
    return Tensor.from_array(a, dtype=dtype)
