"""Dense 4-D (batch, channel, height, width) tensor values.

Everything downstream (scans, convolutions, the network) moves data around
as these tensors.  They are thin immutable wrappers over contiguous
row-major numpy buffers; float32 is the production dtype, float64 exists
for gradient-check oracles.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence, Union

import numpy as np

Scalar = Union[int, float]


class Shape(NamedTuple):
    """(batch, channels, height, width), all nonnegative."""

    b: int
    c: int
    h: int
    w: int

    def size(self) -> int:
        return self.b * self.c * self.h * self.w


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable NCHW array of 32-bit (or 64-bit, for oracles) reals.

    The wrapped buffer is contiguous and row-major, so directional scans
    stride contiguously along rows for left/right and by ``w`` for up/down.
    Construction takes ownership of the buffer and freezes it; wrap arrays
    someone else may still write through ``from_array`` instead.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        if data.ndim != 4:
            raise ShapeError(f"tensor data must be 4-D NCHW, got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            raise ShapeError(f"tensor dtype must be float32 or float64, got {data.dtype}")
        arr = np.ascontiguousarray(data)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> Shape:
        return Shape(*self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype})"

    def assert_finite(self, context: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {context}")


def zeros(shape: Sequence[int], dtype=np.float32) -> Tensor:
    """All-zero tensor of the given (b, c, h, w) shape."""
    b, c, h, w = shape
    if min(b, c, h, w) < 0:
        raise ShapeError(f"negative dimension in shape {tuple(shape)}")
    return Tensor(np.zeros((b, c, h, w), dtype=dtype))


def from_array(data, dtype=np.float32) -> Tensor:
    """Tensor from any 4-D array-like, always copying into the requested dtype."""
    return Tensor(np.array(data, dtype=dtype))


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    # Sole broadcast allowed: a single-channel spatial weight map applied
    # channel-wise against a multi-channel tensor.
    if sb.c == 1 and (sb.b, sb.h, sb.w) == (sa.b, sa.h, sa.w):
        return
    raise ShapeError(f"{op}: incompatible shapes {tuple(sa)} and {tuple(sb)}")


def ewise_add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if isinstance(b, Tensor):
        _binary_shapes(a, b, "ewise_add")
        return Tensor(a.data + b.data)
    return Tensor(a.data + a.dtype.type(b))


def ewise_mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if isinstance(b, Tensor):
        _binary_shapes(a, b, "ewise_mul")
        return Tensor(a.data * b.data)
    return Tensor(a.data * a.dtype.type(b))


def scale(a: Tensor, s: Scalar) -> Tensor:
    return ewise_mul(a, s)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, preserving part order."""
    if not parts:
        raise ShapeError("concat_channels: empty part list")
    first = parts[0].shape
    for p in parts[1:]:
        s = p.shape
        if (s.b, s.h, s.w) != (first.b, first.h, first.w):
            raise ShapeError(
                f"concat_channels: spatial mismatch {tuple(first)} vs {tuple(s)}"
            )
    if len(parts) == 1:
        return parts[0]
    return Tensor(np.concatenate([p.data for p in parts], axis=1))


def slice_channels(t: Tensor, start: int, stop: int) -> Tensor:
    """Channel range [start, stop) as a new tensor."""
    if not (0 <= start <= stop <= t.shape.c):
        raise ShapeError(f"slice_channels: range [{start}, {stop}) outside {tuple(t.shape)}")
    return Tensor(t.data[:, start:stop].copy())


def flip_lr(t: Tensor) -> Tensor:
    """Reverse the width axis (horizontal mirror)."""
    return Tensor(np.ascontiguousarray(t.data[:, :, :, ::-1]))


def flip_ud(t: Tensor) -> Tensor:
    """Reverse the height axis (vertical mirror)."""
    return Tensor(np.ascontiguousarray(t.data[:, :, ::-1, :]))
