"""Dense row-major tensors.

A tensor is a C-contiguous ``numpy.ndarray`` of float32 (training) or
float64 (verification). The helpers here validate shapes and raise
structured errors instead of relying on numpy broadcasting.
"""

from __future__ import annotations

from typing import Literal, Sequence, Union

import numpy as np

from hippofusion.errors import AxisError, DimensionMismatchError, ShapeMismatchError, WindowOutOfBoundsError

Tensor = np.ndarray
Precision = Literal["float32", "float64"]

MAX_RANK = 5

_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def dtype_for(precision: Precision) -> np.dtype:
    return np.dtype(precision)


def as_tensor(data, precision: Precision = "float32") -> Tensor:
    """Copy ``data`` into a fresh row-major tensor of the given precision."""
    arr = np.array(data, dtype=dtype_for(precision), order="C", copy=True)
    if arr.ndim > MAX_RANK:
        raise AxisError(f"Tensor rank {arr.ndim} exceeds {MAX_RANK}", rank=arr.ndim)
    if arr.ndim and min(arr.shape) < 1:
        raise ShapeMismatchError(f"Tensor extents must be >= 1, got {arr.shape}", shape_a=arr.shape)
    return arr


def zeros(shape: Sequence[int], precision: Precision = "float32") -> Tensor:
    return np.zeros(tuple(shape), dtype=dtype_for(precision))


def row_major_offset(shape: Sequence[int], index: Sequence[int]) -> int:
    """Flat offset of ``index`` in a row-major tensor of ``shape``."""
    offset = 0
    for extent, i in zip(shape, index):
        offset = offset * extent + i
    return offset


def elementwise(op: str, a: Tensor, b: Union[Tensor, float]) -> Tensor:
    """Apply add/sub/mul between equal-shape tensors, or scale by a scalar."""
    if op == "scale":
        if not np.isscalar(b):
            raise ShapeMismatchError("scale expects a scalar operand", shape_a=a.shape, shape_b=np.shape(b))
        return np.multiply(a, a.dtype.type(b))
    if op not in _OPS:
        raise ValueError(f"Unknown elementwise op: {op}")
    if np.isscalar(b):
        return _OPS[op](a, a.dtype.type(b))
    if a.shape != b.shape:
        raise ShapeMismatchError(
            f"{op}: shapes {a.shape} and {b.shape} differ",
            shape_a=a.shape,
            shape_b=b.shape,
        )
    return _OPS[op](a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product of an m×k and a k×n tensor."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionMismatchError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}",
            shape_a=a.shape,
            shape_b=b.shape,
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatchError(
            f"matmul inner extents differ: {a.shape} x {b.shape}",
            shape_a=a.shape,
            shape_b=b.shape,
        )
    return np.matmul(a, b)


def crop(t: Tensor, origin: Sequence[int], size: Sequence[int]) -> Tensor:
    """Copy the axis-aligned block starting at ``origin`` with extents ``size``."""
    if len(origin) != t.ndim or len(size) != t.ndim:
        raise AxisError(
            f"crop window rank ({len(origin)}, {len(size)}) does not match tensor rank {t.ndim}",
            rank=t.ndim,
        )
    slices = []
    for axis, (o, s, extent) in enumerate(zip(origin, size, t.shape)):
        if o < 0 or s < 1 or o + s > extent:
            raise WindowOutOfBoundsError(
                f"crop window [{o}, {o + s}) outside axis {axis} of extent {extent}",
                axis=axis,
                origin=o,
                size=s,
                extent=extent,
            )
        slices.append(slice(o, o + s))
    return np.array(t[tuple(slices)], order="C", copy=True)


def embed(block: Tensor, into: Tensor, origin: Sequence[int]) -> Tensor:
    """Return a copy of ``into`` with ``block`` written at ``origin``."""
    if block.ndim != into.ndim:
        raise AxisError(f"embed rank mismatch {block.ndim} vs {into.ndim}", rank=into.ndim)
    slices = []
    for axis, (o, s, extent) in enumerate(zip(origin, block.shape, into.shape)):
        if o < 0 or o + s > extent:
            raise WindowOutOfBoundsError(
                f"embed window [{o}, {o + s}) outside axis {axis} of extent {extent}",
                axis=axis,
                origin=o,
                size=s,
                extent=extent,
            )
        slices.append(slice(o, o + s))
    out = into.copy()
    out[tuple(slices)] = block
    return out


def flip_axis(t: Tensor, axis: int) -> Tensor:
    """Reverse element order along ``axis``."""
    if not 0 <= axis < t.ndim:
        raise AxisError(f"axis {axis} out of range for rank {t.ndim}", axis=axis, rank=t.ndim)
    return np.ascontiguousarray(np.flip(t, axis=axis))
