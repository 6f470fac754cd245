"""Dense NCHW tensors as numpy arrays, plus the shape helpers every layer needs.

A tensor here is just a 4-D ``numpy.ndarray`` in row-major (N, C, H, W) order
with dtype float32 or float64.
"""
from __future__ import annotations

from collections.abc import Sequence
from typing import NamedTuple

import numpy as np

DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


class GeometryError(ValueError):
    pass


class OutputShape(NamedTuple):
    h_out: int
    w_out: int


def _check_dims(shape: Sequence[int]) -> tuple[int, int, int, int]:
    if len(shape) != 4:
        raise ShapeError(f"expected 4 dimensions (N, C, H, W), got {tuple(shape)}")
    for dim in shape:
        if int(dim) != dim or dim < 1:
            raise ShapeError(f"all dimensions must be positive integers, got {tuple(shape)}")
    return tuple(int(d) for d in shape)  # type: ignore[return-value]


def tensor_create(shape, fill=0.0, *, seed: int | None = None, dtype=np.float32) -> np.ndarray:
    """Create an (N, C, H, W) tensor.

    ``fill`` is a number (constant), a flat sequence of N*C*H*W values, or the
    string ``"uniform"`` which draws U[-1, 1) from ``numpy.random.default_rng(seed)``.
    """
    shape = _check_dims(shape)
    if np.dtype(dtype) not in [np.dtype(d) for d in DTYPES]:
        raise TypeError(f"unsupported dtype {dtype}")
    if isinstance(fill, str):
        if fill != "uniform":
            raise ValueError(f"unknown fill {fill!r}")
        rng = np.random.default_rng(seed)
        return rng.uniform(-1.0, 1.0, size=shape).astype(dtype)
    if np.isscalar(fill):
        return np.full(shape, fill, dtype=dtype)
    data = np.asarray(fill, dtype=dtype).ravel()
    if data.size != int(np.prod(shape)):
        raise ShapeError(f"sequence of length {data.size} cannot fill shape {shape}")
    return data.reshape(shape).copy()


def conv_output_shape(in_hw, geom) -> OutputShape:
    """Spatial output size of a (possibly dilated, strided) convolution.

    ``geom`` is anything exposing ``k_h, k_w, stride, padding, dilation``.
    """
    h, w = in_hw
    extent_h = geom.dilation * (geom.k_h - 1) + 1
    extent_w = geom.dilation * (geom.k_w - 1) + 1
    if extent_h > h + 2 * geom.padding or extent_w > w + 2 * geom.padding:
        raise GeometryError(
            f"effective kernel {extent_h}x{extent_w} exceeds padded input "
            f"{h + 2 * geom.padding}x{w + 2 * geom.padding}"
        )
    h_out = (h + 2 * geom.padding - extent_h) // geom.stride + 1
    w_out = (w + 2 * geom.padding - extent_w) // geom.stride + 1
    return OutputShape(h_out, w_out)


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ShapeError("nothing to concatenate")
    n, _, h, w = parts[0].shape
    for p in parts:
        if p.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(
                f"cannot concatenate {p.shape} with parts of batch/spatial shape {(n, h, w)}"
            )
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=1)


def channel_offsets(sizes: Sequence[int]) -> list[int]:
    return [0, *np.cumsum(sizes).tolist()]


def split_channels(x: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    """Inverse of :func:`concat_channels` for the given per-part channel counts."""
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    off = channel_offsets(sizes)
    return [x[:, off[i]:off[i + 1]] for i in range(len(sizes))]
