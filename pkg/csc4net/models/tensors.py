"""
Dense tensor domain types.

Arrays are float64, C-ordered (channel-major, then row, then column) and
treated as immutable once wrapped.
"""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from ..core.exceptions import DimensionError, NumericError

ORTHOGONALITY_TOL = 1e-8
FILTER_NORM_SLACK = 1e-9


def as_float_array(data, ndim: int, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Image2:
    """Single-channel intensity image (height x width)"""
    data: np.ndarray

    def __post_init__(self):
        arr = as_float_array(self.data, 2, "Image2")
        object.__setattr__(self, "data", frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def as_tensor(self) -> "Tensor3":
        return Tensor3(self.data[np.newaxis])


@dataclass(frozen=True)
class Tensor3:
    """Multi-channel feature map (channels x height x width)"""
    data: np.ndarray

    def __post_init__(self):
        arr = as_float_array(self.data, 3, "Tensor3")
        object.__setattr__(self, "data", frozen(arr))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


def unwrap(value) -> np.ndarray:
    """Plain array behind an ``Image2``/``Tensor3``; other values pass through."""
    if isinstance(value, (Image2, Tensor3)):
        return value.data
    return value


@dataclass(frozen=True)
class FilterBank:
    """K filters of support fh x fw over ``channels`` input channels.

    ``data`` has shape (K, channels, fh, fw). In orthogonal mode the K x d
    matrix of vectorized filters (d = channels*fh*fw) has orthonormal rows;
    otherwise every filter has l2 norm at most one.
    """
    data: np.ndarray
    orthogonal_mode: bool

    def __post_init__(self):
        arr = as_float_array(self.data, 4, "FilterBank")
        object.__setattr__(self, "data", frozen(arr))
        self.check()

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, channels: int, support: Tuple[int, int]) -> "FilterBank":
        k = matrix.shape[0]
        return cls(np.reshape(matrix, (k, channels, support[0], support[1])), orthogonal_mode=True)

    @classmethod
    def from_filters(cls, filters: np.ndarray) -> "FilterBank":
        """Wrap a (K, fh, fw) single-channel bank in norm-constrained mode."""
        filters = np.asarray(filters, dtype=np.float64)
        return cls(filters[:, np.newaxis], orthogonal_mode=False)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def support(self) -> Tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    @property
    def patch_dim(self) -> int:
        return self.channels * self.support[0] * self.support[1]

    @property
    def matrix(self) -> np.ndarray:
        """K x d matrix of vectorized filters"""
        return self.data.reshape(self.count, self.patch_dim)

    @property
    def filters(self) -> np.ndarray:
        """(K, fh, fw) view for single-channel banks"""
        if self.channels != 1:
            raise DimensionError("filters view requires a single-channel bank")
        return self.data[:, 0]

    def check(self) -> None:
        if self.orthogonal_mode:
            if self.count > self.patch_dim:
                raise DimensionError(
                    f"orthogonal bank needs K <= d, got K={self.count}, d={self.patch_dim}"
                )
            gram = self.matrix @ self.matrix.T
            deviation = float(np.max(np.abs(gram - np.eye(self.count))))
            if deviation > ORTHOGONALITY_TOL:
                raise NumericError(f"filter rows are not orthonormal (max deviation {deviation:.3e})")
        else:
            norms = np.sum(self.matrix ** 2, axis=1)
            if np.any(norms > 1.0 + FILTER_NORM_SLACK):
                raise NumericError(f"filter squared norm {float(norms.max()):.6f} exceeds 1")


@dataclass(frozen=True)
class PatchGeometry:
    """Where the patch grid of one layer sits on its input"""
    input_shape: Tuple[int, int, int]
    support: Tuple[int, int]
    stride: int = 1
    grid: Tuple[int, int] = field(init=False)

    def __post_init__(self):
        c, h, w = self.input_shape
        fh, fw = self.support
        if self.stride < 1:
            raise DimensionError("stride must be at least 1")
        if fh > h or fw > w:
            raise DimensionError(f"support {fh}x{fw} exceeds input extent {h}x{w}")
        grid = ((h - fh) // self.stride + 1, (w - fw) // self.stride + 1)
        object.__setattr__(self, "grid", grid)

    @classmethod
    def for_input(cls, shape: Tuple[int, ...], support: Tuple[int, int], stride: int = 1) -> "PatchGeometry":
        if len(shape) == 2:
            shape = (1,) + tuple(shape)
        if len(shape) != 3:
            raise DimensionError(f"patch input must be 2D or 3D, got shape {shape}")
        return cls(tuple(int(s) for s in shape), tuple(support), stride)  # type: ignore[arg-type]

    @property
    def channels(self) -> int:
        return self.input_shape[0]

    @property
    def patch_dim(self) -> int:
        return self.channels * self.support[0] * self.support[1]

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]
