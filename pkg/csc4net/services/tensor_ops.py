"""
Convolution, patch plumbing and small-matrix linear algebra.

All arithmetic is float64. Functions are pure and thread safe.
"""

from typing import Tuple

import numpy as np
import scipy.fft
import scipy.linalg
import scipy.signal
from numpy.lib.stride_tricks import sliding_window_view

from ..core.exceptions import DimensionError, NumericError
from ..models.tensors import PatchGeometry


def _check_2d(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise DimensionError(f"{name} must be a non-empty 2D array, got shape {a.shape}")
    return a


# ----------------------------------------------------------------------------
# Convolution
# ----------------------------------------------------------------------------

def conv2_valid(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """True (flipped-kernel) 2D convolution, output extent = input - support + 1."""
    image = _check_2d(image, "image")
    kernel = _check_2d(kernel, "kernel")
    if kernel.shape[0] > image.shape[0] or kernel.shape[1] > image.shape[1]:
        raise DimensionError(f"kernel {kernel.shape} larger than image {image.shape}")
    return scipy.signal.convolve2d(image, kernel, mode="valid")


def correlate2_valid(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    image = _check_2d(image, "image")
    kernel = _check_2d(kernel, "kernel")
    if kernel.shape[0] > image.shape[0] or kernel.shape[1] > image.shape[1]:
        raise DimensionError(f"kernel {kernel.shape} larger than image {image.shape}")
    return scipy.signal.correlate2d(image, kernel, mode="valid")


def conv2_full_spatial(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return scipy.signal.convolve2d(_check_2d(a, "a"), _check_2d(b, "b"), mode="full")


def conv2_full_fft(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Full 2D convolution through the real FFT, zero-padded to a fast length."""
    a = _check_2d(a, "a")
    b = _check_2d(b, "b")
    shape = (a.shape[0] + b.shape[0] - 1, a.shape[1] + b.shape[1] - 1)
    fshape = tuple(scipy.fft.next_fast_len(s, real=True) for s in shape)
    spectrum = scipy.fft.rfft2(a, fshape) * scipy.fft.rfft2(b, fshape)
    out = scipy.fft.irfft2(spectrum, fshape)
    return np.ascontiguousarray(out[: shape[0], : shape[1]])


def same_offset(support: Tuple[int, int]) -> Tuple[int, int]:
    """Top-left crop offset of the "same" frame inside the full convolution."""
    return (support[0] - 1) // 2, (support[1] - 1) // 2


def conv2_same(code: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Full convolution cropped back to the frame of ``code``."""
    code = _check_2d(code, "code")
    kernel = _check_2d(kernel, "kernel")
    full = conv2_full_fft(code, kernel)
    oh, ow = same_offset(kernel.shape)
    return full[oh: oh + code.shape[0], ow: ow + code.shape[1]]


def conv2_same_adjoint(residual: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of ``conv2_same`` with respect to the code."""
    residual = _check_2d(residual, "residual")
    kernel = _check_2d(kernel, "kernel")
    fh, fw = kernel.shape
    oh, ow = same_offset(kernel.shape)
    padded = np.pad(residual, ((oh, fh - 1 - oh), (ow, fw - 1 - ow)))
    return scipy.signal.correlate2d(padded, kernel, mode="valid")


# ----------------------------------------------------------------------------
# Patches
# ----------------------------------------------------------------------------

def extract_patches(image: np.ndarray, support: Tuple[int, int], stride: int = 1) -> np.ndarray:
    """Vectorized patches as the columns of a (d x n) matrix.

    ``image`` is (H, W) or (C, H, W); each column is the channel-major,
    row-major vectorization of one patch and columns follow the grid in
    row-major order.
    """
    arr = np.asarray(image, dtype=np.float64)
    geometry = PatchGeometry.for_input(arr.shape, support, stride)
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    windows = sliding_window_view(arr, geometry.support, axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, : geometry.grid[0], : geometry.grid[1]]
    # (C, gh, gw, fh, fw) -> (gh, gw, C, fh, fw)
    stacked = np.transpose(windows, (1, 2, 0, 3, 4))
    return np.ascontiguousarray(stacked.reshape(geometry.n_patches, geometry.patch_dim).T)


def assemble_patches(patches: np.ndarray, geometry: PatchGeometry) -> np.ndarray:
    """Inverse of ``extract_patches``: overlaps averaged by coverage count.

    Pixels no patch covers come back as zero. Returns (C, H, W).
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape != (geometry.patch_dim, geometry.n_patches):
        raise DimensionError(
            f"patch matrix {patches.shape} inconsistent with geometry "
            f"({geometry.patch_dim}, {geometry.n_patches})"
        )
    c, h, w = geometry.input_shape
    fh, fw = geometry.support
    gh, gw = geometry.grid
    s = geometry.stride
    blocks = patches.T.reshape(gh, gw, c, fh, fw)
    total = np.zeros((c, h, w))
    coverage = np.zeros((h, w))
    for di in range(fh):
        for dj in range(fw):
            rows = slice(di, di + s * (gh - 1) + 1, s)
            cols = slice(dj, dj + s * (gw - 1) + 1, s)
            total[:, rows, cols] += np.transpose(blocks[:, :, :, di, dj], (2, 0, 1))
            coverage[rows, cols] += 1.0
    covered = coverage > 0
    out = np.zeros_like(total)
    out[:, covered] = total[:, covered] / coverage[covered]
    return out


# ----------------------------------------------------------------------------
# Linear algebra
# ----------------------------------------------------------------------------

def _check_finite(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite values")
    return m


def svd(m: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD returning (U, singular values, V) with m = U diag(s) V^T."""
    m = _check_finite(m, "matrix")
    u, s, vt = scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesdd")
    return u, s, vt.T


def sym_eig(m: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and eigenvectors of the symmetric part of m."""
    m = _check_finite(m, "matrix")
    return scipy.linalg.eigh(0.5 * (m + m.T))
