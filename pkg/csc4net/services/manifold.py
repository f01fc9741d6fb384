"""
SPD embeddings of feature maps and the affine-invariant Riemannian distance.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import structlog

from ..core.exceptions import DegenerateInputError, DimensionError, NumericError
from ..schemas.config import DistanceMode, ManifoldParams
from .tensor_ops import sym_eig

logger = structlog.get_logger(__name__)

SYMMETRY_TOL = 1e-10
EIGEN_FLOOR = 1e-12


@dataclass(frozen=True)
class SpdMatrix:
    data: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.data, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"SPD matrix must be square, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise NumericError("SPD matrix contains non-finite values")
        asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
        if asym > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(m)))):
            raise NumericError(f"matrix is not symmetric (max deviation {asym:.3e})")
        m = 0.5 * (m + m.T)
        lowest = float(scipy.linalg.eigvalsh(m)[0])
        if lowest < EIGEN_FLOOR:
            raise NumericError(
                f"matrix is not positive definite (min eigenvalue {lowest:.3e}); use a larger ridge"
            )
        m.setflags(write=False)
        object.__setattr__(self, "data", m)

    @property
    def dim(self) -> int:
        return self.data.shape[0]


def channel_covariance(code: np.ndarray) -> np.ndarray:
    code = np.asarray(code, dtype=np.float64)
    if code.ndim != 3 or code.size == 0:
        raise DimensionError(f"code must be a non-empty (C, H, W) tensor, got {code.shape}")
    positions = code.shape[1] * code.shape[2]
    if positions < 2:
        raise DegenerateInputError("covariance needs at least two spatial positions")
    return np.atleast_2d(np.cov(code.reshape(code.shape[0], positions)))


def spd_embed(code: np.ndarray, params: ManifoldParams = ManifoldParams()) -> SpdMatrix:
    """Channel covariance over spatial positions plus ridge * I."""
    c = channel_covariance(code)
    return SpdMatrix(c + params.ridge * np.eye(c.shape[0]))


def _spd_function(m: np.ndarray, fn) -> np.ndarray:
    w, q = sym_eig(m)
    if w[0] < EIGEN_FLOOR:
        raise NumericError(
            f"eigenvalue {w[0]:.3e} below {EIGEN_FLOOR:g}; increase the manifold ridge"
        )
    return (q * fn(w)) @ q.T


def spd_logm(m: SpdMatrix) -> np.ndarray:
    return _spd_function(m.data, np.log)


def spd_expm(s: np.ndarray) -> np.ndarray:
    """Matrix exponential of a symmetric matrix (inverse of ``spd_logm``)."""
    w, q = sym_eig(s)
    return (q * np.exp(w)) @ q.T


def spd_powm(m: SpdMatrix, power: float) -> np.ndarray:
    return _spd_function(m.data, lambda w: w ** power)


def spd_dist(a: SpdMatrix, b: SpdMatrix, params: ManifoldParams = ManifoldParams()) -> float:
    if a.dim != b.dim:
        raise DimensionError(f"SPD dimensions differ ({a.dim} vs {b.dim})")
    if params.distance_mode == DistanceMode.VERBATIM:
        return _verbatim_dist(a, b)
    # eigenvalues of A^{-1/2} B A^{-1/2} are the generalized eigenvalues of (B, A)
    w = scipy.linalg.eigh(b.data, a.data, eigvals_only=True)
    if np.any(w <= 0):
        raise NumericError("generalized eigenvalues are not positive")
    return float(np.sqrt(np.sum(np.log(w) ** 2)))


def _verbatim_dist(target: SpdMatrix, transformed: SpdMatrix) -> float:
    """||log(T)^{-1/2} S log(T)^{-1/2}||_F with |eigenvalues| of log(T) floored."""
    w, q = sym_eig(spd_logm(target))
    mag = np.maximum(np.abs(w), EIGEN_FLOOR)
    inv_sqrt = (q * mag ** -0.5) @ q.T
    return float(np.linalg.norm(inv_sqrt @ transformed.data @ inv_sqrt))


def apply_associator(p: np.ndarray, code: np.ndarray) -> np.ndarray:
    """Multiply the channel vector at every spatial position by P."""
    code = np.asarray(code, dtype=np.float64)
    if p.shape[1] != code.shape[0]:
        raise DimensionError(f"associator {p.shape} does not match {code.shape[0]} channels")
    return np.einsum("kc,chw->khw", p, code)


def pair_distances(codes_x: Sequence[np.ndarray], codes_y: Sequence[np.ndarray], associator: np.ndarray,
                   params: ManifoldParams = ManifoldParams()) -> np.ndarray:
    """d(embed(y_j), embed(P x_i)) for every source i and target j."""
    targets = [spd_embed(y, params) for y in codes_y]
    sources = [spd_embed(apply_associator(associator, x), params) for x in codes_x]
    out = np.empty((len(sources), len(targets)))
    for i, s in enumerate(sources):
        for j, t in enumerate(targets):
            out[i, j] = spd_dist(t, s, params)
    return out


def manifold_loss(stack_x: Sequence[Sequence[np.ndarray]], stack_y: Sequence[Sequence[np.ndarray]],
                  associators: Sequence[np.ndarray], params: ManifoldParams = ManifoldParams(),
                  weights: Optional[np.ndarray] = None) -> float:
    """sum_ij w_ij prod_l d_l(embed(y_j^l), embed(P^l x_i^l)); unit weights when omitted."""
    if not (len(stack_x) == len(stack_y) == len(associators)) or not stack_x:
        raise DimensionError("stacks and associators must have the same non-zero layer count")
    product = None
    for codes_x, codes_y, p in zip(stack_x, stack_y, associators):
        d = pair_distances(codes_x, codes_y, p, params)
        product = d if product is None else product * d
    if weights is None:
        weights = np.ones_like(product)
    if weights.shape != product.shape:
        raise DimensionError(f"weights {weights.shape} do not match pairs {product.shape}")
    value = float(np.sum(weights * product))
    if not np.isfinite(value) or value < 0:
        raise NumericError(f"manifold loss is not a finite non-negative number ({value})")
    return value
