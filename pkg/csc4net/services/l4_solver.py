"""
l4-norm maximization over matrices with orthonormal rows.

The MSP iteration (matching, stretching, projection):

    delta = (A Y)^{o3} Y^T          matching + elementwise cube
    A'    = U V^T, delta = U S V^T  projection onto the orthonormal-row set

increases ||A Y||_4^4 monotonically because the objective is convex in A and
the polar factor maximizes <delta, A'> over the constraint set.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg
import structlog
from scipy.optimize import linear_sum_assignment
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from ..core.exceptions import DimensionError, L4SolverError, NumericError, RankDeficientError
from ..models.tensors import PatchGeometry
from .tensor_ops import assemble_patches, extract_patches, svd

logger = structlog.get_logger(__name__)

RANK_TOL = 1e-12
PERTURBATION_SCALE = 1e-10
ORTHOGONALITY_TOL = 1e-8


@dataclass(frozen=True)
class L4Problem:
    """Patch matrix Y (d x n) and code dimension K <= d."""
    patch_matrix: np.ndarray
    n_atoms: int
    max_iter: int = 500
    tol: float = 1e-6

    def __post_init__(self):
        y = np.ascontiguousarray(self.patch_matrix, dtype=np.float64)
        if y.ndim != 2 or y.size == 0:
            raise DimensionError(f"patch matrix must be a non-empty 2D array, got {y.shape}")
        if not np.all(np.isfinite(y)):
            raise NumericError("patch matrix contains non-finite values")
        if not 1 <= self.n_atoms <= y.shape[0]:
            raise DimensionError(f"code dimension K={self.n_atoms} must satisfy 1 <= K <= d={y.shape[0]}")
        if y.shape[1] < y.shape[0]:
            logger.warning("l4_few_patches", n=y.shape[1], d=y.shape[0])
        object.__setattr__(self, "patch_matrix", y)

    @property
    def dim(self) -> int:
        return self.patch_matrix.shape[0]


@dataclass(frozen=True)
class OrthogonalIterate:
    matrix: np.ndarray
    iteration: int
    l4_value: float


@dataclass
class L4Solution:
    filters: np.ndarray
    codes: np.ndarray
    trace: List[float] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def l4_norm4(m: np.ndarray) -> float:
    """Sum of fourth powers of all entries"""
    m = np.asarray(m, dtype=np.float64)
    sq = m * m
    return float(np.sum(sq * sq))


def orthogonality_error(a: np.ndarray) -> float:
    return float(np.max(np.abs(a @ a.T - np.eye(a.shape[0]))))


def random_orthogonal(d: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """First k rows of a Haar-distributed d x d orthogonal matrix."""
    q, r = scipy.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.where(np.diag(r) == 0.0, 1.0, np.diag(r)))
    return np.ascontiguousarray(q[:k])


def polar_project(delta: np.ndarray) -> np.ndarray:
    """Closest matrix with orthonormal rows (U V^T of the thin SVD)."""
    u, s, v = svd(delta)
    if s[-1] < RANK_TOL:
        raise RankDeficientError(f"matching matrix is rank deficient (sigma_min={s[-1]:.3e})")
    return u @ v.T


def _perturbation(delta: np.ndarray, iteration: int) -> np.ndarray:
    rng = np.random.default_rng(iteration)
    scale = PERTURBATION_SCALE * max(1.0, float(np.max(np.abs(delta))))
    return scale * rng.standard_normal(delta.shape)


def msp_step(iterate: OrthogonalIterate, patch_matrix: np.ndarray) -> OrthogonalIterate:
    """One matching-stretching-projection step."""
    a = iterate.matrix
    codes = a @ patch_matrix
    delta = (codes ** 3) @ patch_matrix.T

    try:
        for attempt in Retrying(
            stop=stop_after_attempt(2),
            retry=retry_if_exception_type(RankDeficientError),
            reraise=True,
        ):
            with attempt:
                candidate = delta
                if attempt.retry_state.attempt_number > 1:
                    logger.debug("msp_perturbed_retry", iteration=iterate.iteration)
                    candidate = delta + _perturbation(delta, iterate.iteration)
                projected = polar_project(candidate)
    except RankDeficientError as e:
        raise L4SolverError(f"MSP projection failed at iteration {iterate.iteration}: {e}") from e

    return OrthogonalIterate(
        matrix=projected,
        iteration=iterate.iteration + 1,
        l4_value=l4_norm4(projected @ patch_matrix),
    )


def solve_l4(problem: L4Problem, seed: int = 0, init: Optional[np.ndarray] = None) -> L4Solution:
    """Run MSP from a random orthogonal start (or ``init``) to convergence.

    Stops when ||A_{t+1} - A_t||_F < tol or after max_iter steps; the best
    iterate is returned either way, with ``converged`` telling which.
    """
    y = problem.patch_matrix
    if not np.any(y):
        raise L4SolverError("degenerate l4 problem: patch matrix is all zero")

    if init is None:
        a0 = random_orthogonal(problem.dim, problem.n_atoms, np.random.default_rng(seed))
    else:
        a0 = np.asarray(init, dtype=np.float64)
        if a0.shape != (problem.n_atoms, problem.dim):
            raise DimensionError(f"initial filters {a0.shape} do not match ({problem.n_atoms}, {problem.dim})")
        if orthogonality_error(a0) > ORTHOGONALITY_TOL:
            a0 = polar_project(a0)

    current = OrthogonalIterate(a0, 0, l4_norm4(a0 @ y))
    best = current
    trace = [current.l4_value]
    converged = False

    for _ in range(problem.max_iter):
        nxt = msp_step(current, y)
        change = float(np.linalg.norm(nxt.matrix - current.matrix))
        trace.append(nxt.l4_value)
        current = nxt
        if current.l4_value >= best.l4_value:
            best = current
        if change < problem.tol:
            converged = True
            break

    if converged:
        logger.debug("msp_converged", iterations=current.iteration, l4=best.l4_value)
    else:
        logger.warning("msp_not_converged", iterations=current.iteration, l4=best.l4_value)

    return L4Solution(
        filters=best.matrix,
        codes=best.matrix @ y,
        trace=trace,
        converged=converged,
        iterations=current.iteration,
    )


# ----------------------------------------------------------------------------
# Patch-domain analysis / synthesis
# ----------------------------------------------------------------------------

def encode_l4(x: np.ndarray, filters: np.ndarray, geometry: PatchGeometry) -> np.ndarray:
    """K-channel code over the patch grid: channel k at p is <a_k, patch_p>."""
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape if x.ndim == 3 else (1,) + x.shape
    if tuple(shape) != geometry.input_shape:
        raise DimensionError(f"input {shape} does not match geometry {geometry.input_shape}")
    if filters.shape[1] != geometry.patch_dim:
        raise DimensionError(f"filters {filters.shape} do not match patch dimension {geometry.patch_dim}")
    patches = extract_patches(x, geometry.support, geometry.stride)
    return (filters @ patches).reshape(filters.shape[0], *geometry.grid)


def decode_l4(code: np.ndarray, filters: np.ndarray, geometry: PatchGeometry) -> np.ndarray:
    """Adjoint of ``encode_l4`` followed by coverage-averaged reassembly."""
    code = np.asarray(code, dtype=np.float64)
    if code.shape != (filters.shape[0],) + tuple(geometry.grid):
        raise DimensionError(f"code {code.shape} does not match grid {geometry.grid} with K={filters.shape[0]}")
    patches = filters.T @ code.reshape(filters.shape[0], geometry.n_patches)
    return assemble_patches(patches, geometry)


def match_dictionaries(recovered: np.ndarray, reference: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Align rows of ``recovered`` to ``reference`` up to signed permutation.

    Returns (permutation, signs, correlations) such that
    ``signs[k] * recovered[k]`` best matches ``reference[permutation[k]]``.
    """
    corr = recovered @ reference.T
    rows, cols = linear_sum_assignment(-np.abs(corr))
    perm = np.empty(recovered.shape[0], dtype=int)
    perm[rows] = cols
    matched = corr[rows, cols]
    signs = np.where(matched >= 0, 1.0, -1.0)
    order = np.argsort(rows)
    return perm, signs[order], np.abs(matched)[order]
