"""
Single-layer convolutional sparse coding with an l1 penalty.

Minimizes  1/2 sum_i ||x_i - sum_k f_k * z_ik||^2 + lambda sum_ik ||z_ik||_1
subject to ||f_k||_2 <= 1, alternating proximal-gradient code updates with a
least-squares filter update.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog

from ..core.concurrency import map_ordered
from ..core.exceptions import CscSolverError, DimensionError
from ..models.tensors import FilterBank, as_float_array
from ..schemas.config import STANDALONE_CSC_LAMBDA, CscParams
from .tensor_ops import conv2_same, conv2_same_adjoint

logger = structlog.get_logger(__name__)

FILTER_RIDGE = 1e-8
DIVERGENCE_TOL = 1e-6
DIVERGENCE_PATIENCE = 3
MONOTONE_SLACK = 1e-9


@dataclass(frozen=True)
class CscProblem:
    images: Tuple[np.ndarray, ...]
    n_filters: int
    support: Tuple[int, int]
    lmbda: float

    def __post_init__(self):
        if self.lmbda < 0:
            raise ValueError("lambda must be non-negative")
        if self.n_filters < 1:
            raise ValueError("at least one filter is required")
        images = tuple(as_float_array(x, 2, "image") for x in self.images)
        if not images:
            raise DimensionError("CSC problem needs at least one image")
        for x in images:
            if self.support[0] > x.shape[0] or self.support[1] > x.shape[1]:
                raise DimensionError(f"support {self.support} larger than image {x.shape}")
        object.__setattr__(self, "images", images)

    @classmethod
    def from_params(cls, images: Sequence[np.ndarray], n_filters: int, support: Tuple[int, int],
                    params: CscParams) -> "CscProblem":
        lmbda = STANDALONE_CSC_LAMBDA if params.lmbda is None else params.lmbda
        return cls(tuple(images), n_filters, tuple(support), lmbda)  # type: ignore[arg-type]

    def code_shape(self, index: int) -> Tuple[int, int, int]:
        return (self.n_filters,) + self.images[index].shape


@dataclass
class CscSolution:
    filters: FilterBank
    codes: List[np.ndarray]
    objective_trace: List[float] = field(default_factory=list)
    converged: bool = False


# ----------------------------------------------------------------------------
# Objective pieces
# ----------------------------------------------------------------------------

def soft_threshold(v: np.ndarray, t: float) -> np.ndarray:
    """Proximal operator of t*||.||_1"""
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def reconstruct(filters: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """sum_k f_k * z_k cropped to the frame of the codes."""
    filters = np.asarray(filters, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    if filters.ndim != 3 or codes.ndim != 3 or filters.shape[0] != codes.shape[0]:
        raise DimensionError(f"filters {filters.shape} and codes {codes.shape} do not agree")
    out = np.zeros(codes.shape[1:])
    for f, z in zip(filters, codes):
        if np.any(z):
            out += conv2_same(z, f)
    return out


def _gradient(filters: np.ndarray, residual: np.ndarray) -> np.ndarray:
    return np.stack([conv2_same_adjoint(residual, f) for f in filters])


def _smooth_part(x: np.ndarray, filters: np.ndarray, codes: np.ndarray) -> float:
    r = x - reconstruct(filters, codes)
    return 0.5 * float(np.sum(r * r))


def _check_codes(problem: CscProblem, codes: Sequence[np.ndarray]) -> None:
    if len(codes) != len(problem.images):
        raise DimensionError(f"{len(codes)} code tensors for {len(problem.images)} images")
    for i, z in enumerate(codes):
        if np.shape(z) != problem.code_shape(i):
            raise DimensionError(f"code {i} has shape {np.shape(z)}, expected {problem.code_shape(i)}")


def _filters_of(problem: CscProblem, filters) -> np.ndarray:
    arr = filters.filters if isinstance(filters, FilterBank) else np.asarray(filters, dtype=np.float64)
    if arr.shape != (problem.n_filters,) + tuple(problem.support):
        raise DimensionError(f"filters {arr.shape} do not match problem ({problem.n_filters}, {problem.support})")
    return arr


def csc_objective(problem: CscProblem, filters, codes: Sequence[np.ndarray]) -> float:
    f = _filters_of(problem, filters)
    _check_codes(problem, codes)
    total = 0.0
    for x, z in zip(problem.images, codes):
        total += _smooth_part(x, f, z) + problem.lmbda * float(np.sum(np.abs(z)))
    return total


# ----------------------------------------------------------------------------
# Code update (ISTA with backtracking)
# ----------------------------------------------------------------------------

def _ista_single(x: np.ndarray, filters: np.ndarray, z0: np.ndarray, lmbda: float,
                 max_iter: int, tol: float) -> np.ndarray:
    z = np.array(z0, dtype=np.float64, copy=True)
    step_l = 1.0
    smooth = _smooth_part(x, filters, z)
    objective = smooth + lmbda * float(np.sum(np.abs(z)))
    increases = 0

    for _ in range(max_iter):
        residual = reconstruct(filters, z) - x
        grad = _gradient(filters, residual)
        while True:
            candidate = soft_threshold(z - grad / step_l, lmbda / step_l)
            diff = candidate - z
            cand_smooth = _smooth_part(x, filters, candidate)
            bound = smooth + float(np.sum(grad * diff)) + 0.5 * step_l * float(np.sum(diff * diff))
            if cand_smooth <= bound + 1e-12 * max(1.0, abs(bound)):
                break
            step_l *= 2.0

        new_objective = cand_smooth + lmbda * float(np.sum(np.abs(candidate)))
        if new_objective > objective + DIVERGENCE_TOL:
            increases += 1
            if increases >= DIVERGENCE_PATIENCE:
                raise CscSolverError(
                    f"code objective increased for {increases} consecutive iterations "
                    f"({objective:.6e} -> {new_objective:.6e})"
                )
        else:
            increases = 0

        change = abs(objective - new_objective) / max(abs(objective), 1e-300)
        z, smooth, objective = candidate, cand_smooth, new_objective
        if change < tol or not np.any(diff):
            break
    return z


def solve_codes_l1(problem: CscProblem, filters, codes0: Optional[Sequence[np.ndarray]] = None,
                   max_iter: int = 100, tol: float = 1e-6) -> List[np.ndarray]:
    """Proximal-gradient code update, one independent solve per image."""
    f = _filters_of(problem, filters)
    if codes0 is None:
        codes0 = [np.zeros(problem.code_shape(i)) for i in range(len(problem.images))]
    _check_codes(problem, codes0)

    def solve(index: int) -> np.ndarray:
        return _ista_single(problem.images[index], f, codes0[index], problem.lmbda, max_iter, tol)

    return map_ordered(solve, list(range(len(problem.images))))


# ----------------------------------------------------------------------------
# Filter update (least squares + projection)
# ----------------------------------------------------------------------------

def _code_design(code: np.ndarray, support: Tuple[int, int]) -> np.ndarray:
    """Matrix M with reconstruct(f, code).ravel() == M @ f.ravel()."""
    k, h, w = code.shape
    fh, fw = support
    oh, ow = (fh - 1) // 2, (fw - 1) // 2
    padded = np.pad(code, ((0, 0), (fh - 1, fh - 1), (fw - 1, fw - 1)))
    columns = np.empty((h * w, k, fh, fw))
    for a in range(fh):
        for b in range(fw):
            r0 = oh - a + fh - 1
            c0 = ow - b + fw - 1
            columns[:, :, a, b] = padded[:, r0: r0 + h, c0: c0 + w].reshape(k, h * w).T
    return columns.reshape(h * w, k * fh * fw)


def project_unit_ball(filters: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(filters.reshape(filters.shape[0], -1) ** 2, axis=1))
    scale = 1.0 / np.maximum(norms, 1.0)
    return filters * scale[:, np.newaxis, np.newaxis]


def solve_filters(problem: CscProblem, codes: Sequence[np.ndarray], filters0) -> FilterBank:
    """Ridge least-squares filter update, projected onto the unit ball.

    The projected solution is blended with ``filters0`` by an exact line
    search so the objective never increases.
    """
    f0 = _filters_of(problem, filters0)
    _check_codes(problem, codes)
    n = f0.size
    gram = np.zeros((n, n))
    rhs = np.zeros(n)
    designs = []
    # index-ordered reduction
    for x, z in zip(problem.images, codes):
        m = _code_design(np.asarray(z, dtype=np.float64), problem.support)
        designs.append(m)
        gram += m.T @ m
        rhs += m.T @ x.ravel()

    if not np.any(gram):
        return FilterBank.from_filters(f0)

    gram[np.diag_indices(n)] += FILTER_RIDGE
    solution = np.linalg.solve(gram, rhs).reshape(f0.shape)
    candidate = project_unit_ball(solution)

    delta = (candidate - f0).ravel()
    num = 0.0
    den = 0.0
    for x, m in zip(problem.images, designs):
        r0 = x.ravel() - m @ f0.ravel()
        md = m @ delta
        num += float(r0 @ md)
        den += float(md @ md)
    t = 0.0 if den <= 0.0 else float(np.clip(num / den, 0.0, 1.0))
    return FilterBank.from_filters(f0 + t * (candidate - f0))


# ----------------------------------------------------------------------------
# Alternating solver
# ----------------------------------------------------------------------------

def init_filters(n_filters: int, support: Tuple[int, int], seed: int) -> np.ndarray:
    """Unit-normalized Gaussian noise filters."""
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((n_filters,) + tuple(support))
    norms = np.sqrt(np.sum(f.reshape(n_filters, -1) ** 2, axis=1))
    return f / norms[:, np.newaxis, np.newaxis]


def solve_csc(problem: CscProblem, params: Optional[CscParams] = None,
              filters0: Optional[np.ndarray] = None,
              codes0: Optional[Sequence[np.ndarray]] = None) -> CscSolution:
    """Alternate code and filter updates until the objective settles.

    Only the schedule fields of ``params`` are used; the penalty comes from
    ``problem``.
    """
    params = params or CscParams()
    if filters0 is None:
        filters0 = init_filters(problem.n_filters, problem.support, params.seed)
    bank = FilterBank.from_filters(project_unit_ball(np.asarray(filters0, dtype=np.float64)))
    codes = list(codes0) if codes0 is not None else [
        np.zeros(problem.code_shape(i)) for i in range(len(problem.images))
    ]

    trace: List[float] = []
    converged = False
    for outer in range(params.max_outer):
        codes = solve_codes_l1(problem, bank, codes, params.max_inner, params.inner_tol)
        bank = solve_filters(problem, codes, bank)
        objective = csc_objective(problem, bank, codes)
        if trace and objective > trace[-1] + MONOTONE_SLACK * max(1.0, abs(trace[-1])):
            logger.warning("csc_objective_increase", outer=outer, previous=trace[-1], current=objective)
        trace.append(objective)
        logger.debug("csc_outer_iteration", outer=outer, objective=objective)
        if len(trace) > 1:
            change = abs(trace[-2] - objective) / max(abs(trace[-2]), 1e-300)
            if change < params.outer_tol:
                converged = True
                break

    logger.info("csc_solved", iterations=len(trace), objective=trace[-1], converged=converged)
    return CscSolution(filters=bank, codes=codes, objective_trace=trace, converged=converged)
