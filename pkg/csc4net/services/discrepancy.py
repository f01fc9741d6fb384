"""
Gaussian-kernel maximum mean discrepancy, single and multi-layer.

Codes are vectorized per sample. The estimator is the biased V-statistic

    MMD^2 = 1/S^2 sum k(x, x') + 1/T^2 sum k(y, y') - 2/(ST) sum k(x, y)

and the multi-layer variant uses the product of per-layer Gaussian kernels.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np
import structlog
from scipy.spatial.distance import cdist, pdist

from ..core.exceptions import DegenerateInputError, DimensionError
from ..schemas.config import BandwidthPolicy, KernelParams

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class MmdReport:
    value: float
    term_xx: float
    term_yy: float
    term_xy: float
    bandwidths: List[float] = field(default_factory=list)


def vectorize(samples: Sequence[np.ndarray]) -> np.ndarray:
    """Stack samples as rows of an (S x D) matrix."""
    if len(samples) == 0:
        raise DimensionError("empty batch")
    rows = [np.ravel(np.asarray(s, dtype=np.float64)) for s in samples]
    width = rows[0].size
    if any(r.size != width for r in rows):
        raise DimensionError("samples in a batch must share one vectorized length")
    return np.vstack(rows)


def gauss_kernel(a: np.ndarray, b: np.ndarray, p: float) -> float:
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    if a.size != b.size:
        raise DimensionError(f"kernel arguments differ in length ({a.size} vs {b.size})")
    if p <= 0:
        raise ValueError("bandwidth must be positive")
    diff = a - b
    return math.exp(-float(diff @ diff) / p)


def median_bandwidth(samples: Union[Sequence[np.ndarray], np.ndarray]) -> float:
    """Median of all unordered pairwise squared distances."""
    x = samples if isinstance(samples, np.ndarray) and samples.ndim == 2 else vectorize(samples)
    if x.shape[0] < 2:
        raise DimensionError("median bandwidth needs at least two samples")
    d2 = pdist(x, metric="sqeuclidean")
    if not np.any(d2 > 0):
        raise DegenerateInputError("all samples are identical; bandwidth undefined")
    p = float(np.median(d2))
    if p <= 0:
        # more than half the pairs coincide
        p = float(np.mean(d2[d2 > 0]))
        logger.warning("bandwidth_fallback", bandwidth=p)
    return p


def _bandwidth(params: KernelParams, pooled: np.ndarray) -> float:
    if params.policy == BandwidthPolicy.FIXED:
        return float(params.bandwidth)  # type: ignore[arg-type]
    return median_bandwidth(pooled)


def _mean(m: np.ndarray) -> float:
    return math.fsum(m.ravel()) / m.size


def _combine(log_xx: np.ndarray, log_yy: np.ndarray, log_xy: np.ndarray, bandwidths: List[float]) -> MmdReport:
    term_xx = _mean(np.exp(log_xx))
    term_yy = _mean(np.exp(log_yy))
    term_xy = _mean(np.exp(log_xy))
    return MmdReport(
        value=term_xx + term_yy - 2.0 * term_xy,
        term_xx=term_xx,
        term_yy=term_yy,
        term_xy=term_xy,
        bandwidths=bandwidths,
    )


def mmd(batch_x: Sequence[np.ndarray], batch_y: Sequence[np.ndarray],
        params: KernelParams = KernelParams()) -> MmdReport:
    return multilayer_mmd([batch_x], [batch_y], [params])


def multilayer_mmd(stack_x: Sequence[Sequence[np.ndarray]], stack_y: Sequence[Sequence[np.ndarray]],
                   params: Union[KernelParams, Sequence[KernelParams]] = KernelParams()) -> MmdReport:
    """MMD with the product kernel prod_l exp(-||a_l - b_l||^2 / p_l)."""
    if len(stack_x) != len(stack_y) or len(stack_x) == 0:
        raise DimensionError(f"layer counts differ or are zero ({len(stack_x)} vs {len(stack_y)})")
    per_layer = list(params) if not isinstance(params, KernelParams) else [params] * len(stack_x)
    if len(per_layer) != len(stack_x):
        raise DimensionError("one KernelParams per layer is required")

    s = len(stack_x[0])
    t = len(stack_y[0])
    log_xx = np.zeros((s, s))
    log_yy = np.zeros((t, t))
    log_xy = np.zeros((s, t))
    bandwidths: List[float] = []
    for layer_x, layer_y, kp in zip(stack_x, stack_y, per_layer):
        x = vectorize(layer_x)
        y = vectorize(layer_y)
        if x.shape[0] != s or y.shape[0] != t:
            raise DimensionError("batch sizes must agree across layers")
        if x.shape[1] != y.shape[1]:
            raise DimensionError(f"code lengths differ between modalities ({x.shape[1]} vs {y.shape[1]})")
        p = _bandwidth(kp, np.vstack([x, y]))
        bandwidths.append(p)
        log_xx -= cdist(x, x, "sqeuclidean") / p
        log_yy -= cdist(y, y, "sqeuclidean") / p
        log_xy -= cdist(x, y, "sqeuclidean") / p
    return _combine(log_xx, log_yy, log_xy, bandwidths)


def product_kernel_logits(stack_x: Sequence[np.ndarray], stack_y: Sequence[np.ndarray],
                          params: KernelParams = KernelParams(),
                          bandwidths: Optional[Sequence[float]] = None) -> np.ndarray:
    """Log cross-kernel matrix -sum_l ||x_il - y_jl||^2 / p_l.

    ``stack_x[l]`` / ``stack_y[l]`` are already vectorized (S x D_l) and
    (T x D_l) matrices.
    """
    logits = np.zeros((stack_x[0].shape[0], stack_y[0].shape[0]))
    for index, (x, y) in enumerate(zip(stack_x, stack_y)):
        p = bandwidths[index] if bandwidths is not None else _bandwidth(params, np.vstack([x, y]))
        logits -= cdist(x, y, "sqeuclidean") / p
    return logits
