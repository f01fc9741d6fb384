"""
Intra-modal unit normalization (IUN).

Each code of a modality batch is multiplied by one positive scalar. In
``strict_unit`` mode the codes are divided by the batch-max norm and then
rescaled onto the unit sphere; ``verbatim`` applies the printed scaling
1 / (max_i ||Z_i|| * sqrt(1 - ||Z||^2)) with the radicand clamped to
[epsilon, 1].
"""

from typing import List, Sequence

import numpy as np
import structlog

from ..core.exceptions import DegenerateInputError, DimensionError
from ..schemas.config import IunMode, IunParams

logger = structlog.get_logger(__name__)


def _norms(codes: Sequence[np.ndarray]) -> np.ndarray:
    if len(codes) == 0:
        raise DimensionError("IUN needs at least one code")
    norms = np.array([float(np.linalg.norm(np.ravel(z))) for z in codes])
    for i, n in enumerate(norms):
        if n == 0.0:
            raise DegenerateInputError("IUN received an all-zero code", index=i)
    return norms


def iun_scalars(codes: Sequence[np.ndarray], params: IunParams = IunParams()) -> List[float]:
    """Per-code positive multipliers applied by ``iun``."""
    norms = _norms(codes)
    batch_max = float(norms.max())
    if params.mode == IunMode.STRICT_UNIT:
        # (1 / batch_max) then (batch_max / norm) onto the sphere
        return [1.0 / n for n in norms]
    radicand = np.clip(1.0 - norms ** 2, params.epsilon, 1.0)
    return [float(s) for s in 1.0 / (batch_max * np.sqrt(radicand))]


def iun(codes: Sequence[np.ndarray], params: IunParams = IunParams()) -> List[np.ndarray]:
    scalars = iun_scalars(codes, params)
    return [s * np.asarray(z, dtype=np.float64) for s, z in zip(scalars, codes)]
