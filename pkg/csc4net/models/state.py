"""
Trained-model state: per-layer filter banks, associators and the training log.

States are immutable; training produces a fresh state every epoch.
"""

from dataclasses import dataclass, fields
from typing import List, Sequence, Tuple

import numpy as np

from ..core.exceptions import NumericError
from ..schemas.config import LayerSpec, ModelConfig
from .tensors import FilterBank, frozen


@dataclass(frozen=True)
class Associator:
    """Linear map P carrying source codes to target codes (per spatial position)"""
    matrix: np.ndarray
    ridge: float = 0.0
    condition: float = 1.0
    residual: float = 0.0

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise NumericError(f"associator must be square, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise NumericError("associator has non-finite entries")
        object.__setattr__(self, "matrix", frozen(m))

    @classmethod
    def identity(cls, k: int) -> "Associator":
        return cls(np.eye(k))

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class LayerState:
    spec: LayerSpec
    input_shape: Tuple[int, int, int]
    filter_x: FilterBank
    filter_y: FilterBank
    associator: Associator
    # mean pre-normalization code norms seen in training, per modality
    scale_x: float = 1.0
    scale_y: float = 1.0


@dataclass(frozen=True)
class LossComponents:
    sparsity_x: float
    sparsity_y: float
    recon_x: float
    recon_y: float
    mmd: float
    manifold: float
    combined: float

    @classmethod
    def names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def values(self) -> List[float]:
        return [getattr(self, name) for name in self.names()]

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.values())

    @classmethod
    def mean(cls, items: Sequence["LossComponents"]) -> "LossComponents":
        table = np.array([item.values() for item in items])
        return cls(*(float(v) for v in table.mean(axis=0)))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    losses: LossComponents


@dataclass(frozen=True)
class ModelState:
    config: ModelConfig
    layers: Tuple[LayerState, ...] = ()
    training_log: Tuple[EpochRecord, ...] = ()

    @property
    def trained(self) -> bool:
        return len(self.layers) > 0

    @property
    def image_shape(self) -> Tuple[int, int]:
        _, h, w = self.layers[0].input_shape
        return h, w

    def check_invariants(self) -> None:
        """Re-validate every bank and the log; raises on violation."""
        for layer in self.layers:
            layer.filter_x.check()
            layer.filter_y.check()
        for record in self.training_log:
            if not record.losses.is_finite():
                raise NumericError(f"training log entry for epoch {record.epoch} is not finite")
