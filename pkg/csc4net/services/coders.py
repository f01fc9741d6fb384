from abc import ABC, abstractmethod
from typing import Dict, List, Optional, Sequence, Tuple, Type

import numpy as np
import structlog

from ..core.concurrency import map_ordered
from ..core.exceptions import DimensionError
from ..models.tensors import FilterBank, PatchGeometry, unwrap
from ..schemas.config import CoderKind, LayerSpec, ModelConfig
from .csc_baseline import CscProblem, reconstruct, solve_codes_l1, solve_csc
from .l4_solver import L4Problem, decode_l4, encode_l4, solve_l4
from .tensor_ops import extract_patches

logger = structlog.get_logger(__name__)


class BaseCoder(ABC):
    """Per-layer sparse coder: learns a bank, encodes inputs, decodes codes"""

    kind: CoderKind
    refits_each_epoch: bool = True

    def __init__(self, spec: LayerSpec, input_shape: Tuple[int, int, int], config: ModelConfig):
        self.spec = spec
        self.input_shape = tuple(input_shape)
        self.config = config

    @abstractmethod
    def fit(self, inputs: Sequence[np.ndarray], init: Optional[FilterBank], seed: int) -> FilterBank:
        """Learn a filter bank from one modality's layer inputs"""
        pass

    @abstractmethod
    def encode(self, x: np.ndarray, bank: FilterBank) -> np.ndarray:
        pass

    @abstractmethod
    def decode(self, code: np.ndarray, bank: FilterBank) -> np.ndarray:
        pass

    @property
    @abstractmethod
    def output_shape(self) -> Tuple[int, int, int]:
        pass

    def encode_batch(self, inputs: Sequence[np.ndarray], bank: FilterBank) -> List[np.ndarray]:
        return map_ordered(lambda x: self.encode(x, bank), list(inputs))

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(unwrap(x), dtype=np.float64)
        if x.shape != self.input_shape:
            raise DimensionError(f"{self.kind.value} layer expects input {self.input_shape}, got {x.shape}")
        return x


class L4PatchCoder(BaseCoder):
    """Orthogonal patch analysis learned by l4 maximization (MSP)"""

    kind = CoderKind.L4

    def __init__(self, spec: LayerSpec, input_shape: Tuple[int, int, int], config: ModelConfig):
        super().__init__(spec, input_shape, config)
        self.geometry = PatchGeometry.for_input(self.input_shape, spec.support, spec.stride)
        if spec.filters > self.geometry.patch_dim:
            raise DimensionError(
                f"{spec.filters} filters exceed patch dimension {self.geometry.patch_dim}"
            )

    @property
    def output_shape(self) -> Tuple[int, int, int]:
        return (self.spec.filters,) + tuple(self.geometry.grid)  # type: ignore[return-value]

    def fit(self, inputs: Sequence[np.ndarray], init: Optional[FilterBank], seed: int) -> FilterBank:
        patches = np.hstack([
            extract_patches(self._check_input(x), self.spec.support, self.spec.stride) for x in inputs
        ])
        problem = L4Problem(patches, self.spec.filters, self.config.msp_max_iter, self.config.msp_tol)
        solution = solve_l4(problem, seed=seed, init=None if init is None else init.matrix)
        return FilterBank.from_matrix(solution.filters, self.geometry.channels, self.spec.support)

    def encode(self, x: np.ndarray, bank: FilterBank) -> np.ndarray:
        return encode_l4(self._check_input(x), bank.matrix, self.geometry)

    def decode(self, code: np.ndarray, bank: FilterBank) -> np.ndarray:
        return decode_l4(code, bank.matrix, self.geometry)


class L1ConvCoder(BaseCoder):
    """Single-layer l1 convolutional sparse coder on full-frame codes"""

    kind = CoderKind.L1
    refits_each_epoch = False

    def __init__(self, spec: LayerSpec, input_shape: Tuple[int, int, int], config: ModelConfig):
        super().__init__(spec, input_shape, config)
        if self.input_shape[0] != 1:
            raise DimensionError("the l1 coder works on single-channel images only")

    @property
    def output_shape(self) -> Tuple[int, int, int]:
        return (self.spec.filters,) + tuple(self.input_shape[1:])  # type: ignore[return-value]

    def _problem(self, images: Sequence[np.ndarray]) -> CscProblem:
        return CscProblem.from_params(images, self.spec.filters, self.spec.support, self.config.csc_params())

    def fit(self, inputs: Sequence[np.ndarray], init: Optional[FilterBank], seed: int) -> FilterBank:
        problem = self._problem([self._check_input(x)[0] for x in inputs])
        params = self.config.csc_params().model_copy(update={"seed": seed})
        solution = solve_csc(problem, params, filters0=None if init is None else init.filters)
        return solution.filters

    def encode(self, x: np.ndarray, bank: FilterBank) -> np.ndarray:
        problem = self._problem([self._check_input(x)[0]])
        codes = solve_codes_l1(problem, bank, None, self.config.csc.max_inner, self.config.csc.inner_tol)
        return codes[0]

    def encode_batch(self, inputs: Sequence[np.ndarray], bank: FilterBank) -> List[np.ndarray]:
        problem = self._problem([self._check_input(x)[0] for x in inputs])
        return solve_codes_l1(problem, bank, None, self.config.csc.max_inner, self.config.csc.inner_tol)

    def decode(self, code: np.ndarray, bank: FilterBank) -> np.ndarray:
        return reconstruct(bank.filters, code)[np.newaxis]


CODERS: Dict[CoderKind, Type[BaseCoder]] = {
    CoderKind.L4: L4PatchCoder,
    CoderKind.L1: L1ConvCoder,
}


def get_coder(kind: CoderKind, spec: LayerSpec, input_shape: Tuple[int, int, int],
              config: ModelConfig) -> BaseCoder:
    try:
        coder_class = CODERS[kind]
    except KeyError:
        raise ValueError(f"no coder registered for {kind!r}") from None
    return coder_class(spec, input_shape, config)


def build_coders(config: ModelConfig, image_shape: Tuple[int, int]) -> List[BaseCoder]:
    """Chain one coder per expanded layer, each consuming the previous output."""
    coders: List[BaseCoder] = []
    shape: Tuple[int, int, int] = (1,) + tuple(image_shape)  # type: ignore[assignment]
    for spec in config.expanded_layers():
        coder = get_coder(config.coder, spec, shape, config)
        coders.append(coder)
        shape = coder.output_shape
    return coders
