from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class IunMode(str, Enum):
    STRICT_UNIT = "strict_unit"
    VERBATIM = "verbatim"


class BandwidthPolicy(str, Enum):
    MEDIAN_HEURISTIC = "median_heuristic"
    FIXED = "fixed"


class DistanceMode(str, Enum):
    AFFINE_INVARIANT = "affine_invariant"
    VERBATIM = "verbatim"


class Correspondence(str, Enum):
    SOFT_KERNEL = "soft_kernel"
    FIXED_PAIRS = "fixed_pairs"


class CoderKind(str, Enum):
    L4 = "l4"
    L1 = "l1"


class ModalityMapKind(str, Enum):
    IDENTITY = "identity"
    GAMMA = "gamma"
    INVERSION = "inversion"
    BLUR_THEN_REMAP = "blur_then_remap"


class IunParams(BaseModel):
    """Intra-modal unit normalization parameters"""
    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(1e-8, gt=0.0, le=1e-3)
    mode: IunMode = IunMode.STRICT_UNIT


class KernelParams(BaseModel):
    """Gaussian kernel bandwidth (squared-distance scale) and how it is chosen"""
    model_config = ConfigDict(frozen=True)

    bandwidth: Optional[float] = Field(None, gt=0.0)
    policy: BandwidthPolicy = BandwidthPolicy.MEDIAN_HEURISTIC

    @model_validator(mode="after")
    def fixed_needs_bandwidth(self) -> "KernelParams":
        if self.policy == BandwidthPolicy.FIXED and self.bandwidth is None:
            raise ValueError("fixed bandwidth policy requires a bandwidth")
        return self


class ManifoldParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    ridge: float = Field(1e-6, gt=0.0)
    distance_mode: DistanceMode = DistanceMode.AFFINE_INVARIANT


STANDALONE_CSC_LAMBDA = 0.05


class CscParams(BaseModel):
    """Schedule and penalty of the l1 convolutional sparse coder"""
    model_config = ConfigDict(frozen=True)

    # None inherits ModelConfig.lmbda inside a model, else STANDALONE_CSC_LAMBDA
    lmbda: Optional[float] = Field(None, ge=0.0)
    max_outer: int = Field(50, ge=1)
    outer_tol: float = Field(1e-5, gt=0.0)
    max_inner: int = Field(100, ge=1)
    inner_tol: float = Field(1e-6, gt=0.0)
    seed: int = 0


class LayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    filters: int = Field(..., ge=1)
    support: Tuple[int, int]
    stride: int = Field(1, ge=1)
    repeat: int = Field(1, ge=1)

    @field_validator("support")
    @classmethod
    def positive_support(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        if v[0] < 1 or v[1] < 1:
            raise ValueError("support must be positive in both axes")
        return v

    def patch_dim(self, channels: int) -> int:
        return channels * self.support[0] * self.support[1]

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        """Parse ``K:fhxfw[:stride[:repeat]]``, e.g. ``16:5x5`` or ``9:2x2:2``."""
        parts = text.strip().split(":")
        if len(parts) < 2 or len(parts) > 4:
            raise ValueError(f"layer spec must look like K:fhxfw[:stride[:repeat]], got {text!r}")
        try:
            fh, fw = (int(v) for v in parts[1].lower().split("x"))
            return cls(
                filters=int(parts[0]),
                support=(fh, fw),
                stride=int(parts[2]) if len(parts) > 2 else 1,
                repeat=int(parts[3]) if len(parts) > 3 else 1,
            )
        except (TypeError, ValueError) as e:
            raise ValueError(f"invalid layer spec {text!r}: {e}") from e


def default_layers() -> List[LayerSpec]:
    return [
        LayerSpec(filters=16, support=(5, 5)),
        LayerSpec(filters=16, support=(1, 1)),
        LayerSpec(filters=9, support=(2, 2), stride=2),
    ]


class ModelConfig(BaseModel):
    """Full experiment configuration, echoed into every checkpoint"""
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    layers: List[LayerSpec] = Field(default_factory=default_layers)
    lmbda: float = Field(0.02, ge=0.0, alias="lambda")
    mmd_weight: float = Field(1.0, ge=0.0)
    manifold_weight: float = Field(1.0, ge=0.0)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=1)
    seed: int = 0
    iun: IunParams = Field(default_factory=IunParams)
    kernel: KernelParams = Field(default_factory=KernelParams)
    manifold: ManifoldParams = Field(default_factory=ManifoldParams)
    correspondence: Correspondence = Correspondence.SOFT_KERNEL

    # Module switches (ablation)
    use_iun: bool = True
    use_mmd: bool = True
    use_manifold: bool = True

    coder: CoderKind = CoderKind.L4
    csc: CscParams = Field(default_factory=CscParams)

    associator_ridge: float = Field(1e-6, ge=0.0)
    manifold_step: float = Field(0.1, ge=0.0, le=1.0)
    msp_max_iter: int = Field(500, ge=1)
    msp_tol: float = Field(1e-6, gt=0.0)
    warm_start_target: bool = True

    @model_validator(mode="after")
    def validate_architecture(self) -> "ModelConfig":
        layers = self.expanded_layers()
        if not layers:
            raise ValueError("at least one layer is required")
        if self.coder == CoderKind.L1:
            if len(layers) != 1:
                raise ValueError("the l1 coder supports exactly one layer")
            return self
        channels = 1
        for index, spec in enumerate(layers):
            d = spec.patch_dim(channels)
            if spec.filters > d:
                raise ValueError(
                    f"layer {index}: {spec.filters} filters exceed patch dimension {d} "
                    f"({channels} channels x {spec.support[0]}x{spec.support[1]})"
                )
            channels = spec.filters
        return self

    def expanded_layers(self) -> List[LayerSpec]:
        """Layers with ``repeat`` unrolled into individual stacks."""
        expanded: List[LayerSpec] = []
        for spec in self.layers:
            single = spec.model_copy(update={"repeat": 1})
            expanded.extend([single] * spec.repeat)
        return expanded

    def with_modules(self, iun: bool, mmd: bool, manifold: bool) -> "ModelConfig":
        return self.model_copy(update={"use_iun": iun, "use_mmd": mmd, "use_manifold": manifold})

    def csc_params(self) -> CscParams:
        """l1 coder schedule with the sparsity weight resolved against ``lmbda``."""
        if self.csc.lmbda is not None:
            return self.csc
        return self.csc.model_copy(update={"lmbda": self.lmbda})


class ModalityMap(BaseModel):
    """Ground-truth intensity mapping from modality A to modality B"""
    model_config = ConfigDict(frozen=True)

    kind: ModalityMapKind = ModalityMapKind.IDENTITY
    gamma: float = Field(1.0, gt=0.0)
    sigma: float = Field(1.0, ge=0.0)

    @classmethod
    def parse(cls, text: str) -> "ModalityMap":
        """Parse ``identity``, ``inversion``, ``gamma:G`` or ``blur_then_remap:SIGMA,G``."""
        name, _, args = text.strip().partition(":")
        try:
            kind = ModalityMapKind(name)
        except ValueError:
            choices = ", ".join(k.value for k in ModalityMapKind)
            raise ValueError(f"unknown modality map {name!r} (expected one of {choices})") from None
        values = [float(v) for v in args.split(",") if v.strip()] if args else []
        if kind == ModalityMapKind.GAMMA:
            if len(values) != 1:
                raise ValueError("gamma map takes one argument, e.g. gamma:2.0")
            return cls(kind=kind, gamma=values[0])
        if kind == ModalityMapKind.BLUR_THEN_REMAP:
            if len(values) != 2:
                raise ValueError("blur_then_remap takes two arguments, e.g. blur_then_remap:1.0,2.0")
            return cls(kind=kind, sigma=values[0], gamma=values[1])
        if values:
            raise ValueError(f"{kind.value} map takes no arguments")
        return cls(kind=kind)

    def __str__(self) -> str:
        if self.kind == ModalityMapKind.GAMMA:
            return f"gamma:{self.gamma!r}"
        if self.kind == ModalityMapKind.BLUR_THEN_REMAP:
            return f"blur_then_remap:{self.sigma!r},{self.gamma!r}"
        return self.kind.value


class PhantomSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    size: int = Field(32, ge=16)
    n_shapes: int = Field(6, ge=0)
    modality_map: ModalityMap = Field(default_factory=ModalityMap)
    noise_sigma: float = Field(0.0, ge=0.0)
    seed: int = 0
    with_lesion: bool = False
