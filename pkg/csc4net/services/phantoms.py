"""
Synthetic two-modality phantoms, unpaired train splits and dataset directories.

A phantom pair is an A-modality image built from a head ellipse and random
tissue blobs, its B-modality rendering through a known intensity map, and the
tissue label mask (intensity quantiles of A).
"""

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy import ndimage
from skimage.draw import ellipse, rectangle

from ..core.exceptions import DatasetIOError, DimensionError
from ..schemas.config import ModalityMap, ModalityMapKind, PhantomSpec
from .metrics import segment_threshold
from .tensor_io import read_tensor, write_tensor

logger = structlog.get_logger(__name__)

# Background, then CSF-, GM- and WM-like levels
TISSUE_LEVELS = (0.3, 0.55, 0.8)
LESION_LEVEL = 1.0
SMOOTHING_SIGMA = 0.7

MANIFEST_NAME = "manifest.txt"
ROLES = ("train_x", "train_y", "validation", "test")
MODALITIES = ("a", "b", "mask")

PathLike = Union[str, Path]


# ----------------------------------------------------------------------------
# Generation
# ----------------------------------------------------------------------------

def apply_modality_map(image: np.ndarray, mapping: ModalityMap) -> np.ndarray:
    """Render modality B from modality A (before noise)."""
    a = np.asarray(image, dtype=np.float64)
    if mapping.kind == ModalityMapKind.IDENTITY:
        return a.copy()
    if mapping.kind == ModalityMapKind.INVERSION:
        return 1.0 - a
    if mapping.kind == ModalityMapKind.GAMMA:
        return np.power(a, mapping.gamma)
    blurred = np.clip(ndimage.gaussian_filter(a, sigma=mapping.sigma), 0.0, 1.0)
    return np.power(blurred, mapping.gamma)


def _random_blob(rng: np.random.Generator, n: int, head: np.ndarray) -> np.ndarray:
    region = np.zeros((n, n), dtype=bool)
    cy, cx = n * rng.uniform(0.3, 0.7, size=2)
    if rng.random() < 0.5:
        ry, rx = n * rng.uniform(0.06, 0.18, size=2)
        rr, cc = ellipse(cy, cx, ry, rx, shape=(n, n), rotation=rng.uniform(0.0, math.pi))
    else:
        hy, hx = n * rng.uniform(0.05, 0.15, size=2)
        start = (int(cy - hy), int(cx - hx))
        end = (int(cy + hy), int(cx + hx))
        rr, cc = rectangle(start, end=end, shape=(n, n))
    region[rr, cc] = True
    return region & head


def gen_phantom(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.size
    image = np.zeros((n, n), dtype=np.float64)

    jitter = rng.uniform(-0.04, 0.04, size=4)
    head = np.zeros((n, n), dtype=bool)
    rr, cc = ellipse(n * (0.5 + jitter[0]), n * (0.5 + jitter[1]),
                     n * (0.42 + jitter[2]), n * (0.36 + jitter[3]), shape=(n, n))
    head[rr, cc] = True
    image[head] = TISSUE_LEVELS[2]

    # Cortical ring
    inner = np.zeros((n, n), dtype=bool)
    rr, cc = ellipse(n * (0.5 + jitter[0]), n * (0.5 + jitter[1]),
                     n * (0.34 + jitter[2]), n * (0.28 + jitter[3]), shape=(n, n))
    inner[rr, cc] = True
    image[head & ~inner] = TISSUE_LEVELS[1]

    for _ in range(spec.n_shapes):
        level = TISSUE_LEVELS[int(rng.integers(len(TISSUE_LEVELS)))]
        image[_random_blob(rng, n, inner)] = level

    if spec.with_lesion:
        ry, rx = n * rng.uniform(0.04, 0.08, size=2)
        cy, cx = n * rng.uniform(0.4, 0.6, size=2)
        rr, cc = ellipse(cy, cx, ry, rx, shape=(n, n))
        image[rr, cc] = LESION_LEVEL

    image = ndimage.gaussian_filter(image, sigma=SMOOTHING_SIGMA)
    return np.clip(image, 0.0, 1.0)


def gen_phantom_pair(spec: PhantomSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Generate one (A, B, mask) triple deterministically from ``spec.seed``.

    B = modality_map(A) + N(0, noise_sigma^2), clamped to [0, 1]; the mask
    labels the intensity tertiles of A (quartiles when a lesion is present).
    """
    rng = np.random.default_rng(spec.seed)
    a = gen_phantom(spec, rng)
    b = apply_modality_map(a, spec.modality_map)
    if spec.noise_sigma > 0:
        b = b + spec.noise_sigma * rng.standard_normal(b.shape)
    b = np.clip(b, 0.0, 1.0)
    mask = segment_threshold(a, 4 if spec.with_lesion else 3)
    return a, b, mask


@dataclass(frozen=True)
class PhantomRecord:
    phantom_id: int
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None


def generate_pairs(n: int, spec: PhantomSpec) -> List[PhantomRecord]:
    """``n`` phantom pairs with per-pair seeds spawned from ``spec.seed``."""
    if n < 1:
        raise ValueError("at least one phantom is required")
    records = []
    for index, child in enumerate(np.random.SeedSequence(spec.seed).spawn(n)):
        seed = int(child.generate_state(1)[0])
        a, b, mask = gen_phantom_pair(spec.model_copy(update={"seed": seed}))
        records.append(PhantomRecord(phantom_id=index, a=a, b=b, mask=mask))
    return records


# ----------------------------------------------------------------------------
# Splits
# ----------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    """Unpaired training halves plus paired validation and test sets"""
    train_x: List[PhantomRecord] = field(default_factory=list)
    train_y: List[PhantomRecord] = field(default_factory=list)
    validation: List[PhantomRecord] = field(default_factory=list)
    test: List[PhantomRecord] = field(default_factory=list)

    def role(self, name: str) -> List[PhantomRecord]:
        if name not in ROLES:
            raise ValueError(f"unknown dataset role {name!r}")
        return getattr(self, name)

    def counts(self) -> Dict[str, int]:
        return {name: len(self.role(name)) for name in ROLES}


def make_split(pairs: Sequence[PhantomRecord], fractions: Sequence[float] = (0.6, 0.2, 0.2),
               seed: int = 0) -> DatasetSplit:
    """
    Shuffle pairs into train / validation / test by ``fractions``.

    The training share is divided in half: one half keeps only modality A
    (train_x), the other only modality B (train_y), so no phantom appears on
    both sides.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(pairs)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = n - n_train - n_val
    counts = (n_train, n_val, n_test)
    if n_train < 2 or n_test < 0 or any(f > 0 and c < 1 for f, c in zip(fractions, counts)):
        raise DimensionError(f"too few samples ({n}) for fractions {fractions}")

    order = np.random.default_rng(seed).permutation(n)
    shuffled = [pairs[i] for i in order]
    train = shuffled[:n_train]
    half = n_train // 2
    split = DatasetSplit(
        train_x=[replace(r, b=None, mask=None) for r in train[:half]],
        train_y=[replace(r, a=None, mask=None) for r in train[half:]],
        validation=list(shuffled[n_train:n_train + n_val]),
        test=list(shuffled[n_train + n_val:]),
    )
    logger.debug("split_made", seed=seed, **split.counts())
    return split


# ----------------------------------------------------------------------------
# Dataset directories
# ----------------------------------------------------------------------------

def write_dataset(out_dir: PathLike, split: DatasetSplit, dtype: str = "f64") -> int:
    """Write every tensor of the split plus the manifest; returns the record count."""
    root = Path(out_dir)
    lines: List[str] = []
    try:
        root.mkdir(parents=True, exist_ok=True)
        for role in ROLES:
            (root / role).mkdir(exist_ok=True)
            for record in split.role(role):
                for modality in MODALITIES:
                    arr = getattr(record, modality)
                    if arr is None:
                        continue
                    rel = f"{role}/phantom_{record.phantom_id:04d}_{modality}.csl4"
                    write_tensor(root / rel, arr, dtype)
                    lines.append(f"{role}\t{rel}\t{record.phantom_id}\t{modality}\n")
        (root / MANIFEST_NAME).write_text("".join(lines), encoding="utf-8", newline="\n")
    except OSError as e:
        raise DatasetIOError(f"cannot write dataset {root}: {e}") from e
    logger.info("dataset_written", path=str(root), records=len(lines), **split.counts())
    return len(lines)


def read_dataset(data_dir: PathLike) -> DatasetSplit:
    root = Path(data_dir)
    manifest = root / MANIFEST_NAME
    try:
        text = manifest.read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"cannot read manifest {manifest}: {e}") from e

    grouped: Dict[Tuple[str, int], Dict[str, np.ndarray]] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DatasetIOError(f"{manifest}:{number}: expected 4 tab-separated fields, got {len(parts)}")
        role, rel, phantom_id, modality = parts
        if role not in ROLES or modality not in MODALITIES:
            raise DatasetIOError(f"{manifest}:{number}: unknown role or modality ({role!r}, {modality!r})")
        try:
            key = (role, int(phantom_id))
        except ValueError:
            raise DatasetIOError(f"{manifest}:{number}: phantom id {phantom_id!r} is not an integer") from None
        grouped.setdefault(key, {})[modality] = read_tensor(root / rel)

    split = DatasetSplit()
    for (role, phantom_id), arrays in grouped.items():
        mask = arrays.get("mask")
        split.role(role).append(PhantomRecord(
            phantom_id=phantom_id,
            a=arrays.get("a"),
            b=arrays.get("b"),
            mask=None if mask is None else mask.astype(np.int64),
        ))
    logger.debug("dataset_read", path=str(root), **split.counts())
    return split
