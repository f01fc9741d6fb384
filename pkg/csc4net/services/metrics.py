"""
Image quality and segmentation-overlap metrics: PSNR, SSIM and Dice, plus the
intensity-quantile segmenter used as the tissue-class oracle.

Intensities are assumed normalized to [0, 1] (peak 1.0, dynamic range 1).
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import structlog
from skimage.metrics import mean_squared_error
from skimage.util import view_as_windows

from ..core.config import settings
from ..core.exceptions import DegenerateInputError, DimensionError

logger = structlog.get_logger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(reference: np.ndarray, candidate: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(candidate, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise DimensionError(f"metrics expect 2-D images, got {a.ndim}-D")
    return a, b


def psnr_from_mse(mse: float, cap: Optional[float] = None) -> float:
    cap = settings.PSNR_CAP_DB if cap is None else cap
    if mse <= 0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def psnr(reference: np.ndarray, candidate: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; exact matches report the cap."""
    a, b = _pair(reference, candidate)
    return psnr_from_mse(float(mean_squared_error(a, b)))


def ssim(reference: np.ndarray, candidate: np.ndarray, window: int = 8, overlapping: bool = False,
         c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """
    Mean local SSIM over window x window blocks.

    Non-overlapping blocks by default; ``overlapping=True`` slides the window
    one pixel at a time. Local statistics are population (biased) moments.
    """
    a, b = _pair(reference, candidate)
    if a.shape[0] < window or a.shape[1] < window:
        raise DimensionError(f"image {a.shape} is smaller than the {window}x{window} SSIM window")
    step = 1 if overlapping else window
    wa = view_as_windows(a, (window, window), step=step).reshape(-1, window * window)
    wb = view_as_windows(b, (window, window), step=step).reshape(-1, window * window)

    mu_a = wa.mean(axis=1)
    mu_b = wb.mean(axis=1)
    da = wa - mu_a[:, None]
    db = wb - mu_b[:, None]
    var_a = np.mean(da * da, axis=1)
    var_b = np.mean(db * db, axis=1)
    cov = np.mean(da * db, axis=1)

    numerator = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


def segment_threshold(image: np.ndarray, n_classes: int = 3) -> np.ndarray:
    """
    Label pixels by intensity quantile bins (0 = darkest class).

    With three classes these are the tertiles standing in for CSF, GM and WM;
    a fourth class gives the optional lesion band.
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be at least 2, got {n_classes}")
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise DimensionError("cannot segment an empty image")
    if float(image.max()) == float(image.min()):
        raise DegenerateInputError("cannot segment a constant image")
    edges = np.quantile(image, np.arange(1, n_classes) / n_classes)
    labels = np.searchsorted(edges, image.ravel(), side="left")
    return labels.reshape(image.shape).astype(np.int64)


def dice(mask_a: np.ndarray, mask_b: np.ndarray, label: int) -> float:
    """2|A ∩ B| / (|A| + |B|) for one class; 1.0 when the class is absent from both."""
    a = np.asarray(mask_a)
    b = np.asarray(mask_b)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    in_a = a == label
    in_b = b == label
    total = int(in_a.sum()) + int(in_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(in_a, in_b).sum()) / total


@dataclass(frozen=True)
class DiceReport:
    per_class: Tuple[float, ...]
    vacuous: Tuple[int, ...]

    @property
    def macro(self) -> float:
        return float(np.mean(self.per_class))


def macro_dice(mask_a: np.ndarray, mask_b: np.ndarray, n_classes: int = 3) -> DiceReport:
    scores: List[float] = []
    vacuous: List[int] = []
    a = np.asarray(mask_a)
    b = np.asarray(mask_b)
    for label in range(n_classes):
        if not np.any(a == label) and not np.any(b == label):
            vacuous.append(label)
            logger.debug("dice_vacuous_class", label=label)
        scores.append(dice(a, b, label))
    return DiceReport(per_class=tuple(scores), vacuous=tuple(vacuous))
