"""
Scoring synthesized images against aligned references, and the CSV emitters
for training logs, per-image metrics and ablation tables.
"""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import structlog

from ..core.exceptions import DatasetIOError, DegenerateInputError, DimensionError
from ..models.state import EpochRecord, LossComponents, ModelState
from .metrics import macro_dice, psnr, segment_threshold, ssim
from .network import synthesize
from .phantoms import PhantomRecord

logger = structlog.get_logger(__name__)

TRAINING_LOG_HEADER = ["epoch"] + LossComponents.names()
METRICS_HEADER = ["phantom_id", "psnr_db", "ssim", "macro_dice"]
ABLATION_HEADER = [
    "configuration", "csc", "iun", "mmd", "manifold",
    "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "dice_mean", "dice_std",
]

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ImageScore:
    phantom_id: int
    psnr_db: float
    ssim: float
    macro_dice: float


@dataclass(frozen=True)
class EvaluationReport:
    scores: List[ImageScore]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([s.psnr_db for s in self.scores]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s.ssim for s in self.scores]))

    @property
    def mean_dice(self) -> float:
        return float(np.mean([s.macro_dice for s in self.scores]))


def _labels(image: np.ndarray, n_classes: int) -> np.ndarray:
    try:
        return segment_threshold(image, n_classes)
    except DegenerateInputError:
        logger.warning("constant_image_segmented", classes=n_classes)
        return np.zeros(image.shape, dtype=np.int64)


def score_image(phantom_id: int, reference: np.ndarray, candidate: np.ndarray, n_classes: int = 3) -> ImageScore:
    """PSNR, SSIM and macro Dice of the threshold segmentations."""
    report = macro_dice(_labels(reference, n_classes), _labels(candidate, n_classes), n_classes)
    return ImageScore(
        phantom_id=phantom_id,
        psnr_db=psnr(reference, candidate),
        ssim=ssim(reference, candidate),
        macro_dice=report.macro,
    )


def evaluate(state: ModelState, records: Sequence[PhantomRecord], direction: str = "forward",
             synthesized: Optional[List[np.ndarray]] = None) -> EvaluationReport:
    """Synthesize every record (unless given) and score it against its aligned counterpart."""
    if not records:
        raise DimensionError("no records to evaluate")
    scores = []
    for index, record in enumerate(records):
        source, reference = (record.a, record.b) if direction == "forward" else (record.b, record.a)
        if source is None or reference is None:
            raise DimensionError(f"phantom {record.phantom_id} lacks an aligned pair")
        output = synthesized[index] if synthesized is not None else synthesize(source, state, direction=direction)
        n_classes = 3 if record.mask is None else max(3, int(record.mask.max()) + 1)
        scores.append(score_image(record.phantom_id, reference, output, n_classes))
    report = EvaluationReport(scores)
    logger.info("evaluation_completed", images=len(scores), psnr=report.mean_psnr,
                ssim=report.mean_ssim, dice=report.mean_dice)
    return report


def identity_baseline(records: Sequence[PhantomRecord]) -> EvaluationReport:
    """Scores of copying A as the estimate of B."""
    return EvaluationReport([
        score_image(r.phantom_id, r.b, r.a, 3 if r.mask is None else max(3, int(r.mask.max()) + 1))
        for r in records
    ])


# ----------------------------------------------------------------------------
# CSV
# ----------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
    except OSError as e:
        raise DatasetIOError(f"cannot write {path}: {e}") from e


def write_training_log(path: PathLike, records: Sequence[EpochRecord]) -> None:
    write_csv(path, TRAINING_LOG_HEADER, ([r.epoch] + r.losses.values() for r in records))


def write_metrics(path: PathLike, report: EvaluationReport) -> None:
    rows: List[list] = [[s.phantom_id, s.psnr_db, s.ssim, s.macro_dice] for s in report.scores]
    rows.append(["mean", report.mean_psnr, report.mean_ssim, report.mean_dice])
    write_csv(path, METRICS_HEADER, rows)
