"""
Module on/off ablation grid.

Each configuration trains on the unpaired training halves and is scored on
the test pairs, once per seed; rows report mean and standard deviation.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import structlog

from ..schemas.config import CoderKind, ModelConfig
from .evaluation import ABLATION_HEADER, evaluate, write_csv
from .network import train
from .phantoms import DatasetSplit

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class AblationVariant:
    name: str
    iun: bool
    mmd: bool
    manifold: bool


ABLATION_GRID = (
    AblationVariant("CSC", iun=False, mmd=False, manifold=False),
    AblationVariant("CSC+IUN", iun=True, mmd=False, manifold=False),
    AblationVariant("CSC+L_H", iun=False, mmd=True, manifold=False),
    AblationVariant("CSC+L_M", iun=False, mmd=False, manifold=True),
    AblationVariant("CSC+IUN+L_H", iun=True, mmd=True, manifold=False),
    AblationVariant("CSC+IUN+L_M", iun=True, mmd=False, manifold=True),
    AblationVariant("CSC+L_H+L_M", iun=False, mmd=True, manifold=True),
)
FULL_VARIANT = AblationVariant("full", iun=True, mmd=True, manifold=True)


@dataclass
class AblationRow:
    variant: AblationVariant
    psnr: List[float] = field(default_factory=list)
    ssim: List[float] = field(default_factory=list)
    dice: List[float] = field(default_factory=list)

    @staticmethod
    def _std(values: List[float]) -> float:
        return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def psnr_std(self) -> float:
        return self._std(self.psnr)

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def ssim_std(self) -> float:
        return self._std(self.ssim)

    @property
    def dice_mean(self) -> float:
        return float(np.mean(self.dice))

    @property
    def dice_std(self) -> float:
        return self._std(self.dice)

    def csv_row(self) -> list:
        v = self.variant
        return [v.name, True, v.iun, v.mmd, v.manifold,
                self.psnr_mean, self.psnr_std, self.ssim_mean, self.ssim_std, self.dice_mean, self.dice_std]


def variant_config(base: ModelConfig, variant: AblationVariant, seed: int,
                   baseline_coder: CoderKind = CoderKind.L1) -> ModelConfig:
    """The experiment configuration of one grid cell."""
    update = base.model_dump()
    update.update(use_iun=variant.iun, use_mmd=variant.mmd, use_manifold=variant.manifold, seed=seed)
    if variant.name == "CSC" and baseline_coder == CoderKind.L1:
        first = base.expanded_layers()[0]
        update.update(coder=CoderKind.L1, layers=[first.model_dump()])
    return ModelConfig.model_validate(update)


CellCallback = Callable[[AblationVariant, int, float], None]


def run_ablation(split: DatasetSplit, base: ModelConfig, seeds: Sequence[int], include_full: bool = False,
                 baseline_coder: CoderKind = CoderKind.L1,
                 on_cell: Optional[CellCallback] = None) -> List[AblationRow]:
    if not seeds:
        raise ValueError("at least one seed is required")
    images_x = [r.a for r in split.train_x]
    images_y = [r.b for r in split.train_y]
    variants = list(ABLATION_GRID) + ([FULL_VARIANT] if include_full else [])

    rows = []
    for variant in variants:
        row = AblationRow(variant)
        for seed in seeds:
            config = variant_config(base, variant, seed, baseline_coder)
            state = train(images_x, images_y, config)
            report = evaluate(state, split.test)
            row.psnr.append(report.mean_psnr)
            row.ssim.append(report.mean_ssim)
            row.dice.append(report.mean_dice)
            logger.info("ablation_cell", configuration=variant.name, seed=seed, psnr=report.mean_psnr)
            if on_cell is not None:
                on_cell(variant, seed, report.mean_psnr)
        rows.append(row)
    return rows


@dataclass(frozen=True)
class TrendReport:
    csc_below_mmd: bool
    csc_below_manifold: bool
    full_at_least_singles: Optional[bool] = None

    @property
    def passed(self) -> bool:
        checks = [self.csc_below_mmd, self.csc_below_manifold]
        if self.full_at_least_singles is not None:
            checks.append(self.full_at_least_singles)
        return all(checks)


def trend_check(rows: Sequence[AblationRow]) -> TrendReport:
    """Mean-PSNR ordering: CSC < CSC+L_H, CSC < CSC+L_M, full >= every single-module row."""
    by_name = {row.variant.name: row.psnr_mean for row in rows}
    singles = [by_name[name] for name in ("CSC+IUN", "CSC+L_H", "CSC+L_M")]
    full = by_name.get(FULL_VARIANT.name)
    report = TrendReport(
        csc_below_mmd=by_name["CSC"] < by_name["CSC+L_H"],
        csc_below_manifold=by_name["CSC"] < by_name["CSC+L_M"],
        full_at_least_singles=None if full is None else full >= max(singles),
    )
    logger.info("ablation_trend", passed=report.passed, **{k: v for k, v in by_name.items()})
    return report


def write_ablation(path, rows: Sequence[AblationRow]) -> None:
    write_csv(path, ABLATION_HEADER, (row.csv_row() for row in rows))
