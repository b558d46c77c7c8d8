"""Volume quality metrics: PSNR, windowed 3-D SSIM, IoU, and Dice."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.ndimage import uniform_filter

from .phantom import Volume

PSNR_SENTINEL = 999.0  # reported for identical inputs (RMSE = 0)
SSIM_WINDOW = 7


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    iou: float
    dice: float
    data_range_used: float
    threshold_used: float

    def to_dict(self) -> dict:
        return asdict(self)


def _as_arrays(gt: Volume, pred: Volume):
    a = np.asarray(gt.data, dtype=np.float64)
    b = np.asarray(pred.data, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"volume dims differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(gt: Volume, pred: Volume, data_range: float | None = None) -> float:
    """20*log10(R / RMSE); identical inputs report the 999.0 sentinel."""
    a, b = _as_arrays(gt, pred)
    if data_range is None:
        data_range = float(a.max() - a.min())
        if data_range == 0.0:
            raise ValueError("gt is constant; pass data_range explicitly")
    rmse = float(np.sqrt(np.mean((a - b) ** 2)))
    if rmse == 0.0:
        return PSNR_SENTINEL
    return 20.0 * np.log10(data_range / rmse)


def ssim(gt: Volume, pred: Volume, data_range: float | None = None) -> float:
    """Mean local SSIM over a sliding 7x7x7 uniform window, valid region only."""
    a, b = _as_arrays(gt, pred)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"volume smaller than the {SSIM_WINDOW}^3 SSIM window")
    if data_range is None:
        data_range = float(a.max() - a.min())
        if data_range == 0.0:
            raise ValueError("gt is constant; pass data_range explicitly")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(x):
        return uniform_filter(x, size=SSIM_WINDOW, mode="constant")

    mu_a = filt(a)
    mu_b = filt(b)
    mu_aa = filt(a * a)
    mu_bb = filt(b * b)
    mu_ab = filt(a * b)
    var_a = mu_aa - mu_a**2
    var_b = mu_bb - mu_b**2
    cov = mu_ab - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    m = SSIM_WINDOW // 2
    valid = smap[m:-m, m:-m, m:-m]
    return float(valid.mean())


def iou_dice(gt: Volume, pred: Volume, threshold: float) -> tuple[float, float]:
    """Overlap ratios of the volumes binarized at threshold.

    Both-empty masks score (1.0, 1.0)."""
    a, b = _as_arrays(gt, pred)
    ma = a > threshold
    mb = b > threshold
    inter = float(np.count_nonzero(ma & mb))
    union = float(np.count_nonzero(ma | mb))
    iou = 1.0 if union == 0 else inter / union
    # derived from iou so the dice = 2*iou/(1+iou) identity holds bit-exactly
    dice = 2.0 * iou / (1.0 + iou)
    return iou, dice


def default_threshold(gt: Volume) -> float:
    return 0.5 * float(gt.data.max())


def evaluate(
    gt: Volume,
    pred: Volume,
    data_range: float | None = None,
    threshold: float | None = None,
) -> MetricReport:
    """All metrics in one report; records the range and threshold used."""
    if data_range is None:
        data_range = float(gt.data.max() - gt.data.min())
    if threshold is None:
        threshold = default_threshold(gt)
    i, d = iou_dice(gt, pred, threshold)
    return MetricReport(
        psnr_db=psnr(gt, pred, data_range=data_range),
        ssim=ssim(gt, pred, data_range=data_range),
        iou=i,
        dice=d,
        data_range_used=data_range,
        threshold_used=threshold,
    )
