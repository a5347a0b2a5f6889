"""Saliency and depth-restoration evaluation: max F-measure, MAE, PSNR, SSIM."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .losses import LossConfig, ssim as _ssim_tensor
from .tensor import Tensor, no_grad

N_THRESHOLDS = 255
THRESHOLDS = np.arange(1, N_THRESHOLDS + 1) / 256.0
PSNR_CAP = 99.0


@dataclass
class PrecisionRecallCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def to_records(self) -> list[dict]:
        return [{"t": float(t), "precision": float(p), "recall": float(r)}
                for t, p, r in zip(self.thresholds, self.precision, self.recall)]


def image_precision_recall(pred: np.ndarray, gt: np.ndarray,
                           thresholds: np.ndarray = THRESHOLDS) -> tuple[np.ndarray, np.ndarray]:
    """Precision/recall of ``pred >= t`` against a binary mask for every threshold.

    An empty binarized prediction has precision 0; an empty mask has recall 1.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    fg = np.asarray(gt).ravel() > 0.5
    pos_sorted = np.sort(pred[fg])
    all_sorted = np.sort(pred)
    t = np.asarray(thresholds, dtype=np.float64)
    tp = pos_sorted.size - np.searchsorted(pos_sorted, t, side="left")
    predicted = all_sorted.size - np.searchsorted(all_sorted, t, side="left")
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 0.0)
    recall = tp / fg.sum() if fg.any() else np.ones_like(t)
    return precision, recall


def f_measure_curve(preds: Iterable[np.ndarray], gts: Iterable[np.ndarray],
                    thresholds: np.ndarray = THRESHOLDS) -> PrecisionRecallCurve:
    """Per-image precision/recall averaged over the dataset at each threshold."""
    p_sum = np.zeros(len(thresholds))
    r_sum = np.zeros(len(thresholds))
    count = 0
    for pred, gt in zip(preds, gts):
        p, r = image_precision_recall(pred, gt, thresholds)
        p_sum += p
        r_sum += r
        count += 1
    if count == 0:
        raise ValueError("f_measure_curve needs at least one image")
    return PrecisionRecallCurve(np.asarray(thresholds, dtype=np.float64), p_sum / count, r_sum / count)


def f_beta(precision, recall, beta_sq: float = 0.3):
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    denom = beta_sq * precision + recall
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(denom > 0, (1 + beta_sq) * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    return f


def f_beta_max(curve: PrecisionRecallCurve, beta_sq: float = 0.3, beta_is_squared: bool = True) -> float:
    """Maximum weighted F-measure over the curve.

    ``beta_sq`` is used as beta squared by default; with
    ``beta_is_squared=False`` the value is taken as beta itself and squared.
    """
    b2 = beta_sq if beta_is_squared else beta_sq ** 2
    return float(np.max(f_beta(curve.precision, curve.recall, b2)))


def mae(preds: Sequence[np.ndarray] | np.ndarray, gts: Sequence[np.ndarray] | np.ndarray) -> float:
    """Mean absolute error per image, averaged over the dataset.

    A single pair of same-shaped arrays counts as one image.
    """
    if isinstance(preds, np.ndarray) and isinstance(gts, np.ndarray) and preds.shape == gts.shape:
        preds, gts = [preds], [gts]
    vals = []
    for p, g in zip(preds, gts):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ValueError(f"mae: shape mismatch {p.shape} vs {g.shape}")
        vals.append(np.abs(p - g).mean())
    if not vals:
        raise ValueError("mae needs at least one image")
    return float(np.mean(vals))


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(x, np.float64) - np.asarray(y, np.float64)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak ** 2 / mse))


def ssim_metric(x: np.ndarray, y: np.ndarray, config: LossConfig = LossConfig()) -> float:
    """SSIM of two 2-D maps in [0, 1], computed in float64."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 2:
        x, y = x[None, None], y[None, None]
    with no_grad():
        return _ssim_tensor(Tensor(x, dtype=np.float64), Tensor(y, dtype=np.float64), config).item()


@dataclass
class MetricsReport:
    dataset: str
    num_images: int
    f_beta_max: float
    mae: float
    curve: PrecisionRecallCurve
    psnr: float | None = None
    ssim: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"dataset": self.dataset, "num_images": self.num_images,
             "f_beta_max": self.f_beta_max, "mae": self.mae}
        if self.psnr is not None:
            d["psnr"] = self.psnr
        if self.ssim is not None:
            d["ssim"] = self.ssim
        d.update(self.extra)
        d["curve"] = self.curve.to_records()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], dataset: str = "dataset",
             depth_pairs: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
             beta_sq: float = 0.3, beta_is_squared: bool = True) -> MetricsReport:
    preds, gts = list(preds), list(gts)
    curve = f_measure_curve(preds, gts)
    report = MetricsReport(dataset, len(preds), f_beta_max(curve, beta_sq, beta_is_squared),
                           mae(preds, gts), curve)
    if depth_pairs:
        report.psnr = float(np.mean([psnr(r, g) for r, g in depth_pairs]))
        report.ssim = float(np.mean([ssim_metric(r, g) for r, g in depth_pairs]))
    return report
