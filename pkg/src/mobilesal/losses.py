"""Training objectives: BCE + Dice per side output, SSIM depth loss, and their sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .tensor import AXES, DimensionError, Tensor, as_tensor, clip, log, mean, mul, sum_


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.3
    dice_smooth: float = 1.0
    bce_clamp: float = 1e-7
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0 < self.bce_clamp < 0.5:
            raise ValueError("bce_clamp must lie in (0, 0.5)")


def _same_shape(p: Tensor, g: Tensor, what: str) -> None:
    if p.shape != g.shape:
        axis = next((a for a, s1, s2 in zip(AXES, p.shape, g.shape) if s1 != s2), "rank")
        raise DimensionError(f"{what}: prediction {p.shape} vs target {g.shape}", axis=axis)


def bce_loss(p: Tensor, g: Tensor, config: LossConfig = LossConfig()) -> Tensor:
    """Mean binary cross-entropy with ``p`` clamped to ``[clamp, 1 - clamp]``."""
    g = as_tensor(g, p.dtype)
    _same_shape(p, g, "bce_loss")
    pc = clip(p, config.bce_clamp, 1.0 - config.bce_clamp)
    term = g * log(pc) + (1.0 - g) * log(1.0 - pc)
    return mul(mean(term), -1.0)


def dice_loss(p: Tensor, g: Tensor, config: LossConfig = LossConfig()) -> Tensor:
    """``1 - (2*sum(PG) + eps) / (sum(P) + sum(G) + eps)`` per image, averaged over the batch."""
    g = as_tensor(g, p.dtype)
    _same_shape(p, g, "dice_loss")
    eps = config.dice_smooth
    axes = tuple(range(1, p.data.ndim))
    inter = sum_(p * g, axis=axes)
    denom = sum_(p, axis=axes) + sum_(g, axis=axes) + eps
    return mean(1.0 - (2.0 * inter + eps) / denom)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _cropped_kernel(size: int, sigma: float, extent: int) -> np.ndarray:
    """Center-crop the window to the largest odd length that fits, then renormalize."""
    k = gaussian_kernel(size, sigma)
    if extent >= size:
        return k
    keep = extent if extent % 2 else extent - 1
    start = (size - keep) // 2
    k = k[start:start + keep]
    return k / k.sum()


def ssim(x: Tensor, y: Tensor, config: LossConfig = LossConfig()) -> Tensor:
    """Mean SSIM over all valid window positions, averaged over the batch.

    Single-channel maps of shape ``(n, 1, h, w)``; local statistics use an
    unpadded Gaussian window, cropped when the map is smaller than it.
    """
    y = as_tensor(y, x.dtype)
    _same_shape(x, y, "ssim")
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise DimensionError(f"ssim expects (n,1,h,w) maps, got {x.shape}", axis="channel")
    h, w = x.shape[2:]
    kh = _cropped_kernel(config.ssim_window, config.ssim_sigma, h).astype(x.dtype)
    kw = _cropped_kernel(config.ssim_window, config.ssim_sigma, w).astype(x.dtype)
    c1 = (config.ssim_k1 * config.dynamic_range) ** 2
    c2 = (config.ssim_k2 * config.dynamic_range) ** 2

    def filt(t):
        return ops.window_filter(t, kh, kw)

    mu_x, mu_y = filt(x), filt(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = filt(x * x) - mu_xx
    var_y = filt(y * y) - mu_yy
    cov = filt(x * y) - mu_xy
    num = (2.0 * mu_xy + c1) * (2.0 * cov + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    return mean(num / den)


def idr_loss(restored: Tensor, target: Tensor, config: LossConfig = LossConfig()) -> Tensor:
    return 1.0 - ssim(restored, target, config)


@dataclass
class LossBreakdown:
    total: Tensor
    saliency: list[float]
    idr: float | None

    @property
    def loss_sal(self) -> float:
        return float(sum(self.saliency))


def total_loss(preds: Sequence[Tensor], gt: Tensor, restored: Tensor | None, depth_gt: Tensor | None,
               config: LossConfig = LossConfig()) -> LossBreakdown:
    """Sum of BCE + Dice over every side output plus ``lam`` times the depth loss."""
    if restored is None and config.lam > 0:
        raise ValueError("restored depth is required when lambda > 0")
    sal_terms = []
    total = None
    for p in preds:
        term = bce_loss(p, gt, config) + dice_loss(p, gt, config)
        sal_terms.append(term.item())
        total = term if total is None else total + term
    idr_value = None
    if restored is not None:
        li = idr_loss(restored, depth_gt, config)
        idr_value = li.item()
        total = total + li * config.lam
    return LossBreakdown(total, sal_terms, idr_value)
