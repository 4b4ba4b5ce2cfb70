"""Training losses (L1, SSIM, identity) and evaluation metrics (PSNR, SSIM)."""
from __future__ import annotations

import functools
import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    beta: float = 4.0
    lam: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ValueError(f"loss weights must be nonnegative, got {self}")


def _check_same(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ in shape")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    _check_same(pred, target)
    return T.mean(T.abs_(pred - target))


@functools.lru_cache(maxsize=8)
def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    win = np.outer(g, g)
    win.setflags(write=False)
    return win


def ssim_map(pred: Tensor, target: Tensor, data_range: float = 1.0, k1: float = 0.01,
             k2: float = 0.03, win_size: int = 11, sigma: float = 1.5) -> Tensor:
    """Per-pixel SSIM on ``[..., H, W, C]`` images, returned as ``[..., C, H', W']``.

    Local statistics use a Gaussian window with valid padding, so
    ``H' = H - win_size + 1``.
    """
    _check_same(pred, target)
    h, w = pred.shape[-3:-1]
    if h < win_size or w < win_size:
        raise ShapeError(f"image {h}x{w} smaller than the {win_size}x{win_size} SSIM window")
    n = pred.ndim
    chw = (*range(n - 3), n - 1, n - 3, n - 2)
    x = pred.permute(chw)
    y = target.permute(chw)
    win = gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    mu_x = T.depthwise_conv2d(x, win)
    mu_y = T.depthwise_conv2d(y, win)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = T.depthwise_conv2d(x * x, win) - mu_xx
    var_y = T.depthwise_conv2d(y * y, win) - mu_yy
    cov = T.depthwise_conv2d(x * y, win) - mu_xy
    num = (2.0 * mu_xy + c1) * (2.0 * cov + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    return num / den


def ssim(pred: Tensor, target: Tensor, **kwargs) -> Tensor:
    """Mean SSIM over the map, channels, and any leading batch dims."""
    return T.mean(ssim_map(pred, target, **kwargs))


def mse_to_psnr(mse: float, max_val: float = 1.0) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / mse)


def psnr(pred, target, max_val: float = 1.0) -> float:
    """PSNR in dB; ``inf`` for identical inputs. Callers clamp to [0, 1] first."""
    a = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    b = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"prediction {a.shape} and target {b.shape} differ in shape")
    return mse_to_psnr(float(np.mean((a - b) ** 2)), max_val)


def identity_loss(params: Mapping[str, Tensor], cfg, clean: Tensor,
                  forward: Callable | None = None) -> Tensor:
    """L1 between the network applied to a clean image and that image."""
    if forward is None:
        from .model import sdnet_forward as forward
    return l1_loss(forward(clean, params, cfg), clean)


def combine(l1, ssim_value, ide, weights: LossWeights = LossWeights()):
    """``alpha*L1 + beta*(1 - SSIM) + lam*identity``; works on tensors or floats."""
    return weights.alpha * l1 + weights.beta * (1.0 - ssim_value) + weights.lam * ide


def total_loss(pred: Tensor, clean: Tensor, params: Mapping[str, Tensor], cfg,
               weights: LossWeights = LossWeights(), ide_pred: Tensor | None = None,
               forward: Callable | None = None) -> tuple[Tensor, dict[str, float]]:
    """Composite training loss for a batch, plus the component values.

    ``ide_pred`` is the network output on ``clean`` when the caller already ran
    it (e.g. stacked with the rainy batch); otherwise a second pass is made.
    Every term is a mean over all pixels, hence also over batch items.
    """
    l1 = l1_loss(pred, clean)
    s = ssim(pred, clean)
    if ide_pred is None:
        ide = identity_loss(params, cfg, clean, forward)
    else:
        ide = l1_loss(ide_pred, clean)
    total = combine(l1, s, ide, weights)
    parts = {"loss_l1": l1.item(), "loss_ssim": s.item(), "loss_ide": ide.item()}
    return total, parts
