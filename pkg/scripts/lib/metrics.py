"""
PSNR and SSIM on RGB images in [0, 1], computed in float64.
"""

from dataclasses import dataclass
from typing import Dict

import torch
import torch.nn.functional as F

from lib.datapipe import StereoImagePair, gaussian_kernel
from lib.errors import DimensionError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float


def _check(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"Metric inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """10 log10(1 / MSE); identical inputs report PSNR_CAP."""
    _check(a, b)
    mse = (a.to(torch.float64) - b.to(torch.float64)).pow(2).mean().item()
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * torch.log10(torch.tensor(1.0 / mse, dtype=torch.float64)).item())


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean SSIM over channels and valid window positions (no padding)."""
    _check(a, b)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {tuple(a.shape[-2:])}")
    x = a.to(torch.float64).reshape(-1, 1, *a.shape[-2:])
    y = b.to(torch.float64).reshape(-1, 1, *b.shape[-2:])
    window = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA).view(1, 1, SSIM_WINDOW, SSIM_WINDOW)
    c1, c2 = K1 ** 2, K2 ** 2

    mu_x, mu_y = F.conv2d(x, window), F.conv2d(y, window)
    sxx = F.conv2d(x * x, window) - mu_x ** 2
    syy = F.conv2d(y * y, window) - mu_y ** 2
    sxy = F.conv2d(x * y, window) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return (num / den).mean().item()


def evaluate_image(pred: torch.Tensor, gt: torch.Tensor) -> MetricReport:
    return MetricReport(psnr(pred, gt), ssim(pred, gt))


def stereo_metrics(pred: StereoImagePair, gt: StereoImagePair) -> Dict[str, float]:
    """psnr/ssim for left, right and their (L + R) / 2 average."""
    left, right = evaluate_image(pred.left, gt.left), evaluate_image(pred.right, gt.right)
    return {
        "psnr_l": left.psnr_db, "psnr_r": right.psnr_db, "psnr_avg": (left.psnr_db + right.psnr_db) / 2,
        "ssim_l": left.ssim, "ssim_r": right.ssim, "ssim_avg": (left.ssim + right.ssim) / 2,
    }
