"""Image losses and metrics. Images are (H, W, 3) tensors in [0, 1]."""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import torch
import torch.nn.functional as F

from app.src.schemas.base import LossReport

logger = logging.getLogger(__name__)

SSIM_WINDOW: int = 11
SSIM_SIGMA: float = 1.5
SSIM_C1: float = 0.01**2
SSIM_C2: float = 0.03**2
PSNR_CAP: float = 100.0
PSNR_MSE_FLOOR: float = 1e-10

PerceptualTerm = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
_PERCEPTUAL_TERMS: Dict[str, tuple[PerceptualTerm, float]] = {}


def register_perceptual_term(name: str, fn: PerceptualTerm, weight: float = 1.0) -> None:
    """Adds a perceptual loss term fn(pred, gt) -> scalar to every `image_loss`."""
    if name in _PERCEPTUAL_TERMS:
        raise ValueError(f"perceptual term '{name}' is already registered")
    _PERCEPTUAL_TERMS[name] = (fn, weight)


def unregister_perceptual_term(name: str) -> None:
    _PERCEPTUAL_TERMS.pop(name, None)


def _check_shapes(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.dim() != 3 or pred.shape[-1] != 3:
        raise ValueError(f"images must be (H, W, 3), got {tuple(pred.shape)}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype or torch.get_default_dtype())


def ssim_map(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-pixel, per-channel SSIM with a Gaussian window and zero padding."""
    _check_shapes(pred, gt)
    img1 = pred.permute(2, 0, 1).unsqueeze(0)
    img2 = gt.permute(2, 0, 1).unsqueeze(0)
    window = gaussian_window(dtype=pred.dtype).expand(3, 1, SSIM_WINDOW, SSIM_WINDOW)
    pad: int = SSIM_WINDOW // 2

    def blur(x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, window, padding=pad, groups=3)

    mu1 = blur(img1)
    mu2 = blur(img2)
    mu1_sq = mu1 * mu1
    mu2_sq = mu2 * mu2
    mu1_mu2 = mu1 * mu2
    sigma1_sq = blur(img1 * img1) - mu1_sq
    sigma2_sq = blur(img2 * img2) - mu2_sq
    sigma12 = blur(img1 * img2) - mu1_mu2
    numerator = (2 * mu1_mu2 + SSIM_C1) * (2 * sigma12 + SSIM_C2)
    denominator = (mu1_sq + mu2_sq + SSIM_C1) * (sigma1_sq + sigma2_sq + SSIM_C2)
    return (numerator / denominator)[0].permute(1, 2, 0)


def ssim(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return ssim_map(pred, gt).mean()


def dssim(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return (1.0 - ssim(pred, gt)) / 2.0


def l1(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_shapes(pred, gt)
    return (pred - gt).abs().mean()


def psnr(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """10 log10(1 / MSE), reported as 100 dB for MSE below 1e-10."""
    _check_shapes(pred, gt)
    mse: float = float(((pred.detach().double() - gt.detach().double()) ** 2).mean())
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class ImageLoss:
    l1: torch.Tensor
    dssim: torch.Tensor
    perceptual: torch.Tensor
    total: torch.Tensor


def image_loss(pred: torch.Tensor, gt: torch.Tensor, weight_l1: float = 0.8, weight_dssim: float = 0.2) -> ImageLoss:
    """Differentiable weighted L1 + D-SSIM (+ registered perceptual terms)."""
    l1_term = l1(pred, gt)
    dssim_term = dssim(pred, gt)
    perceptual = torch.zeros((), dtype=pred.dtype)
    for fn, weight in _PERCEPTUAL_TERMS.values():
        perceptual = perceptual + weight * fn(pred, gt)
    total = weight_l1 * l1_term + weight_dssim * dssim_term + perceptual
    return ImageLoss(l1=l1_term, dssim=dssim_term, perceptual=perceptual, total=total)


def loss(
    image_pred: torch.Tensor,
    image_gt: torch.Tensor,
    weight_l1: float = 0.8,
    weight_dssim: float = 0.2,
    variance: float = 0.0,
    displacement: float = 0.0,
    with_metrics: bool = False,
) -> LossReport:
    """Scalar loss report; `variance` and `displacement` are already weighted terms.

    Raises:
        ValueError: If the images differ in shape.
    """
    with torch.no_grad():
        terms = image_loss(image_pred, image_gt, weight_l1, weight_dssim)
    total: float = float(terms.total) + variance + displacement
    return LossReport(
        l1=float(terms.l1),
        dssim=float(terms.dssim),
        variance=variance,
        displacement=displacement,
        total=total,
        psnr=psnr(image_pred, image_gt) if with_metrics else None,
        ssim=float(ssim(image_pred.detach(), image_gt)) if with_metrics else None,
    )
