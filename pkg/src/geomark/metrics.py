"""Image quality metrics on float images in [0, 1]."""

import numpy as np
import torch
import torch.nn.functional as F


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB against a peak of 1.0. Equal inputs give inf."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return g[:, None] @ g[None, :]


def ssim(a: torch.Tensor, b: torch.Tensor, window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows, averaged over channels.

    Inputs are (H, W, 3) with H, W >= window_size. Uses the usual stabilizers
    C1 = (0.01 L)^2, C2 = (0.03 L)^2 with dynamic range L = 1.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 3 or a.shape[2] != 3:
        raise ValueError("expected (H, W, 3) images")
    if min(a.shape[0], a.shape[1]) < window_size:
        raise ValueError(f"images must be at least {window_size} pixels on a side")
    x = a.detach().double().permute(2, 0, 1)[:, None]  # (3, 1, H, W)
    y = b.detach().double().permute(2, 0, 1)[:, None]
    w = _gaussian_window(window_size, sigma)[None, None]

    mu_x = F.conv2d(x, w)
    mu_y = F.conv2d(y, w)
    xx = F.conv2d(x * x, w) - mu_x * mu_x
    yy = F.conv2d(y * y, w) - mu_y * mu_y
    xy = F.conv2d(x * y, w) - mu_x * mu_y

    c1 = 0.01**2
    c2 = 0.03**2
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float((num / den).mean())
