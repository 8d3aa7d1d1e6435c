"""Recolorization: image-level hue jitter and model-level palette remapping.

Model-level recolor wraps a backend so the transform is applied after color
evaluation. The density branch passes through untouched, which is exactly why
a geometry-borne message survives these edits.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

# Reference edit colors (standard sRGB values for the usual CSS names).
REFERENCE_COLORS: dict[str, tuple[float, float, float]] = {
    "green": (0x00 / 255, 0x80 / 255, 0x00 / 255),
    "yellow": (0xFF / 255, 0xFF / 255, 0x00 / 255),
    "orange": (0xFF / 255, 0xA5 / 255, 0x00 / 255),
    "red": (0xFF / 255, 0x00 / 255, 0x00 / 255),
    "pink": (0xFF / 255, 0xC0 / 255, 0xCB / 255),
    "magenta": (0xFF / 255, 0x00 / 255, 0xFF / 255),
    "purple": (0x80 / 255, 0x00 / 255, 0x80 / 255),
    "blue": (0x00 / 255, 0x00 / 255, 0xFF / 255),
    "dodgerblue": (0x1E / 255, 0x90 / 255, 0xFF / 255),
    "cyan": (0x00 / 255, 0xFF / 255, 0xFF / 255),
}


# ---------------------------------------------------------------------------
# HSV conversion (hexagonal model, hue in [0, 1))


def rgb_to_hsv(rgb: torch.Tensor) -> torch.Tensor:
    """(..., 3) RGB in [0,1] -> (..., 3) HSV with hue in [0, 1)."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(dim=-1).values
    minc = rgb.min(dim=-1).values
    delta = maxc - minc
    safe_delta = torch.where(delta > 0, delta, torch.ones_like(delta))

    hr = ((g - b) / safe_delta) % 6.0
    hg = (b - r) / safe_delta + 2.0
    hb = (r - g) / safe_delta + 4.0
    h = torch.where(maxc == r, hr, torch.where(maxc == g, hg, hb))
    h = torch.where(delta > 0, h / 6.0, torch.zeros_like(h))

    s = torch.where(maxc > 0, delta / torch.where(maxc > 0, maxc, torch.ones_like(maxc)), torch.zeros_like(maxc))
    return torch.stack([h % 1.0, s, maxc], dim=-1)


def hsv_to_rgb(hsv: torch.Tensor) -> torch.Tensor:
    """(..., 3) HSV with hue in [0, 1) -> (..., 3) RGB in [0,1]."""
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    h6 = h * 6.0
    i = torch.floor(h6)
    f = h6 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.long() % 6
    r = torch.stack([v, q, p, p, t, v], dim=-1).gather(-1, i[..., None]).squeeze(-1)
    g = torch.stack([t, v, v, q, p, p], dim=-1).gather(-1, i[..., None]).squeeze(-1)
    b = torch.stack([p, p, t, v, v, q], dim=-1).gather(-1, i[..., None]).squeeze(-1)
    return torch.stack([r, g, b], dim=-1)


def shift_hue(rgb: torch.Tensor, delta_h: float) -> torch.Tensor:
    hsv = rgb_to_hsv(rgb)
    hsv = torch.stack([(hsv[..., 0] + delta_h) % 1.0, hsv[..., 1], hsv[..., 2]], dim=-1)
    return hsv_to_rgb(hsv).clamp(0.0, 1.0)


def hue_shift_image(image: torch.Tensor, delta_h: float) -> torch.Tensor:
    """Shift the hue channel of an (H, W, 3) image by delta_h (mod 1)."""
    return shift_hue(image, delta_h)


# ---------------------------------------------------------------------------
# Palettes


@dataclass
class Palette:
    """K base colors plus the softness of assignment used when remapping."""

    base_colors: torch.Tensor  # (K, 3) in [0, 1]
    assignment_temperature: float = 0.05

    def __post_init__(self):
        self.base_colors = torch.as_tensor(self.base_colors, dtype=torch.float32)
        if self.base_colors.dim() != 2 or self.base_colors.shape[1] != 3:
            raise ValueError("base_colors must be (K, 3)")
        if self.base_colors.shape[0] < 2:
            raise ValueError("a palette needs K >= 2 colors")
        if self.assignment_temperature <= 0:
            raise ValueError("assignment_temperature must be positive")
        if self.base_colors.min() < 0 or self.base_colors.max() > 1:
            raise ValueError("palette colors must lie in [0,1]")


def _luminance(colors: torch.Tensor) -> torch.Tensor:
    w = torch.tensor([0.2126, 0.7152, 0.0722], dtype=colors.dtype)
    return colors @ w


def build_palette(
    images: list[torch.Tensor], K: int, rng: np.random.Generator, temperature: float = 0.05
) -> Palette:
    """K-means over the pooled pixels of `images`, centers sorted by luminance.

    If the images hold fewer distinct colors than K, K is reduced with a
    warning rather than producing duplicate centers.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    if not images:
        raise ValueError("need at least one image")
    pixels = torch.cat([im.reshape(-1, 3) for im in images]).numpy().astype(np.float64)
    distinct = np.unique(np.round(pixels, 6), axis=0)
    k_eff = K
    if distinct.shape[0] < K:
        warnings.warn(f"only {distinct.shape[0]} distinct colors; reducing palette K from {K}")
        k_eff = max(2, distinct.shape[0])
        if distinct.shape[0] == 1:
            # Degenerate single-color input: both centers equal that color.
            centers = np.repeat(distinct, 2, axis=0)
            return Palette(base_colors=torch.from_numpy(centers.astype(np.float32)), assignment_temperature=temperature)

    # Seed centers from distinct colors, not raw pixels: two identical initial
    # centers would tie every assignment and starve one cluster.
    centers = distinct[rng.choice(distinct.shape[0], size=k_eff, replace=False)]
    for _ in range(50):
        d = ((pixels[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        labels = d.argmin(axis=1)
        new_centers = []
        for k in range(centers.shape[0]):
            members = pixels[labels == k]
            if members.shape[0] == 0:
                continue  # drop empty clusters
            new_centers.append(members.mean(axis=0))
        new_centers = np.stack(new_centers)
        if new_centers.shape == centers.shape and np.allclose(new_centers, centers, atol=1e-9):
            centers = new_centers
            break
        centers = new_centers
    centers_t = torch.from_numpy(centers.astype(np.float32)).clamp(0.0, 1.0)
    order = torch.argsort(_luminance(centers_t), stable=True)
    return Palette(base_colors=centers_t[order], assignment_temperature=temperature)


# ---------------------------------------------------------------------------
# Color transforms and model-level recolor


@dataclass
class ColorTransform:
    """What to do to evaluated colors: nothing, rotate hue, or remap one palette color."""

    kind: str  # identity | hue_rotation | palette_remap
    delta_h: float = 0.0
    palette: Palette | None = None
    source_index: int = -1
    target_color: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "hue_rotation", "palette_remap"):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "palette_remap":
            if self.palette is None or self.target_color is None:
                raise ValueError("palette_remap needs a palette and a target color")
            if not 0 <= self.source_index < self.palette.base_colors.shape[0]:
                raise ValueError("source_index out of palette range")

    def apply(self, colors: torch.Tensor) -> torch.Tensor:
        """(..., 3) colors in [0,1] -> transformed colors in [0,1]."""
        if self.kind == "identity":
            return colors
        if self.kind == "hue_rotation":
            return shift_hue(colors, self.delta_h)
        base = self.palette.base_colors.to(colors.dtype)
        targets = base.clone()
        targets[self.source_index] = torch.tensor(self.target_color, dtype=colors.dtype)
        # Soft assignment of each color to palette entries, then move by the
        # entry's displacement. Only the remapped entry displaces anything.
        d = (colors[..., None, :] - base).norm(dim=-1)  # (..., K)
        w = torch.softmax(-d / self.palette.assignment_temperature, dim=-1)
        shift = w[..., None] * (targets - base)  # (..., K, 3)
        return (colors + shift.sum(dim=-2)).clamp(0.0, 1.0)


class RecoloredBackend(nn.Module):
    """Wrap a backend so evaluated colors pass through a transform; density untouched."""

    def __init__(self, base: nn.Module, transform: ColorTransform):
        super().__init__()
        self.base = base
        self.transform = transform
        self.kind = base.kind

    def evaluate_density(self, positions: torch.Tensor):
        return self.base.evaluate_density(positions)

    def evaluate_color(self, feature: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
        return self.transform.apply(self.base.evaluate_color(feature, directions))


def recolor_model(backend: nn.Module, transform: ColorTransform) -> RecoloredBackend:
    return RecoloredBackend(backend, transform)
