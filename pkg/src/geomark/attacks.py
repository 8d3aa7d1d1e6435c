"""Threat battery: 2-D distortions, PGD message replacement, model purification.

All distortions take and return (H, W, 3) float images in [0, 1] and keep the
autograd graph alive where the operation is differentiable, so the same code
doubles as training-time augmentation.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .extractor import ExtractorNet, bit_accuracy, extract_message
from .field import RenderConfig, render_image
from .metrics import psnr
from .sticker import MessageBits


class TrainingError(RuntimeError):
    pass


@dataclass
class DistortionSpec:
    kind: str  # noise | rotation | cropout | blur
    nu: float = 0.0  # noise std dev
    alpha: float = 0.0  # max |rotation| in radians
    s: float = 0.0  # max cropout area fraction
    xi: float = 0.0  # blur std dev in pixels
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("noise", "rotation", "cropout", "blur"):
            raise ValueError(f"unknown distortion kind {self.kind!r}")
        if self.nu < 0 or self.xi < 0:
            raise ValueError("nu and xi must be non-negative")
        if not 0 <= self.s <= 1:
            raise ValueError("s must lie in [0, 1]")
        if abs(self.alpha) > math.pi:
            raise ValueError("alpha must lie in [-pi, pi]")


def gaussian_noise(image: torch.Tensor, nu: float, rng: np.random.Generator) -> torch.Tensor:
    """Add i.i.d. zero-mean Gaussian noise per channel, clamp to [0, 1]."""
    if nu < 0:
        raise ValueError("nu must be non-negative")
    if nu == 0.0:
        return image
    noise = torch.from_numpy(rng.normal(0.0, nu, size=tuple(image.shape)).astype(np.float32))
    return (image + noise).clamp(0.0, 1.0)


def rotate_image(image: torch.Tensor, angle: float) -> torch.Tensor:
    """Rotate about the image center, bilinear resampling, zeros outside.

    The sampling grid and interpolation run in float64: a float32 grid drifts
    by a few microseconds of arc per pixel, enough that exact angles like pi/2
    stop reproducing index rotations at larger resolutions.
    """
    if angle == 0.0:
        return image
    H, W = image.shape[0], image.shape[1]
    ca, sa = math.cos(angle), math.sin(angle)
    # Sampling grid: for each output pixel, where in the input to read.
    theta = torch.tensor([[ca, -sa * H / W, 0.0], [sa * W / H, ca, 0.0]], dtype=torch.float64)
    grid = F.affine_grid(theta[None], (1, 3, H, W), align_corners=False)
    x = image.double().permute(2, 0, 1)[None]
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out[0].permute(1, 2, 0).to(image.dtype)


def random_rotation(image: torch.Tensor, alpha_max: float, rng: np.random.Generator) -> torch.Tensor:
    """Rotate by an angle uniform in [-alpha_max, alpha_max]."""
    if alpha_max < 0 or alpha_max > math.pi:
        raise ValueError("alpha_max must lie in [0, pi]")
    if alpha_max == 0.0:
        return image
    return rotate_image(image, float(rng.uniform(-alpha_max, alpha_max)))


def random_cropout(image: torch.Tensor, s_max: float, rng: np.random.Generator) -> torch.Tensor:
    """Zero a random axis-aligned rectangle of area at most s_max * H * W.

    Side lengths are drawn uniformly in [0, sqrt(s_max) * dim], the position
    uniformly among placements that keep the rectangle inside the image.
    """
    if not 0 <= s_max <= 1:
        raise ValueError("s_max must lie in [0, 1]")
    if s_max == 0.0:
        return image
    H, W = image.shape[0], image.shape[1]
    hh = int(rng.uniform(0.0, math.sqrt(s_max) * H))
    ww = int(rng.uniform(0.0, math.sqrt(s_max) * W))
    if hh == 0 or ww == 0:
        return image
    y0 = int(rng.integers(0, H - hh + 1))
    x0 = int(rng.integers(0, W - ww + 1))
    mask = torch.ones(H, W, 1, dtype=image.dtype)
    mask[y0 : y0 + hh, x0 : x0 + ww] = 0.0
    return image * mask


def blur_kernel(xi: float) -> torch.Tensor:
    """1-D Gaussian taps with radius ceil(3 xi), normalized to sum 1.

    Computed in float64 so the normalization is exact to well below 1e-9;
    callers cast to the image dtype.
    """
    radius = int(math.ceil(3.0 * xi))
    if radius == 0:
        return torch.ones(1, dtype=torch.float64)
    taps = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-(taps**2) / (2.0 * xi * xi))
    return k / k.sum()


def gaussian_blur(image: torch.Tensor, xi: float) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding."""
    if xi < 0:
        raise ValueError("xi must be non-negative")
    if xi == 0.0:
        return image
    k = blur_kernel(xi).to(image.dtype)
    r = (k.shape[0] - 1) // 2
    x = image.permute(2, 0, 1)[None]  # (1, 3, H, W)
    x = F.pad(x, (r, r, 0, 0), mode="reflect")
    x = F.conv2d(x, k.reshape(1, 1, 1, -1).expand(3, 1, 1, -1), groups=3)
    x = F.pad(x, (0, 0, r, r), mode="reflect")
    x = F.conv2d(x, k.reshape(1, 1, -1, 1).expand(3, 1, -1, 1), groups=3)
    return x[0].permute(1, 2, 0)


def apply_distortion(image: torch.Tensor, spec: DistortionSpec, rng: np.random.Generator | None = None) -> torch.Tensor:
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    if spec.kind == "noise":
        return gaussian_noise(image, spec.nu, rng)
    if spec.kind == "rotation":
        return random_rotation(image, spec.alpha, rng)
    if spec.kind == "cropout":
        return random_cropout(image, spec.s, rng)
    return gaussian_blur(image, spec.xi)


# ---------------------------------------------------------------------------
# PGD message replacement


def pgd_attack(
    image: torch.Tensor,
    extractor: ExtractorNet,
    target_bits: MessageBits,
    true_bits: MessageBits,
    psnr_budget: float,
    steps: int = 50,
    step_size: float | None = None,
    trace: list | None = None,
) -> tuple[torch.Tensor, float, float]:
    """Steer the extractor toward `target_bits` under an L-inf budget.

    The budget is derived from the PSNR constraint: a uniform perturbation of
    magnitude eps has MSE eps^2, so eps = 10^(-psnr_budget / 20). Minimizes
    ||sigmoid(logits) - target||^2 by signed gradient steps, projecting the
    perturbation into [-eps, eps] and the image into [0, 1] every step.
    Returns (adversarial image, bit accuracy vs the true message, PSNR vs input).
    Pass a list as `trace` to log the objective per step.
    """
    if psnr_budget <= 0:
        raise ValueError("psnr_budget must be positive")
    if steps == 0:
        acc = bit_accuracy(extract_message(extractor, image), true_bits)
        return image, acc, float("inf")
    eps = 10.0 ** (-psnr_budget / 20.0)
    if step_size is None:
        step_size = 2.5 * eps / steps
    target = target_bits.targets()
    delta = torch.zeros_like(image, requires_grad=True)
    for it in range(steps):
        adv = (image + delta).clamp(0.0, 1.0)
        loss = ((torch.sigmoid(extractor(adv)) - target) ** 2).sum()
        if trace is not None:
            trace.append({"step": it, "objective": float(loss.detach())})
        (grad,) = torch.autograd.grad(loss, delta)
        with torch.no_grad():
            delta -= step_size * grad.sign()
            delta.clamp_(-eps, eps)
            assert float(delta.abs().max()) <= eps + 1e-7
            delta.clamp_(-image, 1.0 - image)  # keep image + delta in [0, 1]
    adv = (image + delta).detach().clamp(0.0, 1.0)
    acc = bit_accuracy(extract_message(extractor, adv), true_bits)
    return adv, acc, psnr(adv, image)


# ---------------------------------------------------------------------------
# Model purification


def purification(
    backend,
    sticker,
    message: MessageBits,
    extractor: ExtractorNet,
    train_images: list[torch.Tensor],
    train_cameras: list,
    test_images: list[torch.Tensor],
    test_cameras: list,
    render_cfg: RenderConfig,
    steps: int,
    lr: float,
    rng: np.random.Generator,
    patch_size: int = 32,
    eval_interval: int = 25,
) -> list[dict]:
    """Attacker fine-tune: unfreeze the field, keep the sticker fixed, fit clean images.

    Each step renders a random watermarked patch from a training pose and
    minimizes MSE against the attacker's clean ground truth. Sticker offsets m
    depend only on (position, message), both fixed here, so they are
    precomputed per view; the gate score is recomputed from the live density.
    Returns a curve of {step, psnr, bit_accuracy} over test views, starting at
    step 0 with the unpurified model's numbers.
    """
    from .cameras import camera_rays
    from .field import bin_midpoints, composite, depth_deltas

    for p in backend.parameters():
        p.requires_grad_(True)
    for p in sticker.parameters():
        p.requires_grad_(False)

    S = render_cfg.n_samples
    depths = bin_midpoints(render_cfg.t_near, render_cfg.t_far, S)
    deltas = depth_deltas(depths, render_cfg.t_far)
    bg = torch.tensor(render_cfg.background)

    # Per-view ray geometry and frozen sticker offsets.
    views = []
    with torch.no_grad():
        for cam in train_cameras:
            origins, dirs = camera_rays(cam)
            pos = origins[..., None, :] + depths[:, None] * dirs[..., None, :]
            m = sticker.offsets(pos.reshape(-1, 3), message).reshape(pos.shape[:-1])
            views.append({"dirs": dirs, "pos": pos, "m": m})

    def evaluate() -> tuple[float, float]:
        ps, accs = [], []
        for cam, clean in zip(test_cameras, test_images):
            img = render_image(backend, cam, render_cfg, sticker=sticker, message=message).pixels
            ps.append(psnr(img, clean))
            accs.append(bit_accuracy(extract_message(extractor, img), message))
        return float(np.mean(ps)), float(np.mean(accs))

    p0, a0 = evaluate()
    curve = [{"step": 0, "psnr": p0, "bit_accuracy": a0}]
    if steps == 0:
        return curve

    opt = torch.optim.Adam(backend.parameters(), lr=lr)
    H, W = train_images[0].shape[0], train_images[0].shape[1]
    P = min(patch_size, H, W)
    for step in range(1, steps + 1):
        vi = int(rng.integers(0, len(views)))
        y0 = int(rng.integers(0, H - P + 1))
        x0 = int(rng.integers(0, W - P + 1))
        v = views[vi]
        pos = v["pos"][y0 : y0 + P, x0 : x0 + P].reshape(-1, 3)
        dirs = v["dirs"][y0 : y0 + P, x0 : x0 + P]
        m = v["m"][y0 : y0 + P, x0 : x0 + P].reshape(-1)
        sigma, feat = backend.evaluate_density(pos)
        psi = sticker.importance(sigma)
        sigma_t = F.relu(sigma + psi * m).reshape(P * P, S)
        dirs_flat = dirs[:, :, None, :].expand(P, P, S, 3).reshape(-1, 3)
        color = backend.evaluate_color(feat, dirs_flat).reshape(P * P, S, 3)
        rgb, opacity = composite(sigma_t, deltas, color)
        rgb = rgb + (1.0 - opacity)[:, None] * bg
        gt = train_images[vi][y0 : y0 + P, x0 : x0 + P].reshape(-1, 3)
        loss = ((rgb - gt) ** 2).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"purification loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % eval_interval == 0 or step == steps:
            p, a = evaluate()
            curve.append({"step": step, "psnr": p, "bit_accuracy": a})
    for p in backend.parameters():
        p.requires_grad_(False)
    return curve
