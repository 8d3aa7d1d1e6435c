"""Radiance-field backends and volume rendering.

Two interchangeable scene representations live here: a coordinate MLP and a
dense trilinear voxel grid. Both expose the same two-call contract
(density from position, color from feature + view direction), so everything
downstream (message attachment, rendering, recolorization) is written once
against that contract.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cameras import CameraPose, camera_rays


class ConfigurationError(ValueError):
    """Raised when a config asks for something the implementation cannot honor."""


# ---------------------------------------------------------------------------
# Positional encoding


def encode_position(x: torch.Tensor, num_freqs: int, include_input: bool = True) -> torch.Tensor:
    """Sinusoidal encoding of coordinates.

    For each input channel and each frequency k in 0..num_freqs-1 the output
    contains sin(2^k * pi * x) and cos(2^k * pi * x); frequencies are blocked
    lowest first, sin before cos within a block, optionally preceded by the
    raw input. Input may have any leading batch shape with a trailing
    coordinate dimension.
    """
    if num_freqs < 0:
        raise ValueError("num_freqs must be non-negative")
    parts = [x] if include_input else []
    for k in range(num_freqs):
        scaled = (2.0**k) * np.pi * x
        parts.append(torch.sin(scaled))
        parts.append(torch.cos(scaled))
    if not parts:
        return x.new_zeros(x.shape[:-1] + (0,))
    return torch.cat(parts, dim=-1)


def encoding_dim(in_dim: int, num_freqs: int, include_input: bool = True) -> int:
    return in_dim * (2 * num_freqs + (1 if include_input else 0))


# ---------------------------------------------------------------------------
# Ray sampling

@dataclass
class SampleBatch:
    """Sample points along one ray, front to back."""

    positions: torch.Tensor  # (S, 3)
    deltas: torch.Tensor  # (S,)
    depths: torch.Tensor  # (S,)
    ray_index: torch.Tensor  # (S,) int64, all zeros for a single ray


def bin_midpoints(t_near: float, t_far: float, n_samples: int) -> torch.Tensor:
    """Midpoints of n equal bins over [t_near, t_far]."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not t_far > t_near:
        raise ValueError("t_far must exceed t_near")
    edges = torch.linspace(t_near, t_far, n_samples + 1, dtype=torch.float32)
    return 0.5 * (edges[:-1] + edges[1:])


def depth_deltas(depths: torch.Tensor, t_far: float) -> torch.Tensor:
    """Spacing between consecutive sample depths; the last one reaches t_far."""
    last = torch.as_tensor([t_far], dtype=depths.dtype) - depths[..., -1:]
    return torch.cat([depths[..., 1:] - depths[..., :-1], last], dim=-1)


def sample_ray(
    origin: torch.Tensor,
    direction: torch.Tensor,
    t_near: float,
    t_far: float,
    n_samples: int,
    rng: np.random.Generator | None = None,
) -> SampleBatch:
    """Place sample points along a single ray.

    Without an rng, each sample sits at its bin midpoint (deterministic, used
    for evaluation). With an rng, samples are jittered uniformly within their
    bins (stratified, used when fitting the field).
    """
    mids = bin_midpoints(t_near, t_far, n_samples)
    if rng is not None:
        h = (t_far - t_near) / n_samples
        jitter = torch.from_numpy(
            rng.uniform(-0.5, 0.5, size=n_samples).astype(np.float32)
        )
        depths = mids + h * jitter
    else:
        depths = mids
    positions = origin[None, :] + depths[:, None] * direction[None, :]
    deltas = depth_deltas(depths, t_far)
    return SampleBatch(
        positions=positions,
        deltas=deltas,
        depths=depths,
        ray_index=torch.zeros(n_samples, dtype=torch.int64),
    )


# ---------------------------------------------------------------------------
# Compositing


def composite(
    sigma: torch.Tensor, deltas: torch.Tensor, colors: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Alpha-composite samples into pixel color and opacity.

    Standard emission-absorption quadrature: alpha_i = 1 - exp(-sigma_i d_i),
    transmittance T_i = exp(-sum_{j<i} sigma_j d_j), color = sum T_i alpha_i c_i.
    Accepts a single ray (sigma (S,), colors (S, 3)) or a batch
    (sigma (..., S), colors (..., S, 3)); deltas broadcasts against sigma.
    Returns (rgb, opacity) where opacity = 1 - T_{S}. Works in whatever float
    dtype it is handed.
    """
    if colors.shape[:-1] != sigma.shape:
        raise ValueError(
            f"colors shape {tuple(colors.shape)} does not match sigma {tuple(sigma.shape)}"
        )
    tau = sigma * deltas
    accum = torch.cumsum(tau, dim=-1)
    # Exclusive prefix sum: transmittance *into* sample i.
    trans = torch.exp(-torch.cat([torch.zeros_like(accum[..., :1]), accum[..., :-1]], dim=-1))
    alpha = 1.0 - torch.exp(-tau)
    weights = trans * alpha
    rgb = (weights[..., None] * colors).sum(dim=-2)
    opacity = weights.sum(dim=-1)
    return rgb, opacity


# ---------------------------------------------------------------------------
# Backends


@dataclass
class FieldConfig:
    kind: str = "mlp"  # "mlp" or "voxel"
    # MLP backend
    pos_freqs: int = 6
    dir_freqs: int = 4
    hidden_dim: int = 64
    n_hidden: int = 2
    feature_dim: int = 64
    color_hidden: int = 32
    # Voxel backend
    grid_resolution: int = 64
    # Shared
    bound: float = 1.5  # scene content lives in [-bound, bound]^3


class MLPBackend(nn.Module):
    """Coordinate MLP: encoded position -> density + feature, feature + encoded direction -> color."""

    kind = "mlp"

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.cfg = cfg
        pos_dim = encoding_dim(3, cfg.pos_freqs)
        dir_dim = encoding_dim(3, cfg.dir_freqs)
        layers = [nn.Linear(pos_dim, cfg.hidden_dim), nn.ReLU()]
        for _ in range(cfg.n_hidden - 1):
            layers += [nn.Linear(cfg.hidden_dim, cfg.hidden_dim), nn.ReLU()]
        self.trunk = nn.Sequential(*layers)
        self.sigma_head = nn.Linear(cfg.hidden_dim, 1)
        self.feature_head = nn.Linear(cfg.hidden_dim, cfg.feature_dim)
        self.color_net = nn.Sequential(
            nn.Linear(cfg.feature_dim + dir_dim, cfg.color_hidden),
            nn.ReLU(),
            nn.Linear(cfg.color_hidden, 3),
        )

    def evaluate_density(self, positions: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """positions (N, 3) -> (sigma (N,), feature (N, F)). Density is softplus-activated."""
        enc = encode_position(positions, self.cfg.pos_freqs)
        h = self.trunk(enc)
        sigma = F.softplus(self.sigma_head(h)).squeeze(-1)
        return sigma, self.feature_head(h)

    def evaluate_color(self, feature: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
        """feature (N, F), unit directions (N, 3) -> rgb (N, 3) in [0, 1]."""
        enc = encode_position(directions, self.cfg.dir_freqs)
        return torch.sigmoid(self.color_net(torch.cat([feature, enc], dim=-1)))


class VoxelBackend(nn.Module):
    """Dense grid: trilinearly interpolated raw density and view-independent color."""

    kind = "voxel"

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.cfg = cfg
        R = cfg.grid_resolution
        if R < 2:
            raise ConfigurationError("grid_resolution must be >= 2")
        # Density starts as a faint uniform fog rather than at zero: the
        # rectifier has no gradient at exactly zero, so an all-zero grid
        # could never start growing density.
        self.raw_density = nn.Parameter(torch.full((R, R, R), 0.25))
        self.raw_color = nn.Parameter(torch.zeros(R, R, R, 3))

    def _interp(self, values: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Trilinear interpolation of grid `values` (R,R,R,...) at world positions."""
        R = self.cfg.grid_resolution
        # Map [-bound, bound] onto grid node coordinates [0, R-1]; clamp outside.
        g = (positions / self.cfg.bound * 0.5 + 0.5) * (R - 1)
        g = g.clamp(0.0, R - 1)
        lo = g.floor().long().clamp(max=R - 2)
        frac = g - lo.float()
        flat = values.reshape(R * R * R, -1)

        def gather(ix, iy, iz):
            return flat[(ix * R + iy) * R + iz]

        x0, y0, z0 = lo[:, 0], lo[:, 1], lo[:, 2]
        fx, fy, fz = frac[:, 0:1], frac[:, 1:2], frac[:, 2:3]
        c000 = gather(x0, y0, z0)
        c001 = gather(x0, y0, z0 + 1)
        c010 = gather(x0, y0 + 1, z0)
        c011 = gather(x0, y0 + 1, z0 + 1)
        c100 = gather(x0 + 1, y0, z0)
        c101 = gather(x0 + 1, y0, z0 + 1)
        c110 = gather(x0 + 1, y0 + 1, z0)
        c111 = gather(x0 + 1, y0 + 1, z0 + 1)
        c00 = c000 * (1 - fz) + c001 * fz
        c01 = c010 * (1 - fz) + c011 * fz
        c10 = c100 * (1 - fz) + c101 * fz
        c11 = c110 * (1 - fz) + c111 * fz
        c0 = c00 * (1 - fy) + c01 * fy
        c1 = c10 * (1 - fy) + c11 * fy
        out = c0 * (1 - fx) + c1 * fx
        return out.reshape(positions.shape[:-1] + values.shape[3:])

    def evaluate_density(self, positions: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Interpolate raw density then rectify, so an all-zero grid is exactly empty space.

        Positions outside the bounding box get density 0.
        """
        raw = self._interp(self.raw_density.unsqueeze(-1), positions).squeeze(-1)
        inside = (positions.abs() <= self.cfg.bound).all(dim=-1)
        sigma = F.relu(raw) * inside.float()
        # The "feature" for this backend is just the position; color lookup reuses it.
        return sigma, positions

    def evaluate_color(self, feature: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
        raw = self._interp(self.raw_color, feature)
        return torch.sigmoid(raw)


def make_backend(cfg: FieldConfig) -> nn.Module:
    if cfg.kind == "mlp":
        return MLPBackend(cfg)
    if cfg.kind == "voxel":
        return VoxelBackend(cfg)
    raise ConfigurationError(f"unknown backend kind {cfg.kind!r}")


# ---------------------------------------------------------------------------
# Full-frame rendering


@dataclass
class RenderConfig:
    n_samples: int = 64
    t_near: float = 2.5
    t_far: float = 5.5
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    chunk: int = 65536  # sample points per backend call


@dataclass
class RenderedImage:
    pixels: torch.Tensor  # (H, W, 3) float32 in [0, 1]
    camera_id: str = ""


def render_rays(
    backend: nn.Module,
    origins: torch.Tensor,
    directions: torch.Tensor,
    cfg: RenderConfig,
    sticker=None,
    message: torch.Tensor | None = None,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Render a flat batch of rays (N, 3) -> colors (N, 3).

    With a sticker and message, the message offset is added to the density
    before compositing; colors always come from the unmodified field.
    """
    n_rays = origins.shape[0]
    S = cfg.n_samples
    mids = bin_midpoints(cfg.t_near, cfg.t_far, S)
    if rng is not None:
        h = (cfg.t_far - cfg.t_near) / S
        jitter = torch.from_numpy(rng.uniform(-0.5, 0.5, size=(n_rays, S)).astype(np.float32))
        depths = mids[None, :] + h * jitter
    else:
        depths = mids[None, :].expand(n_rays, S)
    deltas = depth_deltas(depths, cfg.t_far)
    positions = origins[:, None, :] + depths[..., None] * directions[:, None, :]
    flat_pos = positions.reshape(-1, 3)
    flat_dir = directions[:, None, :].expand(n_rays, S, 3).reshape(-1, 3)

    sigmas, colors = [], []
    for start in range(0, flat_pos.shape[0], cfg.chunk):
        pos = flat_pos[start : start + cfg.chunk]
        dirs = flat_dir[start : start + cfg.chunk]
        sigma, feat = backend.evaluate_density(pos)
        if sticker is not None:
            if message is None:
                raise ValueError("sticker given without a message")
            sigma = sticker.attach(pos, sigma, message)
        sigmas.append(sigma)
        colors.append(backend.evaluate_color(feat, dirs))
    sigma = torch.cat(sigmas).reshape(n_rays, S)
    color = torch.cat(colors).reshape(n_rays, S, 3)
    rgb, opacity = composite(sigma, deltas, color)
    bg = torch.tensor(cfg.background, dtype=rgb.dtype)
    return rgb + (1.0 - opacity)[:, None] * bg


def render_image(
    backend: nn.Module,
    camera: CameraPose,
    cfg: RenderConfig,
    sticker=None,
    message: torch.Tensor | None = None,
) -> RenderedImage:
    """Render a full deterministic frame (midpoint sampling, clamped to [0, 1])."""
    origins, directions = camera_rays(camera)
    with torch.no_grad():
        rgb = render_rays(
            backend,
            origins.reshape(-1, 3),
            directions.reshape(-1, 3),
            cfg,
            sticker=sticker,
            message=message,
        )
    pixels = rgb.reshape(camera.height, camera.width, 3).clamp(0.0, 1.0)
    return RenderedImage(pixels=pixels, camera_id=camera.camera_id)
