"""Pinhole cameras and ray generation.

Poses follow the common synthetic-scene convention: a 4x4 camera-to-world
matrix whose rotation columns are (right, up, backward), so the camera looks
down its local -z axis. Pixel (0, 0) is the top-left corner.
"""

from dataclasses import dataclass

import numpy as np
import torch

# Elevation band (radians above the horizontal) shared by every hemisphere
# ring in the package, so extra poses drawn later match the dataset's.
RING_ELEVATION = (0.25, 0.9)


@dataclass
class CameraPose:
    """One camera: intrinsics (square pixels, principal point at center) plus pose."""

    camera_id: str
    width: int
    height: int
    focal: float
    c2w: torch.Tensor  # (4, 4) float32 camera-to-world

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        self.c2w = torch.as_tensor(self.c2w, dtype=torch.float32)
        if self.c2w.shape != (4, 4):
            raise ValueError(f"c2w must be 4x4, got {tuple(self.c2w.shape)}")


def focal_from_fov(width: int, camera_angle_x: float) -> float:
    """Focal length in pixels from the horizontal field of view in radians."""
    return 0.5 * width / np.tan(0.5 * camera_angle_x)


def fov_from_focal(width: int, focal: float) -> float:
    return 2.0 * float(np.arctan(0.5 * width / focal))


def camera_rays(camera: CameraPose) -> tuple[torch.Tensor, torch.Tensor]:
    """World-space rays through every pixel center.

    Returns (origins, directions), each (H, W, 3). Directions are unit length.
    The ray for pixel (row i, col j) passes through (j + 0.5, i + 0.5) in
    pixel coordinates.
    """
    H, W, f = camera.height, camera.width, camera.focal
    j, i = torch.meshgrid(
        torch.arange(W, dtype=torch.float32) + 0.5,
        torch.arange(H, dtype=torch.float32) + 0.5,
        indexing="xy",
    )
    # Camera space: x right, y up, looking down -z.
    dirs = torch.stack(
        [(j - 0.5 * W) / f, -(i - 0.5 * H) / f, -torch.ones_like(i)], dim=-1
    )
    rot = camera.c2w[:3, :3]
    world_dirs = dirs @ rot.T
    world_dirs = world_dirs / world_dirs.norm(dim=-1, keepdim=True)
    origin = camera.c2w[:3, 3]
    origins = origin.expand(H, W, 3).contiguous()
    return origins, world_dirs


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray) -> torch.Tensor:
    """Camera-to-world matrix for a camera at `eye` looking at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    backward = eye - target
    norm = np.linalg.norm(backward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    backward = backward / norm
    right = np.cross(up, backward)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-12:
        raise ValueError("up vector is parallel to the view direction")
    right = right / rnorm
    true_up = np.cross(backward, right)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = backward
    c2w[:3, 3] = eye
    return torch.as_tensor(c2w, dtype=torch.float32)


def ring_poses(
    n_views: int,
    radius: float,
    elevation_range: tuple[float, float],
    width: int,
    height: int,
    camera_angle_x: float,
    rng: np.random.Generator,
) -> list[CameraPose]:
    """Cameras on a hemisphere ring, all aimed at the origin.

    Azimuths are evenly spaced over the full circle; the elevation of each
    view is drawn uniformly from `elevation_range` (radians above the
    horizontal plane).
    """
    focal = focal_from_fov(width, camera_angle_x)
    poses = []
    for k in range(n_views):
        azim = 2.0 * np.pi * k / n_views
        elev = rng.uniform(*elevation_range)
        eye = radius * np.array(
            [np.cos(azim) * np.cos(elev), np.sin(azim) * np.cos(elev), np.sin(elev)]
        )
        c2w = look_at(eye, np.zeros(3), np.array([0.0, 0.0, 1.0]))
        poses.append(
            CameraPose(
                camera_id=f"view_{k:03d}",
                width=width,
                height=height,
                focal=focal,
                c2w=c2w,
            )
        )
    return poses


def matching_ring_poses(like: CameraPose, n_views: int, rng: np.random.Generator) -> list[CameraPose]:
    """Fresh poses on the same hemisphere ring an existing camera sits on.

    Radius, resolution and field of view are read off `like`, so renders from
    the new poses are directly comparable with the original views.
    """
    radius = float(np.linalg.norm(like.c2w[:3, 3].numpy()))
    return ring_poses(
        n_views,
        radius=radius,
        elevation_range=RING_ELEVATION,
        width=like.width,
        height=like.height,
        camera_angle_x=fov_from_focal(like.width, like.focal),
        rng=rng,
    )
