"""Datasets: procedural generation plus the usual transforms-JSON disk layout.

A dataset is ground-truth images with aligned camera poses and a train/test
split. On disk it is a transforms.json (camera_angle_x plus one 4x4 matrix
per frame) next to 8-bit PNGs, the layout most synthetic-scene tools emit.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .cameras import CameraPose, focal_from_fov, fov_from_focal, ring_poses
from .scenes import Scene, make_scene, trace_view


class DatasetError(RuntimeError):
    pass


@dataclass
class Dataset:
    images: list  # torch.Tensor (H, W, 3) in [0, 1]
    poses: list  # CameraPose
    split: list  # "train" | "test" per view
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.poses) or len(self.images) != len(self.split):
            raise DatasetError("images, poses and split must align 1:1")
        if "test" not in self.split:
            raise DatasetError("dataset needs at least one test view")

    def _pick(self, which: str):
        return [i for i, s in enumerate(self.split) if s == which]

    def train_indices(self):
        return self._pick("train")

    def test_indices(self):
        return self._pick("test")


def assign_split(n: int) -> list:
    """Every eighth view held out, mirroring the usual 1/8 test protocol."""
    return ["test" if i % 8 == 0 else "train" for i in range(n)]


def generate_procedural_scene(
    scene_seed: int,
    n_views: int = 28,
    resolution: int = 64,
    n_objects: int | None = None,
    camera_angle_x: float = 0.8,
    radius: float = 4.0,
    ssaa: int = 4,
) -> Dataset:
    """Ray-traced views of a procedural scene on a hemisphere ring of cameras."""
    if n_views < 4:
        raise ValueError("need at least 4 views")
    scene = make_scene(scene_seed, n_objects)
    pose_rng = np.random.default_rng(np.random.SeedSequence([scene_seed, 77]))
    poses = ring_poses(
        n_views,
        radius=radius,
        elevation_range=(0.25, 0.9),
        width=resolution,
        height=resolution,
        camera_angle_x=camera_angle_x,
        rng=pose_rng,
    )
    images = [torch.from_numpy(trace_view(scene, cam, ssaa=ssaa)) for cam in poses]
    meta = {
        "scene_seed": scene_seed,
        "resolution": resolution,
        "camera_angle_x": camera_angle_x,
        "focal": poses[0].focal,
        "objects": scene.describe(),
    }
    return Dataset(images=images, poses=poses, split=assign_split(n_views), meta=meta)


def generated_scene(scene_seed: int, n_objects: int | None = None) -> Scene:
    return make_scene(scene_seed, n_objects)


# ---------------------------------------------------------------------------
# PNG helpers


def save_png(image: torch.Tensor, path) -> None:
    """8-bit RGB with round-to-nearest quantization."""
    arr = np.clip(np.round(image.detach().numpy() * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path, background=(0.0, 0.0, 0.0)) -> torch.Tensor:
    """Load as float [0,1]; RGBA is composited over the given background."""
    with Image.open(path) as im:
        arr = np.asarray(im).astype(np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.shape[2] == 4:
        alpha = arr[:, :, 3:4]
        bg = np.asarray(background, dtype=np.float32)
        arr = arr[:, :, :3] * alpha + bg * (1.0 - alpha)
    return torch.from_numpy(arr[:, :, :3].copy())


# ---------------------------------------------------------------------------
# transforms.json round trip


def save_dataset(dataset: Dataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (img, pose, split) in enumerate(zip(dataset.images, dataset.poses, dataset.split)):
        rel = f"images/{pose.camera_id}"
        save_png(img, root / f"{rel}.png")
        frames.append(
            {
                "file_path": rel,
                "transform_matrix": [[float(v) for v in row] for row in pose.c2w.tolist()],
                "split": split,
            }
        )
    doc = {
        "camera_angle_x": fov_from_focal(dataset.poses[0].width, dataset.poses[0].focal),
        "frames": frames,
        "meta": dataset.meta,
    }
    (root / "transforms.json").write_text(json.dumps(doc, indent=1))


def load_dataset(root, background=(0.0, 0.0, 0.0)) -> Dataset:
    root = Path(root)
    tpath = root / "transforms.json"
    if not tpath.exists():
        raise DatasetError(f"no transforms.json under {root}")
    try:
        doc = json.loads(tpath.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"transforms.json is not valid JSON: {e}") from e
    if "camera_angle_x" not in doc or "frames" not in doc:
        raise DatasetError("transforms.json must define camera_angle_x and frames")
    frames = doc["frames"]
    if not frames:
        raise DatasetError("transforms.json lists no frames")

    images, poses, split = [], [], []
    for i, fr in enumerate(frames):
        img_path = root / (fr["file_path"] + ".png")
        if not img_path.exists():
            img_path = root / fr["file_path"]
        if not img_path.exists():
            raise DatasetError(f"missing image for frame {i}: {fr['file_path']}")
        img = load_png(img_path, background)
        H, W = img.shape[0], img.shape[1]
        poses.append(
            CameraPose(
                camera_id=Path(fr["file_path"]).stem,
                width=W,
                height=H,
                focal=focal_from_fov(W, float(doc["camera_angle_x"])),
                c2w=torch.tensor(fr["transform_matrix"], dtype=torch.float32),
            )
        )
        images.append(img)
        split.append(fr.get("split", ""))
    if any(s == "" for s in split) or "test" not in split:
        split = assign_split(len(frames))
    return Dataset(images=images, poses=poses, split=split, meta=doc.get("meta", {}))
