"""Procedural test scenes: a few lambertian spheres and boxes, ray traced analytically.

These stand in for photographed data. Everything is deterministic per seed,
and the tracer is simple enough to supersample heavily for a reference image.
"""

from dataclasses import dataclass

import numpy as np

from .cameras import CameraPose, camera_rays

ANCHOR_GREEN = (0.0, 128 / 255, 0.0)

LIGHT_DIR = np.array([0.35, 0.25, 1.0]) / np.linalg.norm([0.35, 0.25, 1.0])
AMBIENT = 0.40
DIFFUSE = 0.60


@dataclass
class SceneObject:
    kind: str  # "sphere" or "box"
    center: np.ndarray
    size: np.ndarray  # sphere: (radius,); box: half extents (3,)
    color: np.ndarray  # base albedo (3,)


@dataclass
class Scene:
    objects: list
    seed: int = 0

    def describe(self) -> list:
        return [
            {
                "kind": o.kind,
                "center": [round(float(v), 6) for v in o.center],
                "size": [round(float(v), 6) for v in o.size],
                "color": [round(float(v), 6) for v in o.color],
            }
            for o in self.objects
        ]


def _distinct_colors(n: int, rng: np.random.Generator) -> np.ndarray:
    """Anchor green first, then evenly spread hues so colors stay far apart."""
    colors = [np.array(ANCHOR_GREEN)]
    offset = rng.uniform(0.0, 1.0)
    for i in range(n - 1):
        h = (offset + i / max(n - 1, 1)) % 1.0
        # Small manual HSV->RGB; saturation/value fixed high for clear shading.
        s, v = 0.85, 0.9
        k = h * 6.0
        sector = int(k) % 6
        f = k - int(k)
        p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
        rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][sector]
        colors.append(np.array(rgb))
    return np.stack(colors)


def make_scene(seed: int, n_objects: int | None = None) -> Scene:
    """2 to 5 non-overlapping objects inside the unit-and-a-half box; first one green."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 51]))
    if n_objects is None:
        n_objects = int(rng.integers(2, 6))
    if not 1 <= n_objects <= 8:
        raise ValueError("n_objects must be in [1, 8]")
    colors = _distinct_colors(n_objects, rng)
    objects: list[SceneObject] = []
    for i in range(n_objects):
        for _ in range(200):
            kind = "sphere" if (i == 0 or rng.uniform() < 0.5) else "box"
            if kind == "sphere":
                r = rng.uniform(0.3, 0.55)
                size = np.array([r])
                reach = r
            else:
                size = rng.uniform(0.22, 0.45, size=3)
                reach = float(np.linalg.norm(size))
            center = rng.uniform(-0.9, 0.9, size=3)
            if np.linalg.norm(center) + reach > 1.25:
                continue
            ok = True
            for o in objects:
                o_reach = o.size[0] if o.kind == "sphere" else float(np.linalg.norm(o.size))
                if np.linalg.norm(center - o.center) < reach + o_reach + 0.05:
                    ok = False
                    break
            if ok:
                objects.append(SceneObject(kind=kind, center=center, size=size, color=colors[i]))
                break
        else:
            break  # box is crowded; settle for fewer objects
    return Scene(objects=objects, seed=seed)


def _intersect_spheres(origins, dirs, center, radius):
    oc = origins - center
    b = (oc * dirs).sum(-1)
    c = (oc * oc).sum(-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = -b - sq
    t = np.where(hit & (t > 1e-4), t, np.inf)
    return t


def _intersect_boxes(origins, dirs, center, half):
    safe = np.where(np.abs(dirs) > 1e-12, dirs, 1e-12)
    t1 = (center - half - origins) / safe
    t2 = (center + half - origins) / safe
    tmin = np.minimum(t1, t2).max(-1)
    tmax = np.maximum(t1, t2).min(-1)
    hit = (tmax > np.maximum(tmin, 1e-4)) & (tmin > 1e-4)
    return np.where(hit, tmin, np.inf)


def trace_rays(scene: Scene, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Shade each ray: nearest-hit lambertian with a fixed directional light. Black miss."""
    flat_o = origins.reshape(-1, 3)
    flat_d = dirs.reshape(-1, 3)
    n = flat_o.shape[0]
    best_t = np.full(n, np.inf)
    best_idx = np.full(n, -1)
    for i, obj in enumerate(scene.objects):
        if obj.kind == "sphere":
            t = _intersect_spheres(flat_o, flat_d, obj.center, obj.size[0])
        else:
            t = _intersect_boxes(flat_o, flat_d, obj.center, obj.size)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_idx = np.where(closer, i, best_idx)

    out = np.zeros((n, 3))
    for i, obj in enumerate(scene.objects):
        sel = best_idx == i
        if not sel.any():
            continue
        p = flat_o[sel] + best_t[sel, None] * flat_d[sel]
        if obj.kind == "sphere":
            normal = (p - obj.center) / obj.size[0]
        else:
            rel = (p - obj.center) / obj.size
            axis = np.abs(rel).argmax(-1)
            normal = np.zeros_like(p)
            normal[np.arange(p.shape[0]), axis] = np.sign(rel[np.arange(p.shape[0]), axis])
        lambert = np.maximum((normal * LIGHT_DIR).sum(-1), 0.0)
        out[sel] = obj.color * (AMBIENT + DIFFUSE * lambert[:, None])
    return np.clip(out.reshape(origins.shape), 0.0, 1.0)


def trace_view(scene: Scene, camera: CameraPose, ssaa: int = 4) -> np.ndarray:
    """Render one view with ssaa x ssaa supersampling, box-filtered down."""
    if ssaa < 1:
        raise ValueError("ssaa must be >= 1")
    hi = CameraPose(
        camera_id=camera.camera_id,
        width=camera.width * ssaa,
        height=camera.height * ssaa,
        focal=camera.focal * ssaa,
        c2w=camera.c2w,
    )
    origins, dirs = camera_rays(hi)
    img = trace_rays(scene, origins.numpy().astype(np.float64), dirs.numpy().astype(np.float64))
    H, W = camera.height, camera.width
    img = img.reshape(H, ssaa, W, ssaa, 3).mean(axis=(1, 3))
    return img.astype(np.float32)
