"""Two-stage training.

Stage 1 fits the radiance field to the ground-truth views with plain MSE.
Stage 2 freezes the field and trains sticker, gate, extractor and classifier
together on rendered patches with distortion augmentation. Because the field
is frozen and stage-2 rendering uses deterministic midpoint sampling, the
per-view density/color/ray tensors never change; they are computed once and
sliced per step, which is what makes CPU training practical.
"""

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import (
    TrainingError,
    gaussian_blur,
    gaussian_noise,
    random_cropout,
    random_rotation,
)
from .cameras import camera_rays
from .datasets import Dataset
from .extractor import ExtractorNet, bit_accuracy, extract_message
from .field import RenderConfig, bin_midpoints, composite, depth_deltas, render_image
from .metrics import psnr
from .recolor import hue_shift_image
from .sticker import MessageBits, MessageSticker, sparsity_loss


@dataclass
class TrainConfig:
    stage1_steps: int = 2000
    stage2_steps: int = 5000
    lr_field: float = 5e-4
    lr_field_voxel: float = 2e-2
    lr_sticker: float = 1e-3
    lr_extractor: float = 1e-4
    # The classifier gets one labeled pair per step at a tenth of the loss
    # weight; at the extractor's rate it never catches a subtle watermark.
    lr_classifier: float = 1e-3
    w_cont: float = 1.0
    w_msg: float = 1.0
    w_cls: float = 0.1
    w_sparse: float = 1e-3
    rays_per_batch: int = 1024
    patch_size: int = 64
    # Per-step augmentation: one entry sampled by weight. Parameters are the
    # battery maxima; hue jitter is included so the decoder learns to ignore
    # color while reading geometry.
    aug_weights: dict = field(default_factory=lambda: {
        "none": 1.0, "noise": 1.0, "rotation": 1.0, "cropout": 1.0, "blur": 1.0, "hue": 1.0,
    })
    aug_noise: float = 0.1
    aug_rotation: float = np.pi / 6
    aug_cropout: float = 0.25
    aug_blur: float = 1.2
    message_resample_prob: float = 0.5
    eval_interval: int = 500
    seed: int = 0

    def __post_init__(self):
        weights = (self.w_cont, self.w_msg, self.w_cls, self.w_sparse)
        if any(w < 0 for w in weights):
            raise ValueError("loss weights must be non-negative")
        if self.stage2_steps > 0 and (self.w_cont <= 0 or self.w_msg <= 0):
            raise ValueError("stage 2 needs w_cont > 0 and w_msg > 0")
        if self.patch_size < 32:
            raise ValueError("patch_size must be >= 32 (extractor minimum)")


@dataclass
class LossBreakdown:
    l_cont: float
    l_msg: float
    l_cls: float
    l_sparse: float
    l_total: float


def content_loss(rendered: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    if rendered.shape != reference.shape:
        raise ValueError(f"shape mismatch: {tuple(rendered.shape)} vs {tuple(reference.shape)}")
    return ((rendered - reference) ** 2).mean()


def message_loss(logits: torch.Tensor, message: MessageBits) -> torch.Tensor:
    targets = message.targets().to(logits.dtype)
    if logits.shape != targets.shape:
        raise ValueError("logit and message lengths differ")
    return F.binary_cross_entropy_with_logits(logits, targets)


def classifier_loss(p_w: torch.Tensor, p_u: torch.Tensor) -> torch.Tensor:
    """Label-supervised: watermarked probability -> 1, unwatermarked -> 0, averaged."""
    p_w = p_w.reshape(())
    p_u = p_u.reshape(())
    l1 = F.binary_cross_entropy(p_w, torch.tensor(1.0, dtype=p_w.dtype))
    l0 = F.binary_cross_entropy(p_u, torch.tensor(0.0, dtype=p_u.dtype))
    return 0.5 * (l1 + l0)


def total_loss(cfg: TrainConfig, l_cont, l_msg, l_cls, l_sparse) -> tuple[torch.Tensor, LossBreakdown]:
    total = cfg.w_cont * l_cont + cfg.w_msg * l_msg + cfg.w_cls * l_cls + cfg.w_sparse * l_sparse
    bd = LossBreakdown(
        l_cont=float(torch.as_tensor(l_cont).detach()),
        l_msg=float(torch.as_tensor(l_msg).detach()),
        l_cls=float(torch.as_tensor(l_cls).detach()),
        l_sparse=float(torch.as_tensor(l_sparse).detach()),
        l_total=float(torch.as_tensor(total).detach()),
    )
    return total, bd


def params_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Stage 1


def train_stage1(
    dataset: Dataset,
    backend: torch.nn.Module,
    cfg: TrainConfig,
    render_cfg: RenderConfig,
    rng: np.random.Generator,
    history_path=None,
) -> list:
    """Fit the field to the training views. Returns the history records."""
    train_idx = dataset.train_indices()
    if len(train_idx) < 2:
        raise ValueError("stage 1 needs at least 2 training views")
    all_o, all_d, all_c = [], [], []
    for i in train_idx:
        o, d = camera_rays(dataset.poses[i])
        all_o.append(o.reshape(-1, 3))
        all_d.append(d.reshape(-1, 3))
        all_c.append(dataset.images[i].reshape(-1, 3))
    origins = torch.cat(all_o)
    dirs = torch.cat(all_d)
    gt = torch.cat(all_c)

    lr = cfg.lr_field_voxel if backend.kind == "voxel" else cfg.lr_field
    opt = torch.optim.Adam(backend.parameters(), lr=lr)
    S = render_cfg.n_samples
    mids = bin_midpoints(render_cfg.t_near, render_cfg.t_far, S)
    h = (render_cfg.t_far - render_cfg.t_near) / S
    bg = torch.tensor(render_cfg.background)

    history = []
    for step in range(1, cfg.stage1_steps + 1):
        sel = torch.from_numpy(rng.integers(0, origins.shape[0], size=cfg.rays_per_batch))
        o, d, c = origins[sel], dirs[sel], gt[sel]
        jitter = torch.from_numpy(
            rng.uniform(-0.5, 0.5, size=(cfg.rays_per_batch, S)).astype(np.float32)
        )
        depths = mids[None, :] + h * jitter
        deltas = depth_deltas(depths, render_cfg.t_far)
        pos = o[:, None, :] + depths[..., None] * d[:, None, :]
        dflat = d[:, None, :].expand(-1, S, 3).reshape(-1, 3)
        sigma, feat = backend.evaluate_density(pos.reshape(-1, 3))
        color = backend.evaluate_color(feat, dflat)
        rgb, opacity = composite(sigma.reshape(-1, S), deltas, color.reshape(-1, S, 3))
        rgb = rgb + (1.0 - opacity)[:, None] * bg
        loss = content_loss(rgb, c)
        if not torch.isfinite(loss):
            raise TrainingError(f"stage 1 loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()

        rec = {"step": step, "l_cont": float(loss.detach())}
        if step % cfg.eval_interval == 0 or step == cfg.stage1_steps:
            rec["heldout_psnr"] = eval_field_psnr(dataset, backend, render_cfg)
        history.append(rec)
    if history_path is not None:
        write_history(history, history_path)
    return history


def eval_field_psnr(dataset: Dataset, backend, render_cfg: RenderConfig) -> float:
    vals = []
    for i in dataset.test_indices():
        img = render_image(backend, dataset.poses[i], render_cfg).pixels
        vals.append(psnr(img, dataset.images[i]))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Stage 2: frozen-field view cache


class ViewCache:
    """Everything stage 2 needs from one view of a frozen field.

    Midpoint depths are shared across rays, so only density, color and the
    composited unwatermarked image are stored per pixel.
    """

    def __init__(self, backend, camera, render_cfg: RenderConfig):
        H, W, S = camera.height, camera.width, render_cfg.n_samples
        with torch.no_grad():
            origins, dirs = camera_rays(camera)
            self.origin = origins[0, 0]
            self.dirs = dirs
            self.depths = bin_midpoints(render_cfg.t_near, render_cfg.t_far, S)
            self.deltas = depth_deltas(self.depths, render_cfg.t_far)
            pos = self.origin + self.depths[:, None] * dirs[..., None, :]
            flat = pos.reshape(-1, 3)
            sigmas, colors = [], []
            for start in range(0, flat.shape[0], render_cfg.chunk):
                chunk = flat[start : start + render_cfg.chunk]
                sg, ft = backend.evaluate_density(chunk)
                dd = dirs[..., None, :].expand(H, W, S, 3).reshape(-1, 3)[start : start + render_cfg.chunk]
                sigmas.append(sg)
                colors.append(backend.evaluate_color(ft, dd))
            self.sigma = torch.cat(sigmas).reshape(H, W, S)
            self.color = torch.cat(colors).reshape(H, W, S, 3)
            rgb, opacity = composite(
                self.sigma.reshape(-1, S), self.deltas, self.color.reshape(-1, S, 3)
            )
            bg = torch.tensor(render_cfg.background)
            rgb = rgb + (1.0 - opacity)[:, None] * bg
            self.plain = rgb.reshape(H, W, 3).clamp(0.0, 1.0)

    def window_positions(self, y0: int, x0: int, P: int) -> torch.Tensor:
        d = self.dirs[y0 : y0 + P, x0 : x0 + P]
        return self.origin + self.depths[:, None] * d[..., None, :]


def render_window(cache: ViewCache, sticker: MessageSticker, message: MessageBits,
                  y0: int, x0: int, P: int, background) -> torch.Tensor:
    """Watermarked patch from cached field outputs; gradients reach only the sticker."""
    S = cache.sigma.shape[-1]
    pos = cache.window_positions(y0, x0, P).reshape(-1, 3)
    sigma = cache.sigma[y0 : y0 + P, x0 : x0 + P].reshape(-1)
    psi = sticker.importance(sigma)
    m = sticker.offsets(pos, message)
    sigma_t = F.relu(sigma + psi * m).reshape(P * P, S)
    color = cache.color[y0 : y0 + P, x0 : x0 + P].reshape(P * P, S, 3)
    rgb, opacity = composite(sigma_t, cache.deltas, color)
    rgb = rgb + (1.0 - opacity)[:, None] * torch.tensor(background)
    return rgb.reshape(P, P, 3).clamp(0.0, 1.0), psi


def render_cached_watermarked(cache: ViewCache, sticker: MessageSticker, message: MessageBits,
                              background) -> torch.Tensor:
    H, W = cache.sigma.shape[0], cache.sigma.shape[1]
    assert H == W
    img, _ = render_window(cache, sticker, message, 0, 0, H, background)
    return img


AUG_KINDS = ("none", "noise", "rotation", "cropout", "blur", "hue")


def _apply_augmentation(image: torch.Tensor, kind: str, cfg: TrainConfig, rng: np.random.Generator) -> torch.Tensor:
    if kind == "none":
        return image
    if kind == "noise":
        return gaussian_noise(image, cfg.aug_noise, rng)
    if kind == "rotation":
        return random_rotation(image, cfg.aug_rotation, rng)
    if kind == "cropout":
        return random_cropout(image, cfg.aug_cropout, rng)
    if kind == "blur":
        return gaussian_blur(image, float(rng.uniform(0.0, cfg.aug_blur)))
    if kind == "hue":
        return hue_shift_image(image, float(rng.uniform(-0.5, 0.5)))
    raise ValueError(f"unknown augmentation {kind!r}")


def train_stage2(
    backend: torch.nn.Module,
    message: MessageBits,
    sticker: MessageSticker,
    extractor: ExtractorNet,
    classifier: ExtractorNet,
    dataset: Dataset,
    cfg: TrainConfig,
    render_cfg: RenderConfig,
    rng: np.random.Generator,
    caches: dict | None = None,
    history_path=None,
) -> tuple[list, dict]:
    """Joint sticker/gate/extractor/classifier training against a frozen field.

    Returns (history records, view caches) so later batteries can reuse the
    cached field outputs.
    """
    for p in backend.parameters():
        p.requires_grad_(False)
    frozen_digest = params_digest(backend)

    train_idx = dataset.train_indices()
    test_idx = dataset.test_indices()
    H = dataset.poses[0].height
    W = dataset.poses[0].width
    P = min(cfg.patch_size, H, W)
    if P < 32:
        raise ValueError("views are smaller than the 32-pixel extractor minimum")

    if caches is None:
        caches = {}
    for i in train_idx + test_idx:
        if i not in caches:
            caches[i] = ViewCache(backend, dataset.poses[i], render_cfg)

    groups = [
        {"params": list(sticker.net.parameters()), "lr": cfg.lr_sticker},
        {"params": list(extractor.parameters()), "lr": cfg.lr_extractor},
        {"params": list(classifier.parameters()), "lr": cfg.lr_classifier},
    ]
    if sticker.mode == "learnable":
        groups.append({"params": [sticker.gate.log_beta], "lr": cfg.lr_sticker})
    opt = torch.optim.Adam(groups)

    kinds = [k for k in AUG_KINDS if cfg.aug_weights.get(k, 0.0) > 0]
    weights = np.array([cfg.aug_weights[k] for k in kinds], dtype=np.float64)
    weights = weights / weights.sum()

    history = []
    for step in range(1, cfg.stage2_steps + 1):
        vi = train_idx[int(rng.integers(0, len(train_idx)))]
        y0 = int(rng.integers(0, H - P + 1))
        x0 = int(rng.integers(0, W - P + 1))
        # Condition on a fresh random message part of the time so the decoder
        # has to actually read the render instead of memorizing one string.
        if rng.uniform() < cfg.message_resample_prob:
            msg = MessageBits.random(len(message), rng)
        else:
            msg = message
        kind = kinds[int(rng.choice(len(kinds), p=weights))]

        cache = caches[vi]
        img_w, psi = render_window(cache, sticker, msg, y0, x0, P, render_cfg.background)
        img_u = cache.plain[y0 : y0 + P, x0 : x0 + P]
        img_o = dataset.images[vi][y0 : y0 + P, x0 : x0 + P]

        l_cont = content_loss(img_w, img_o)
        distorted = _apply_augmentation(img_w, kind, cfg, rng)
        l_msg = message_loss(extractor(distorted), msg)
        l_cls = classifier_loss(
            torch.sigmoid(classifier(img_w)), torch.sigmoid(classifier(img_u))
        )
        l_sparse = sparsity_loss(psi) if sticker.mode == "learnable" else torch.tensor(0.0)
        loss, bd = total_loss(cfg, l_cont, l_msg, l_cls, l_sparse)
        if not torch.isfinite(loss):
            raise TrainingError(f"stage 2 loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()

        rec = {"step": step, **asdict(bd), "aug": kind}
        if step % cfg.eval_interval == 0 or step == cfg.stage2_steps:
            rec.update(eval_stage2(caches, test_idx, sticker, extractor, message, render_cfg))
        history.append(rec)

    if params_digest(backend) != frozen_digest:
        raise TrainingError("stage 2 mutated frozen field parameters")
    if history_path is not None:
        write_history(history, history_path)
    return history, caches


def eval_stage2(caches, test_idx, sticker, extractor, message, render_cfg) -> dict:
    accs, ps = [], []
    with torch.no_grad():
        for i in test_idx:
            img_w = render_cached_watermarked(caches[i], sticker, message, render_cfg.background)
            accs.append(bit_accuracy(extract_message(extractor, img_w), message))
            ps.append(psnr(img_w, caches[i].plain))
    return {"eval_bit_accuracy": float(np.mean(accs)), "eval_psnr_wu": float(np.mean(ps))}


def write_history(history: list, path) -> None:
    with open(path, "w") as f:
        for rec in history:
            f.write(json.dumps(rec) + "\n")
