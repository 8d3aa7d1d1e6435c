"""Experiment orchestration: phases, robustness batteries, structured report.

A run executes data -> per-backend training -> batteries -> ablation ->
threats, averaging every metric over the test viewpoints, and writes
report.json, a per-view CSV, training histories and residual maps under the
output directory. Phase failures are recorded and independent phases keep
going.
"""

import copy
import csv
import time
import traceback
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .attacks import DistortionSpec, apply_distortion, pgd_attack, purification
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .datasets import Dataset, generate_procedural_scene, load_dataset, save_dataset, save_png
from .extractor import ExtractorConfig, ExtractorNet, bit_accuracy, extract_message, make_classifier
from .field import make_backend, render_image
from .metrics import psnr, ssim
from .recolor import (
    REFERENCE_COLORS,
    ColorTransform,
    build_palette,
    hue_shift_image,
    recolor_model,
)
from .scenes import ANCHOR_GREEN
from .sticker import (
    LaplaceGate,
    MessageBits,
    MessageSticker,
    StickerNet,
    fit_gate_from_positions,
    watermarked_density,
)
from .trainer import (
    ViewCache,
    eval_field_psnr,
    render_cached_watermarked,
    train_stage1,
    train_stage2,
)

REPORT_VERSION = 1

# Fixed spawn layout so seeds do not shift when phases are disabled.
_SEED_CHILDREN = (
    "data", "message",
    "mlp_stage1", "mlp_gate", "mlp_stage2", "mlp_battery",
    "voxel_stage1", "voxel_gate", "voxel_stage2", "voxel_battery",
    "ablation", "threats",
)


def _rngs(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(_SEED_CHILDREN))
    return dict(zip(_SEED_CHILDREN, children))


def _torch_seed(child: np.random.SeedSequence, extra: int = 0) -> None:
    torch.manual_seed(int(child.generate_state(1)[0]) + extra)


def strip_wallclock(report: dict) -> dict:
    """Copy of the report without timing fields, for determinism comparisons.

    Timing hides at two levels: the top-level wallclock block and the
    "seconds" entries inside each stage summary.
    """
    def scrub(node):
        if isinstance(node, dict):
            return {k: scrub(v) for k, v in node.items() if k not in ("wallclock", "seconds")}
        if isinstance(node, list):
            return [scrub(v) for v in node]
        return node

    return scrub(json.loads(json.dumps(report)))


# ---------------------------------------------------------------------------
# Batteries


def _transformed_watermarked(cache: ViewCache, sticker, message, transform, background):
    """Watermarked render with recolored colors, from cached field outputs.

    Post-composition on the color branch means transforming the cached
    per-sample colors is exactly what rendering the recolored backend does.
    """
    import torch.nn.functional as F
    from .field import composite

    H, W, S = cache.sigma.shape
    with torch.no_grad():
        pos = cache.window_positions(0, 0, H).reshape(-1, 3)
        sigma = cache.sigma.reshape(-1)
        psi = sticker.importance(sigma)
        m = sticker.offsets(pos, message)
        sigma_t = F.relu(sigma + psi * m).reshape(H * W, S)
        color = transform.apply(cache.color.reshape(-1, 3)).reshape(H * W, S, 3)
        rgb, opacity = composite(sigma_t, cache.deltas, color)
        rgb = rgb + (1.0 - opacity)[:, None] * torch.tensor(background)
    return rgb.reshape(H, W, 3).clamp(0.0, 1.0)


def run_battery(
    kind: str,
    backend,
    sticker,
    extractor,
    classifier,
    dataset: Dataset,
    caches: dict,
    message: MessageBits,
    cfg: ExperimentConfig,
    rng: np.random.Generator,
    out_dir: Path,
) -> dict:
    bat = cfg.battery
    render_cfg = cfg.render
    test_idx = dataset.test_indices()
    train_idx = dataset.train_indices()
    res_dir = out_dir / "residuals"
    res_dir.mkdir(parents=True, exist_ok=True)

    per_view = []
    clean_w = {}
    with torch.no_grad():
        for i in test_idx:
            img_w = render_cached_watermarked(caches[i], sticker, message, render_cfg.background)
            img_u = caches[i].plain
            clean_w[i] = img_w
            quantized = torch.from_numpy(
                (np.clip(np.round(img_w.numpy() * 255.0), 0, 255) / 255.0).astype(np.float32)
            )
            row = {
                "backend": kind,
                "view": i,
                "camera_id": dataset.poses[i].camera_id,
                "psnr_wu": psnr(img_w, img_u),
                "ssim_wu": ssim(img_w, img_u),
                "psnr_gt": psnr(img_w, dataset.images[i]),
                "bit_accuracy_clean": bit_accuracy(extract_message(extractor, img_w), message),
                "png_roundtrip_bit_accuracy": bit_accuracy(
                    extract_message(extractor, quantized), message
                ),
                "classifier_p_watermarked": float(torch.sigmoid(classifier(img_w))),
                "classifier_p_unwatermarked": float(torch.sigmoid(classifier(img_u))),
            }
            per_view.append(row)
            save_png(((img_w - img_u).abs() * 10.0).clamp(0.0, 1.0), res_dir / f"{kind}_{dataset.poses[i].camera_id}.png")

    # Zero-message identity through the full uncached render path.
    scale = sticker.message_scale
    sticker.message_scale = 0.0
    identity_ok = True
    for i in test_idx:
        a = render_image(backend, dataset.poses[i], render_cfg, sticker=sticker, message=message).pixels
        b = render_image(backend, dataset.poses[i], render_cfg).pixels
        if not torch.equal(a, b):
            identity_ok = False
    sticker.message_scale = scale

    # Distortion battery at the acceptance parameters.
    specs = {
        "noise": DistortionSpec(kind="noise", nu=bat.noise),
        "rotation": DistortionSpec(kind="rotation", alpha=bat.rotation),
        "cropout": DistortionSpec(kind="cropout", s=bat.cropout),
        "blur": DistortionSpec(kind="blur", xi=bat.blur),
    }
    distortions = {}
    with torch.no_grad():
        for name, spec in specs.items():
            accs, qual = [], []
            for i in test_idx:
                draws = 1 if name == "blur" else bat.draws  # blur is deterministic
                for _ in range(draws):
                    img = apply_distortion(clean_w[i], spec, rng)
                    accs.append(bit_accuracy(extract_message(extractor, img), message))
                    qual.append(psnr(img, clean_w[i]))
            distortions[name] = {
                "bit_accuracy": float(np.mean(accs)),
                "psnr_vs_clean": float(np.mean(qual)),
                "params": {"nu": spec.nu, "alpha": spec.alpha, "s": spec.s, "xi": spec.xi},
            }

    # Recolor battery: image-level hue jitter, then model-level palette remaps.
    hue_accs = []
    with torch.no_grad():
        for i in test_idx:
            for _ in range(bat.hue_draws):
                dh = float(rng.uniform(-0.5, 0.5))
                img = hue_shift_image(clean_w[i], dh)
                hue_accs.append(bit_accuracy(extract_message(extractor, img), message))

    palette = build_palette(
        [caches[i].plain for i in train_idx], bat.palette_k, rng, temperature=bat.palette_temperature
    )
    anchor = torch.tensor(ANCHOR_GREEN)
    source_index = int((palette.base_colors - anchor).norm(dim=-1).argmin())
    palette_accs = {}
    with torch.no_grad():
        for cname, rgbvals in REFERENCE_COLORS.items():
            t = ColorTransform(
                kind="palette_remap", palette=palette, source_index=source_index, target_color=rgbvals
            )
            accs = []
            for i in test_idx:
                img = _transformed_watermarked(caches[i], sticker, message, t, render_cfg.background)
                accs.append(bit_accuracy(extract_message(extractor, img), message))
            palette_accs[cname] = float(np.mean(accs))

    # Geometry invariance: recoloring must not move a single density value.
    probe = torch.from_numpy(rng.uniform(-1.5, 1.5, size=(4096, 3)).astype(np.float32))
    recolored = recolor_model(backend, ColorTransform(kind="hue_rotation", delta_h=0.25))
    with torch.no_grad():
        s_base, _ = backend.evaluate_density(probe)
        s_rec, _ = recolored.evaluate_density(probe)
        w_base = watermarked_density(backend, sticker, probe, message)
        w_rec = watermarked_density(recolored, sticker, probe, message)
    geometry_invariant = (
        torch.equal(s_base, s_rec)
        and torch.equal(w_base.sigma_tilde, w_rec.sigma_tilde)
        and torch.equal(w_base.psi, w_rec.psi)
    )

    # Classifier separation on clean test renders.
    hits = 0
    for row in per_view:
        hits += int(row["classifier_p_watermarked"] > 0.5)
        hits += int(row["classifier_p_unwatermarked"] < 0.5)
    classifier_accuracy = hits / (2 * len(per_view))

    # Gate sharpness diagnostic over training samples.
    with torch.no_grad():
        mins = []
        for i in train_idx:
            psi = sticker.importance(caches[i].sigma.reshape(-1))
            mins.append(torch.minimum(psi, 1.0 - psi).mean())
        sparsity_diag = float(torch.stack(mins).mean())

    return {
        "per_view": per_view,
        "clean_bit_accuracy": float(np.mean([r["bit_accuracy_clean"] for r in per_view])),
        "png_roundtrip_bit_accuracy": float(np.mean([r["png_roundtrip_bit_accuracy"] for r in per_view])),
        "invisibility_psnr": float(np.mean([r["psnr_wu"] for r in per_view])),
        "invisibility_ssim": float(np.mean([r["ssim_wu"] for r in per_view])),
        "psnr_vs_ground_truth": float(np.mean([r["psnr_gt"] for r in per_view])),
        "zero_message_identity": bool(identity_ok),
        "distortions": distortions,
        "recolor": {
            "hue_bit_accuracy": float(np.mean(hue_accs)),
            "palette_bit_accuracy": palette_accs,
            "palette_bit_accuracy_min": float(min(palette_accs.values())),
            "palette_bit_accuracy_mean": float(np.mean(list(palette_accs.values()))),
            "palette_source_index": source_index,
            "geometry_invariance": bool(geometry_invariant),
        },
        "classifier_accuracy": float(classifier_accuracy),
        "sparsity_diagnostic": sparsity_diag,
    }


# ---------------------------------------------------------------------------
# Phases


def _train_backend(kind, cfg, dataset, message, rngs, out_dir):
    """Stage 1 + gate fit + stage 2 for one backend. Returns all trained pieces."""
    field_cfg = cfg.field_config(kind)
    s1 = rngs[f"{kind}_stage1"]
    _torch_seed(s1)
    backend = make_backend(field_cfg)
    t0 = time.time()
    hist1 = train_stage1(
        dataset, backend, cfg.train, cfg.render, np.random.default_rng(s1),
        history_path=out_dir / f"{kind}_stage1.jsonl",
    )
    stage1_s = time.time() - t0
    heldout = eval_field_psnr(dataset, backend, cfg.render)
    for p in backend.parameters():
        p.requires_grad_(False)

    # Gate statistics from positions sampled along the training rays.
    gate_rng = np.random.default_rng(rngs[f"{kind}_gate"])
    positions = _ray_positions(dataset, cfg.render, cfg.sticker.gate_samples, gate_rng)
    gate, beta0 = fit_gate_from_positions(backend, positions, eps=cfg.sticker.eps)
    _torch_seed(rngs[f"{kind}_gate"], extra=1)
    net = StickerNet(
        n_bits=cfg.message.n_bits, enc_dim=cfg.sticker.enc_dim,
        hidden=cfg.sticker.hidden, enc_freqs=cfg.sticker.enc_freqs,
    )
    net.m_max.fill_(cfg.sticker.amplitude_ratio * beta0)
    sticker = MessageSticker(gate, net, mode="learnable")
    ex_cfg = ExtractorConfig(n_bits=cfg.message.n_bits, channels=cfg.extractor.channels)
    extractor = ExtractorNet(ex_cfg)
    classifier = make_classifier(ex_cfg)

    t0 = time.time()
    hist2, caches = train_stage2(
        backend, message, sticker, extractor, classifier, dataset, cfg.train, cfg.render,
        np.random.default_rng(rngs[f"{kind}_stage2"]),
        history_path=out_dir / f"{kind}_stage2.jsonl",
    )
    stage2_s = time.time() - t0
    return {
        "backend": backend, "field_cfg": field_cfg, "sticker": sticker,
        "extractor": extractor, "classifier": classifier, "extractor_cfg": ex_cfg,
        "caches": caches, "gate_stats": (float(gate.mu), beta0),
        "stage1": {
            "steps": cfg.train.stage1_steps, "heldout_psnr": heldout, "seconds": stage1_s,
            "final_loss": hist1[-1]["l_cont"] if hist1 else None,
        },
        "stage2": _stage2_summary(hist2, cfg.train.stage2_steps, stage2_s),
    }


def _stage2_summary(hist, steps, seconds):
    msg = [h["l_msg"] for h in hist]
    tail = hist[-1] if hist else {}
    k = max(1, len(msg) // 10)
    return {
        "steps": steps,
        "seconds": seconds,
        "final_bit_accuracy": tail.get("eval_bit_accuracy"),
        "final_psnr_wu": tail.get("eval_psnr_wu"),
        "msg_loss_first_decile_median": float(np.median(msg[:k])) if msg else None,
        "msg_loss_last_decile_median": float(np.median(msg[-k:])) if msg else None,
    }


def _ray_positions(dataset, render_cfg, n_points, rng):
    from .cameras import camera_rays
    from .field import bin_midpoints

    train_idx = dataset.train_indices()
    S = render_cfg.n_samples
    n_rays = max(1, n_points // S)
    all_o, all_d = [], []
    for i in train_idx:
        o, d = camera_rays(dataset.poses[i])
        all_o.append(o.reshape(-1, 3))
        all_d.append(d.reshape(-1, 3))
    origins = torch.cat(all_o)
    dirs = torch.cat(all_d)
    sel = torch.from_numpy(rng.integers(0, origins.shape[0], size=n_rays))
    mids = bin_midpoints(render_cfg.t_near, render_cfg.t_far, S)
    h = (render_cfg.t_far - render_cfg.t_near) / S
    jitter = torch.from_numpy(rng.uniform(-0.5, 0.5, size=(n_rays, S)).astype(np.float32))
    depths = mids[None, :] + h * jitter
    pos = origins[sel][:, None, :] + depths[..., None] * dirs[sel][:, None, :]
    return pos.reshape(-1, 3)[:n_points]


def _run_ablation(cfg, dataset, message, state, rngs, out_dir):
    """Same frozen field, three gate modes, shorter budget, same draws each."""
    mu, beta0 = state["gate_stats"]
    train_cfg = replace(cfg.train, stage2_steps=cfg.ablation.steps)
    results = {}
    for vi, mode in enumerate(("learnable", "fixed", "all_points")):
        _torch_seed(rngs["ablation"], extra=0)  # identical init for every variant
        gate = LaplaceGate(mu=mu, beta=beta0, eps=cfg.sticker.eps)
        net = StickerNet(
            n_bits=cfg.message.n_bits, enc_dim=cfg.sticker.enc_dim,
            hidden=cfg.sticker.hidden, enc_freqs=cfg.sticker.enc_freqs,
        )
        net.m_max.fill_(cfg.sticker.amplitude_ratio * beta0)
        sticker = MessageSticker(gate, net, mode=mode)
        ex_cfg = state["extractor_cfg"]
        extractor = ExtractorNet(ex_cfg)
        classifier = make_classifier(ex_cfg)
        rng = np.random.default_rng(rngs["ablation"])  # same stream per variant
        hist, _ = train_stage2(
            state["backend"], message, sticker, extractor, classifier, dataset,
            train_cfg, cfg.render, rng, caches=state["caches"],
            history_path=out_dir / f"ablation_{mode}.jsonl",
        )
        tail = hist[-1]
        results[mode] = {
            "psnr_wu": tail["eval_psnr_wu"],
            "bit_accuracy": tail["eval_bit_accuracy"],
        }
    return {"steps": cfg.ablation.steps, "variants": results}


def _run_threats(cfg, dataset, message, state, rngs):
    rng = np.random.default_rng(rngs["threats"])
    render_cfg = cfg.render
    test_idx = dataset.test_indices()
    caches, sticker, extractor = state["caches"], state["sticker"], state["extractor"]

    target = MessageBits.random(cfg.message.n_bits, rng)
    pgd_rows, traces = [], []
    for i in test_idx:
        img_w = render_cached_watermarked(caches[i], sticker, message, render_cfg.background)
        trace = []
        adv, acc, p = pgd_attack(
            img_w, extractor, target, message, cfg.threats.pgd_psnr_budget,
            steps=cfg.threats.pgd_steps, trace=trace,
        )
        pgd_rows.append({"view": i, "bit_accuracy": acc, "psnr": p})
        traces.append(trace)

    backend_copy = copy.deepcopy(state["backend"])
    sticker_copy = copy.deepcopy(sticker)
    train_idx = dataset.train_indices()
    curve = purification(
        backend_copy, sticker_copy, message, extractor,
        [dataset.images[i] for i in train_idx], [dataset.poses[i] for i in train_idx],
        [dataset.images[i] for i in test_idx], [dataset.poses[i] for i in test_idx],
        render_cfg, steps=cfg.threats.purify_steps, lr=cfg.threats.purify_lr,
        rng=rng, patch_size=cfg.train.patch_size, eval_interval=cfg.threats.purify_eval_interval,
    )
    pre = curve[0]["psnr"]
    within = [c for c in curve if abs(c["psnr"] - pre) <= 1.0]
    acc_at_quality = within[-1]["bit_accuracy"]
    return {
        "pgd": {
            "psnr_budget": cfg.threats.pgd_psnr_budget,
            "steps": cfg.threats.pgd_steps,
            "target_message_hex": target.to_hex(),
            "per_view": pgd_rows,
            "bit_accuracy": float(np.mean([r["bit_accuracy"] for r in pgd_rows])),
            "psnr": float(np.mean([r["psnr"] for r in pgd_rows])),
            "objective_traces": traces,
        },
        "purification": {
            "steps": cfg.threats.purify_steps,
            "lr": cfg.threats.purify_lr,
            "pre_attack_psnr": pre,
            "curve": curve,
            "accuracy_at_quality": acc_at_quality,
            "final_bit_accuracy": curve[-1]["bit_accuracy"],
            "final_psnr": curve[-1]["psnr"],
        },
    }


def _criteria_block(report: dict) -> dict:
    backends = report.get("backends", {})
    out = {}
    for kind, b in backends.items():
        out.setdefault("zero_message_identity", {})[kind] = b["zero_message_identity"]
        out.setdefault("clean_bit_accuracy", {})[kind] = b["clean_bit_accuracy"]
        out.setdefault("invisibility_psnr", {})[kind] = b["invisibility_psnr"]
        out.setdefault("invisibility_ssim", {})[kind] = b["invisibility_ssim"]
        out.setdefault("distortion_bit_accuracy", {})[kind] = {
            k: v["bit_accuracy"] for k, v in b["distortions"].items()
        }
        out.setdefault("recolor_hue_bit_accuracy", {})[kind] = b["recolor"]["hue_bit_accuracy"]
        out.setdefault("recolor_palette_bit_accuracy_min", {})[kind] = b["recolor"]["palette_bit_accuracy_min"]
        out.setdefault("geometry_invariance", {})[kind] = b["recolor"]["geometry_invariance"]
        out.setdefault("classifier_accuracy", {})[kind] = b["classifier_accuracy"]
        out.setdefault("sparsity_diagnostic", {})[kind] = b["sparsity_diagnostic"]
    if "ablation" in report:
        v = report["ablation"]["variants"]
        out["ablation_psnr"] = {k: r["psnr_wu"] for k, r in v.items()}
    if "threats" in report:
        out["pgd_bit_accuracy"] = report["threats"]["pgd"]["bit_accuracy"]
        out["purification_accuracy_at_quality"] = report["threats"]["purification"]["accuracy_at_quality"]
    return out


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rngs = _rngs(cfg.seed)
    report: dict = {
        "format_version": REPORT_VERSION,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "phases": {},
        "wallclock": {},
    }

    msg_rng = np.random.default_rng(rngs["message"])
    salt = msg_rng.bytes(16)
    if cfg.message.hex is not None:
        message = MessageBits.from_hex(cfg.message.hex)
        if len(message) != cfg.message.n_bits:
            raise ValueError(f"message hex encodes {len(message)} bits, config says {cfg.message.n_bits}")
    else:
        message = MessageBits.random(cfg.message.n_bits, msg_rng)

    dataset = None
    if "data" in cfg.phases:
        t0 = time.time()
        try:
            if cfg.scene.data_dir is not None:
                dataset = load_dataset(cfg.scene.data_dir, cfg.render.background)
            else:
                dataset = generate_procedural_scene(
                    cfg.seed, n_views=cfg.scene.n_views, resolution=cfg.scene.resolution,
                    n_objects=cfg.scene.n_objects, camera_angle_x=cfg.scene.camera_angle_x,
                    radius=cfg.scene.radius, ssaa=cfg.scene.ssaa,
                )
                save_dataset(dataset, out_dir / "data")
            report["dataset"] = {
                "n_views": len(dataset.images),
                "n_train": len(dataset.train_indices()),
                "n_test": len(dataset.test_indices()),
                "resolution": [int(dataset.images[0].shape[0]), int(dataset.images[0].shape[1])],
                "meta": dataset.meta,
            }
            report["phases"]["data"] = "ok"
        except Exception as e:
            report["phases"]["data"] = f"failed: {e}"
            traceback.print_exc()
        report["wallclock"]["data"] = time.time() - t0

    state_by_kind = {}
    if "backends" in cfg.phases:
        if dataset is None:
            report["phases"]["backends"] = "skipped: no dataset"
        else:
            report["backends"] = {}
            for kind in cfg.backends:
                t0 = time.time()
                try:
                    state = _train_backend(kind, cfg, dataset, message, rngs, out_dir)
                    battery = run_battery(
                        kind, state["backend"], state["sticker"], state["extractor"],
                        state["classifier"], dataset, state["caches"], message, cfg,
                        np.random.default_rng(rngs[f"{kind}_battery"]), out_dir,
                    )
                    save_checkpoint(
                        out_dir / f"{kind}.npz", state["backend"], state["field_cfg"],
                        state["sticker"], state["extractor"], state["classifier"],
                        state["extractor_cfg"], message, salt, cfg.seed,
                        extra_config=cfg.to_dict(),
                    )
                    report["backends"][kind] = {
                        "stage1": state["stage1"], "stage2": state["stage2"], **battery,
                    }
                    state_by_kind[kind] = state
                    report["phases"][f"backends/{kind}"] = "ok"
                except Exception as e:
                    report["phases"][f"backends/{kind}"] = f"failed: {e}"
                    traceback.print_exc()
                report["wallclock"][f"backends/{kind}"] = time.time() - t0

    if "ablation" in cfg.phases:
        if "mlp" not in state_by_kind:
            report["phases"]["ablation"] = "skipped: mlp backend unavailable"
        else:
            t0 = time.time()
            try:
                report["ablation"] = _run_ablation(cfg, dataset, message, state_by_kind["mlp"], rngs, out_dir)
                report["phases"]["ablation"] = "ok"
            except Exception as e:
                report["phases"]["ablation"] = f"failed: {e}"
                traceback.print_exc()
            report["wallclock"]["ablation"] = time.time() - t0

    if "threats" in cfg.phases:
        if "mlp" not in state_by_kind:
            report["phases"]["threats"] = "skipped: mlp backend unavailable"
        else:
            t0 = time.time()
            try:
                report["threats"] = _run_threats(cfg, dataset, message, state_by_kind["mlp"], rngs)
                report["phases"]["threats"] = "ok"
            except Exception as e:
                report["phases"]["threats"] = f"failed: {e}"
                traceback.print_exc()
            report["wallclock"]["threats"] = time.time() - t0

    report["criteria"] = _criteria_block(report)
    _write_outputs(report, out_dir)
    return report


def _write_outputs(report: dict, out_dir: Path) -> None:
    (out_dir / "report.json").write_text(json.dumps(report, indent=1))
    rows = []
    for kind, b in report.get("backends", {}).items():
        rows.extend(b.get("per_view", []))
    if rows:
        with open(out_dir / "per_view.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
