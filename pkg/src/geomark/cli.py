"""Command line interface.

Exit codes: 0 success, 1 phase or command failure, 2 invalid config/arguments.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig, load_config
from .datasets import generate_procedural_scene, load_dataset, load_png, save_dataset, save_png
from .experiment import run_experiment
from .extractor import bit_accuracy, extract_message
from .field import render_image
from .recolor import REFERENCE_COLORS, ColorTransform, build_palette, recolor_model
from .sticker import MessageBits
from . import checkpoint as ckpt_io


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _require_message(args) -> MessageBits:
    if not args.message:
        raise ConfigError("this command needs --message <hex>")
    return MessageBits.from_hex(args.message)


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    ds = generate_procedural_scene(
        cfg.seed, n_views=cfg.scene.n_views, resolution=cfg.scene.resolution,
        n_objects=cfg.scene.n_objects, camera_angle_x=cfg.scene.camera_angle_x,
        radius=cfg.scene.radius, ssaa=cfg.scene.ssaa,
    )
    out = Path(args.out or "data")
    save_dataset(ds, out)
    print(f"wrote {len(ds.images)} views to {out}")
    return 0


def cmd_train_field(args) -> int:
    from .trainer import eval_field_psnr, train_stage1
    from .field import make_backend

    cfg = _load_cfg(args)
    ds = load_dataset(args.data, cfg.render.background)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    torch.manual_seed(cfg.seed)
    backend = make_backend(cfg.field_config(args.backend))
    train_stage1(ds, backend, cfg.train, cfg.render, rng)
    heldout = eval_field_psnr(ds, backend, cfg.render)
    out = Path(args.out or f"field_{args.backend}.npz")
    ckpt_io.save_field(out, backend, cfg.field_config(args.backend), cfg.seed)
    print(f"held-out PSNR {heldout:.2f} dB; field saved to {out}")
    return 0


def cmd_embed(args) -> int:
    from .experiment import _ray_positions
    from .extractor import ExtractorConfig, ExtractorNet, make_classifier
    from .sticker import MessageSticker, StickerNet, fit_gate_from_positions
    from .trainer import train_stage2

    cfg = _load_cfg(args)
    message = _require_message(args)
    ds = load_dataset(args.data, cfg.render.background)
    loaded = ckpt_io.load_field(args.field)
    backend = loaded["backend"]
    ss = np.random.SeedSequence(cfg.seed).spawn(4)
    positions = _ray_positions(ds, cfg.render, cfg.sticker.gate_samples, np.random.default_rng(ss[0]))
    gate, beta0 = fit_gate_from_positions(backend, positions, eps=cfg.sticker.eps)
    torch.manual_seed(cfg.seed + 1)
    net = StickerNet(n_bits=len(message), enc_dim=cfg.sticker.enc_dim,
                     hidden=cfg.sticker.hidden, enc_freqs=cfg.sticker.enc_freqs)
    net.m_max.fill_(cfg.sticker.amplitude_ratio * beta0)
    sticker = MessageSticker(gate, net)
    ex_cfg = ExtractorConfig(n_bits=len(message), channels=cfg.extractor.channels)
    extractor = ExtractorNet(ex_cfg)
    classifier = make_classifier(ex_cfg)
    hist, _ = train_stage2(backend, message, sticker, extractor, classifier, ds,
                           cfg.train, cfg.render, np.random.default_rng(ss[1]))
    out = Path(args.out or "watermarked.npz")
    salt = np.random.default_rng(ss[2]).bytes(16)
    ckpt_io.save_checkpoint(out, backend, loaded["field_config"], sticker, extractor,
                            classifier, ex_cfg, message, salt, cfg.seed)
    print(f"final bit accuracy {hist[-1]['eval_bit_accuracy']:.3f}; checkpoint saved to {out}")
    return 0


def _open_checkpoint(args):
    loaded = ckpt_io.load_checkpoint(args.ckpt)
    message = None
    if args.message:
        message = MessageBits.from_hex(args.message)
        if not ckpt_io.verify_message(loaded, message):
            print("warning: message does not match the checkpoint commitment", file=sys.stderr)
    return loaded, message


def cmd_render(args) -> int:
    cfg = _load_cfg(args)
    loaded, message = _open_checkpoint(args)
    ds = load_dataset(args.data, cfg.render.background)
    out = Path(args.out or "renders")
    out.mkdir(parents=True, exist_ok=True)
    views = [int(v) for v in args.view.split(",")] if args.view else ds.test_indices()
    for i in views:
        plain = render_image(loaded["backend"], ds.poses[i], cfg.render)
        save_png(plain.pixels, out / f"{plain.camera_id}_plain.png")
        if message is not None:
            wm = render_image(loaded["backend"], ds.poses[i], cfg.render,
                              sticker=loaded["sticker"], message=message)
            save_png(wm.pixels, out / f"{wm.camera_id}_watermarked.png")
    print(f"wrote renders for views {views} to {out}")
    return 0


def cmd_recolor(args) -> int:
    cfg = _load_cfg(args)
    loaded, message = _open_checkpoint(args)
    ds = load_dataset(args.data, cfg.render.background)
    if args.hue is not None:
        transform = ColorTransform(kind="hue_rotation", delta_h=args.hue)
        label = f"hue{args.hue:+.2f}"
    elif args.remap:
        src_name, dst_name = args.remap.split(":")
        for name in (src_name, dst_name):
            if name not in REFERENCE_COLORS:
                raise ConfigError(f"unknown color {name!r}; choose from {sorted(REFERENCE_COLORS)}")
        rng = np.random.default_rng(cfg.seed)
        train_imgs = [render_image(loaded["backend"], ds.poses[i], cfg.render).pixels
                      for i in ds.train_indices()[:6]]
        palette = build_palette(train_imgs, cfg.battery.palette_k, rng,
                                temperature=cfg.battery.palette_temperature)
        src = torch.tensor(REFERENCE_COLORS[src_name])
        source_index = int((palette.base_colors - src).norm(dim=-1).argmin())
        transform = ColorTransform(kind="palette_remap", palette=palette,
                                   source_index=source_index,
                                   target_color=REFERENCE_COLORS[dst_name])
        label = f"{src_name}_to_{dst_name}"
    else:
        raise ConfigError("recolor needs --hue or --remap source:target")
    recolored = recolor_model(loaded["backend"], transform)
    out = Path(args.out or "recolored")
    out.mkdir(parents=True, exist_ok=True)
    views = [int(v) for v in args.view.split(",")] if args.view else ds.test_indices()
    for i in views:
        img = render_image(recolored, ds.poses[i], cfg.render,
                           sticker=loaded["sticker"] if message else None, message=message)
        save_png(img.pixels, out / f"{img.camera_id}_{label}.png")
    print(f"wrote recolored renders to {out}")
    return 0


def cmd_attack(args) -> int:
    from .attacks import DistortionSpec, apply_distortion, pgd_attack
    from .metrics import psnr

    cfg = _load_cfg(args)
    loaded, message = _open_checkpoint(args)
    if message is None:
        raise ConfigError("attack needs --message <hex> to score bit accuracy")
    ds = load_dataset(args.data, cfg.render.background)
    rng = np.random.default_rng(cfg.seed)
    rows = {}
    bat = cfg.battery
    specs = {
        "noise": DistortionSpec(kind="noise", nu=bat.noise),
        "rotation": DistortionSpec(kind="rotation", alpha=bat.rotation),
        "cropout": DistortionSpec(kind="cropout", s=bat.cropout),
        "blur": DistortionSpec(kind="blur", xi=bat.blur),
    }
    target = MessageBits.random(len(message), rng)
    for i in ds.test_indices():
        img = render_image(loaded["backend"], ds.poses[i], cfg.render,
                           sticker=loaded["sticker"], message=message).pixels
        view = {}
        for name, spec in specs.items():
            d = apply_distortion(img, spec, rng)
            view[name] = {
                "bit_accuracy": bit_accuracy(extract_message(loaded["extractor"], d), message),
                "psnr": psnr(d, img),
            }
        _, acc, p = pgd_attack(img, loaded["extractor"], target, message,
                               cfg.threats.pgd_psnr_budget, steps=cfg.threats.pgd_steps)
        view["pgd"] = {"bit_accuracy": acc, "psnr": p}
        rows[ds.poses[i].camera_id] = view
    text = json.dumps(rows, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_extract(args) -> int:
    loaded, message = _open_checkpoint(args)
    image = load_png(args.image)
    decoded = extract_message(loaded["extractor"], image)
    print(f"decoded: {decoded.to_hex()}")
    if message is not None:
        print(f"bit accuracy vs provided message: {bit_accuracy(decoded, message):.4f}")
    return 0


def cmd_report(args) -> int:
    path = Path(args.report)
    if not path.exists():
        raise ConfigError(f"no report at {path}")
    report = json.loads(path.read_text())
    print(f"seed {report.get('seed')}  phases:")
    for phase, status in report.get("phases", {}).items():
        print(f"  {phase}: {status}")
    for name, value in report.get("criteria", {}).items():
        print(f"  {name}: {json.dumps(value)}")
    return 0 if all(s == "ok" for s in report.get("phases", {}).values()) else 1


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    report = run_experiment(cfg, Path(args.out or "out"))
    failures = [f"{k}: {v}" for k, v in report["phases"].items() if v != "ok"]
    if failures:
        print("phase failures:\n  " + "\n  ".join(failures), file=sys.stderr)
        return 1
    print(f"report written to {Path(args.out or 'out') / 'report.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geomark",
                                description="Watermark radiance-field geometry with a binary message")
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", help="output path or directory")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate a procedural dataset").set_defaults(fn=cmd_gen_data)

    tf = sub.add_parser("train-field", help="stage 1: fit a radiance field")
    tf.add_argument("--data", required=True)
    tf.add_argument("--backend", choices=("mlp", "voxel"), default="mlp")
    tf.set_defaults(fn=cmd_train_field)

    em = sub.add_parser("embed", help="stage 2: embed a message into a trained field")
    em.add_argument("--data", required=True)
    em.add_argument("--field", required=True, help="field checkpoint from train-field")
    em.add_argument("--message", required=True, help="message as hex")
    em.set_defaults(fn=cmd_embed)

    rd = sub.add_parser("render", help="render views from a checkpoint")
    rd.add_argument("--ckpt", required=True)
    rd.add_argument("--data", required=True)
    rd.add_argument("--view", help="comma-separated view indices (default: test views)")
    rd.add_argument("--message", help="message hex for the watermarked render")
    rd.set_defaults(fn=cmd_render)

    rc = sub.add_parser("recolor", help="recolor a checkpointed model and render")
    rc.add_argument("--ckpt", required=True)
    rc.add_argument("--data", required=True)
    rc.add_argument("--view")
    rc.add_argument("--message")
    rc.add_argument("--hue", type=float, help="hue shift in [-0.5, 0.5]")
    rc.add_argument("--remap", help="palette remap, e.g. green:blue")
    rc.set_defaults(fn=cmd_recolor)

    at = sub.add_parser("attack", help="distortion + PGD battery against a checkpoint")
    at.add_argument("--ckpt", required=True)
    at.add_argument("--data", required=True)
    at.add_argument("--message", required=True)
    at.set_defaults(fn=cmd_attack)

    ex = sub.add_parser("extract", help="decode the message from an image")
    ex.add_argument("--ckpt", required=True)
    ex.add_argument("--image", required=True)
    ex.add_argument("--message", help="known message hex to score against")
    ex.set_defaults(fn=cmd_extract)

    rp = sub.add_parser("report", help="summarize a report.json")
    rp.add_argument("--report", required=True)
    rp.set_defaults(fn=cmd_report)

    sub.add_parser("run", help="full pipeline from config").set_defaults(fn=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError) as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
