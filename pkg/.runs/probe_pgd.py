"""Measure extractor margins vs PGD reach on the retrained reference checkpoint."""
import numpy as np
import torch

from geomark.attacks import pgd_attack
from geomark.checkpoint import load_checkpoint, verify_message
from geomark.config import ExperimentConfig
from geomark.datasets import load_dataset
from geomark.experiment import _rngs
from geomark.field import render_image
from geomark.sticker import MessageBits

torch.set_num_threads(1)
cfg = ExperimentConfig()
rngs = _rngs(cfg.seed)
msg_rng = np.random.default_rng(rngs["message"])
salt = msg_rng.bytes(16)
message = MessageBits.random(cfg.message.n_bits, msg_rng)

ckpt = load_checkpoint("/root/pkg/.runs/reference/mlp.npz")
assert verify_message(ckpt, message), "message mismatch"
backend, sticker, extractor = ckpt["backend"], ckpt["sticker"], ckpt["extractor"]
dataset = load_dataset("/root/pkg/.runs/reference/data")
test_idx = dataset.test_indices()

eps = 10.0 ** (-cfg.threats.pgd_psnr_budget / 20.0)
print(f"eps (Linf at {cfg.threats.pgd_psnr_budget} dB): {eps:.5f}")

for i in test_idx:
    img_w = render_image(backend, dataset.poses[i], cfg.render, sticker=sticker, message=message).pixels
    x = img_w.clone().requires_grad_(True)
    logits = extractor(x)
    margins = logits.abs()
    g1 = []
    for b in range(len(logits)):
        (g,) = torch.autograd.grad(logits[b], x, retain_graph=True)
        g1.append(float(g.abs().sum()))
    reach = eps * np.array(g1)
    m = margins.detach().numpy()
    order = np.argsort(m)
    print(f"view {i}: min|logit| {m.min():.3f} med {np.median(m):.3f} max {m.max():.3f}")
    print(f"  reach min {reach.min():.4f} med {np.median(reach):.4f} max {reach.max():.4f}")
    print(f"  bits with margin<reach: {(m < reach).sum()}/{len(m)}  "
          f"worst margin/reach: {(m / reach).min():.2f} (bit {order[0]})")

rng = np.random.default_rng(rngs["threats"])
target = MessageBits.random(cfg.message.n_bits, rng)
i = test_idx[0]
img_w = render_image(backend, dataset.poses[i], cfg.render, sticker=sticker, message=message).pixels
adv, acc, p = pgd_attack(img_w, extractor, target, message, cfg.threats.pgd_psnr_budget,
                         steps=500)
print(f"PGD 500 steps on view {i}: acc {acc:.3f} psnr {p:.2f}")
