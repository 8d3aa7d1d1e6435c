"""CNN decoder that reads the message back out of rendered pixels.

A stack of stride-2 conv blocks pools whatever resolution comes in (32x32 or
larger) down to a global feature, then a linear head emits one logit per bit.
The authenticity classifier reuses the same backbone with a single logit.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .sticker import MessageBits


@dataclass
class ExtractorConfig:
    n_bits: int = 48
    channels: tuple = (32, 64, 128, 128, 128)


class ExtractorNet(nn.Module):
    """Image (H, W, 3) in [0, 1] -> one logit per message bit."""

    def __init__(self, cfg: ExtractorConfig, out_dim: int | None = None):
        super().__init__()
        self.cfg = cfg
        blocks = []
        prev = 3
        for ch in cfg.channels:
            blocks += [nn.Conv2d(prev, ch, kernel_size=3, stride=2, padding=1), nn.ReLU()]
            prev = ch
        self.features = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(prev, out_dim if out_dim is not None else cfg.n_bits)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """Accepts (H, W, 3) or a batch (B, H, W, 3); returns (n_out,) or (B, n_out)."""
        single = image.dim() == 3
        if single:
            image = image[None]
        if image.shape[1] < 32 or image.shape[2] < 32:
            raise ValueError(f"image must be at least 32x32, got {tuple(image.shape[1:3])}")
        x = image.permute(0, 3, 1, 2) * 2.0 - 1.0  # map [0,1] to [-1,1]
        x = self.pool(self.features(x)).flatten(1)
        out = self.head(x)
        return out[0] if single else out


def make_classifier(cfg: ExtractorConfig) -> ExtractorNet:
    """Same backbone, one watermarked-or-not logit."""
    return ExtractorNet(cfg, out_dim=1)


def logits_to_bits(logits: torch.Tensor) -> np.ndarray:
    """Tie rule: a logit of exactly zero decodes as bit 1."""
    return (logits.detach().cpu().numpy() >= 0.0).astype(np.uint8)


def extract_message(extractor: ExtractorNet, image: torch.Tensor) -> MessageBits:
    with torch.no_grad():
        logits = extractor(image)
    return MessageBits(bits=tuple(int(b) for b in logits_to_bits(logits)))


def bit_accuracy(decoded: MessageBits, truth: MessageBits) -> float:
    if len(decoded) != len(truth):
        raise ValueError("messages differ in length")
    return float((decoded.array == truth.array).mean())
