"""Message sticker: a density offset gated by where the scene already has mass.

The gate scores each sample point by how far its density sits above the
scene's typical density, through a Laplace CDF centered on a frozen scene
statistic. A small MLP conditioned on position and the message bits produces
a bounded offset that is scaled by the gate score and added to the density
before compositing. Colors are never touched, which is what makes the mark
survive recolorization.
"""

import hashlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .field import encode_position


# ---------------------------------------------------------------------------
# Messages


@dataclass(frozen=True)
class MessageBits:
    """An owner's binary message. bits is a uint8 array of 0/1 values."""

    bits: tuple

    def __post_init__(self):
        if len(self.bits) == 0:
            raise ValueError("message must contain at least one bit")
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("message bits must be 0 or 1")

    def __len__(self):
        return len(self.bits)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.uint8)

    def signed(self) -> torch.Tensor:
        """Bits mapped to {-1, +1} for conditioning the sticker network."""
        return torch.as_tensor(self.array.astype(np.float32) * 2.0 - 1.0)

    def targets(self) -> torch.Tensor:
        """Bits as float {0, 1} targets for the decoder loss."""
        return torch.as_tensor(self.array.astype(np.float32))

    @classmethod
    def from_hex(cls, text: str) -> "MessageBits":
        """Parse a hex string; bit 0 is the most significant bit of the first digit."""
        text = text.strip().lower()
        if not text or any(c not in "0123456789abcdef" for c in text):
            raise ValueError(f"not a hex message: {text!r}")
        bits = []
        for c in text:
            v = int(c, 16)
            bits.extend([(v >> 3) & 1, (v >> 2) & 1, (v >> 1) & 1, v & 1])
        return cls(bits=tuple(bits))

    def to_hex(self) -> str:
        if len(self.bits) % 4 != 0:
            raise ValueError("bit count must be a multiple of 4 for hex form")
        digits = []
        for i in range(0, len(self.bits), 4):
            b = self.bits[i : i + 4]
            digits.append(f"{(b[0] << 3) | (b[1] << 2) | (b[2] << 1) | b[3]:x}")
        return "".join(digits)

    @classmethod
    def random(cls, n_bits: int, rng: np.random.Generator) -> "MessageBits":
        return cls(bits=tuple(int(b) for b in rng.integers(0, 2, size=n_bits)))

    def complement(self) -> "MessageBits":
        return MessageBits(bits=tuple(1 - b for b in self.bits))


def commit_message(message: MessageBits, salt: bytes) -> str:
    """Salted SHA-256 commitment; checkpoints store this, never the plaintext bits."""
    h = hashlib.sha256()
    h.update(salt)
    h.update(message.array.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Laplace gate


def laplace_cdf(sigma: torch.Tensor, mu, beta, eps: float = 1e-4) -> torch.Tensor:
    """CDF of a Laplace(mu, beta) distribution, clamped to [eps, 1 - eps].

    psi = 1/2 + 1/2 sign(sigma - mu) (1 - exp(-|sigma - mu| / beta)).
    """
    d = sigma - mu
    psi = 0.5 + 0.5 * torch.sign(d) * (1.0 - torch.exp(-d.abs() / beta))
    return psi.clamp(eps, 1.0 - eps)


def sparsity_loss(psi: torch.Tensor) -> torch.Tensor:
    """Mean of log(psi) + log(1 - psi); minimizing pushes gate scores toward 0 or 1."""
    return (torch.log(psi) + torch.log(1.0 - psi)).mean()


class LaplaceGate(nn.Module):
    """Gate score from density. mu is a frozen scene statistic; beta is learnable.

    beta is kept positive by storing its log.
    """

    def __init__(self, mu: float, beta: float, eps: float = 1e-4):
        super().__init__()
        if beta <= 0:
            raise ValueError("beta must be positive")
        if not 0 < eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        self.register_buffer("mu", torch.tensor(float(mu), dtype=torch.float32))
        self.log_beta = nn.Parameter(torch.tensor(np.log(beta), dtype=torch.float32))
        self.eps = float(eps)

    @property
    def beta(self) -> torch.Tensor:
        return self.log_beta.exp()

    def forward(self, sigma: torch.Tensor) -> torch.Tensor:
        return laplace_cdf(sigma, self.mu, self.beta, self.eps)


def fit_gate_from_positions(
    backend: nn.Module,
    positions: torch.Tensor,
    eps: float = 1e-4,
) -> tuple[LaplaceGate, float]:
    """Estimate (mu, beta) from the field's density at the given sample positions.

    The caller draws the positions, typically along the training rays. mu is
    the mean density and the initial beta is the maximum-likelihood scale for
    a Laplace centered there, the mean absolute deviation. Density along rays
    is mostly zeros with a heavy surface tail, so a standard deviation would
    overshoot the scale several-fold and with it the offset amplitude. Both
    statistics are measured once and mu stays frozen. Returns the gate and
    beta0 (also used to size the offset amplitude).
    """
    sigmas = []
    with torch.no_grad():
        for start in range(0, positions.shape[0], 65536):
            s, _ = backend.evaluate_density(positions[start : start + 65536])
            sigmas.append(s)
    sigma = torch.cat(sigmas)
    mu = float(sigma.mean())
    beta0 = max(float((sigma - mu).abs().mean()), 1e-6)
    return LaplaceGate(mu=mu, beta=beta0, eps=eps), beta0


# ---------------------------------------------------------------------------
# Sticker network


def sticker_encoding(positions: torch.Tensor, num_freqs: int = 5, pad_to: int = 32) -> torch.Tensor:
    """Sinusoidal position features for the sticker, zero-padded to a fixed width."""
    enc = encode_position(positions, num_freqs, include_input=False)
    if enc.shape[-1] > pad_to:
        raise ValueError(f"encoding width {enc.shape[-1]} exceeds pad_to={pad_to}")
    if enc.shape[-1] < pad_to:
        pad = enc.new_zeros(enc.shape[:-1] + (pad_to - enc.shape[-1],))
        enc = torch.cat([enc, pad], dim=-1)
    return enc


class StickerNet(nn.Module):
    """MLP from (position features, signed message bits) to a bounded scalar offset.

    Output is tanh-squashed and scaled by m_max, an amplitude fixed from the
    scene's density spread when the gate is fit.
    """

    def __init__(self, n_bits: int = 48, enc_dim: int = 32, hidden: int = 64, enc_freqs: int = 5):
        super().__init__()
        self.n_bits = n_bits
        self.enc_dim = enc_dim
        self.enc_freqs = enc_freqs
        self.fc1 = nn.Linear(enc_dim + n_bits, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, 1)
        self.register_buffer("m_max", torch.tensor(1.0, dtype=torch.float32))

    def message_bias(self, signed: torch.Tensor) -> torch.Tensor:
        """First-layer bias with the message folded in.

        Because the message is constant across the thousands of sample points
        of a render, its contribution to the first layer collapses to a bias
        vector computed once per call.
        """
        if signed.shape != (self.n_bits,):
            raise ValueError(f"expected ({self.n_bits},) signed bits, got {tuple(signed.shape)}")
        signed = signed.to(self.fc1.weight.dtype)
        return F.linear(signed, self.fc1.weight[:, self.enc_dim :], self.fc1.bias)

    def forward(self, enc: torch.Tensor, signed: torch.Tensor) -> torch.Tensor:
        """enc (N, enc_dim), signed (n_bits,) -> offsets (N,) in [-m_max, m_max]."""
        bias = self.message_bias(signed)
        h = F.relu(enc @ self.fc1.weight[:, : self.enc_dim].T + bias)
        h = F.relu(self.fc2(h))
        return (torch.tanh(self.fc3(h)) * self.m_max).squeeze(-1)


class StickerOutput(NamedTuple):
    sigma_tilde: torch.Tensor
    psi: torch.Tensor
    m: torch.Tensor


ATTACH_MODES = ("learnable", "fixed", "all_points")


class MessageSticker(nn.Module):
    """Gate + offset network plus the attachment rule.

    mode selects how the gate score is used:
      learnable  - soft Laplace CDF score, beta trained
      fixed      - binary mask where the frozen CDF is >= fixed_threshold
      all_points - score 1 everywhere (no gating)
    message_scale is a diagnostic knob: 0 disables the offset exactly, so the
    watermarked render path reproduces the plain render bit for bit.
    """

    def __init__(
        self,
        gate: LaplaceGate,
        net: StickerNet,
        mode: str = "learnable",
        fixed_threshold: float = 0.99,
        message_scale: float = 1.0,
    ):
        super().__init__()
        if mode not in ATTACH_MODES:
            raise ValueError(f"mode must be one of {ATTACH_MODES}, got {mode!r}")
        self.gate = gate
        self.net = net
        self.mode = mode
        self.fixed_threshold = float(fixed_threshold)
        self.message_scale = float(message_scale)

    def importance(self, sigma: torch.Tensor) -> torch.Tensor:
        if self.mode == "learnable":
            return self.gate(sigma)
        if self.mode == "fixed":
            with torch.no_grad():
                return (self.gate(sigma) >= self.fixed_threshold).float()
        return torch.ones_like(sigma)

    def offsets(self, positions: torch.Tensor, message: MessageBits) -> torch.Tensor:
        enc = sticker_encoding(positions, self.net.enc_freqs, self.net.enc_dim)
        return self.net(enc, message.signed()) * self.message_scale

    def attach(self, positions: torch.Tensor, sigma: torch.Tensor, message: MessageBits) -> torch.Tensor:
        """Watermarked density: relu(sigma + psi * m). Never negative."""
        if self.message_scale == 0.0:
            return F.relu(sigma)
        psi = self.importance(sigma)
        m = self.offsets(positions, message)
        return F.relu(sigma + psi * m)


def watermarked_density(
    backend: nn.Module,
    sticker: MessageSticker,
    positions: torch.Tensor,
    message: MessageBits,
) -> StickerOutput:
    """Evaluate the field and the sticker together; returns pieces for losses."""
    sigma, _ = backend.evaluate_density(positions)
    psi = sticker.importance(sigma)
    m = sticker.offsets(positions, message)
    return StickerOutput(sigma_tilde=F.relu(sigma + psi * m), psi=psi, m=m)
