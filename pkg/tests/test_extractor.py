"""Decoder and classifier networks, their losses, and the bit-accuracy metric."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from geomark.extractor import (
    ExtractorConfig,
    ExtractorNet,
    bit_accuracy,
    extract_message,
    logits_to_bits,
    make_classifier,
)
from geomark.sticker import MessageBits
from geomark.trainer import classifier_loss, message_loss


def test_zero_head_decides_all_ones():
    torch.manual_seed(0)
    net = ExtractorNet(ExtractorConfig(n_bits=16))
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
    logits = net(torch.rand(40, 40, 3))
    assert torch.all(logits == 0)
    # tie rule: logit exactly 0 decides bit 1
    assert logits_to_bits(logits).tolist() == [1] * 16


def test_extractor_deterministic():
    torch.manual_seed(1)
    net = ExtractorNet(ExtractorConfig(n_bits=8))
    img = torch.rand(64, 64, 3)
    assert torch.equal(net(img), net(img))


def test_extractor_resolution_tolerance():
    torch.manual_seed(2)
    net = ExtractorNet(ExtractorConfig(n_bits=48))
    for size in (32, 64, 100, 400):
        logits = net(torch.rand(size, size, 3))
        assert logits.shape == (48,)
        assert torch.all(torch.isfinite(logits))


def test_extractor_rejects_small_images():
    net = ExtractorNet(ExtractorConfig(n_bits=8))
    with pytest.raises(ValueError):
        net(torch.rand(16, 64, 3))
    with pytest.raises(ValueError):
        net(torch.rand(64, 31, 3))


def test_extractor_batched_matches_single():
    torch.manual_seed(3)
    net = ExtractorNet(ExtractorConfig(n_bits=8))
    imgs = torch.rand(4, 32, 32, 3)
    batched = net(imgs)
    assert batched.shape == (4, 8)
    for i in range(4):
        assert torch.allclose(batched[i], net(imgs[i]), atol=1e-6)


def test_classifier_single_logit_and_midpoint_probability():
    torch.manual_seed(4)
    clf = make_classifier(ExtractorConfig(n_bits=48))
    with torch.no_grad():
        clf.head.weight.zero_()
        clf.head.bias.zero_()
    logit = clf(torch.rand(32, 32, 3))
    assert logit.shape == (1,)
    assert torch.sigmoid(logit).item() == pytest.approx(0.5)


def test_extract_message_round_trip_types():
    torch.manual_seed(5)
    net = ExtractorNet(ExtractorConfig(n_bits=8))
    msg = extract_message(net, torch.rand(32, 32, 3))
    assert isinstance(msg, MessageBits)
    assert len(msg) == 8


# ---------------------------------------------------------------------------
# Losses


def test_message_loss_maximum_entropy():
    msg = MessageBits(bits=(1, 0, 1, 1))
    loss = message_loss(torch.zeros(4), msg)
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-6)


def test_message_loss_saturated_correct_prediction():
    msg = MessageBits(bits=(1, 0, 1))
    logits = torch.tensor([20.0, -20.0, 20.0])
    assert message_loss(logits, msg).item() < 1e-8


def test_message_loss_hand_value():
    # both bits off by logit magnitude 0.5: mean of softplus(-0.5) twice
    msg = MessageBits(bits=(1, 0))
    loss = message_loss(torch.tensor([0.5, -0.5]), msg)
    want = math.log(1.0 + math.exp(-0.5))
    assert loss.item() == pytest.approx(want, abs=1e-6)
    assert loss.item() == pytest.approx(0.4741, abs=1e-4)


def test_message_loss_length_mismatch():
    with pytest.raises(ValueError):
        message_loss(torch.zeros(5), MessageBits(bits=(1, 0)))


def test_message_loss_permutation_equivariant():
    rng = np.random.default_rng(6)
    logits = torch.from_numpy(rng.normal(size=12))
    msg = MessageBits.random(12, rng)
    perm = rng.permutation(12)
    permuted = MessageBits(bits=tuple(msg.bits[i] for i in perm))
    assert message_loss(logits, msg).item() == pytest.approx(
        message_loss(logits[perm.copy()], permuted).item(), abs=1e-7
    )


def test_message_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    logits = torch.from_numpy(rng.normal(size=8)).requires_grad_(True)
    msg = MessageBits.random(8, rng)
    loss = message_loss(logits, msg)
    loss.backward()
    h = 1e-5
    for i in range(8):
        plus = logits.detach().clone()
        plus[i] += h
        minus = logits.detach().clone()
        minus[i] -= h
        fd = (message_loss(plus, msg) - message_loss(minus, msg)).item() / (2 * h)
        assert abs(logits.grad[i].item() - fd) / max(abs(fd), 1e-8) < 1e-5


def test_classifier_loss_values():
    assert classifier_loss(torch.tensor(0.5), torch.tensor(0.5)).item() == pytest.approx(
        math.log(2.0), abs=1e-6
    )
    tiny = classifier_loss(torch.tensor(1.0 - 1e-9), torch.tensor(1e-9))
    assert tiny.item() == pytest.approx(0.0, abs=1e-6)
    val = classifier_loss(torch.tensor(0.9), torch.tensor(0.2))
    want = (-math.log(0.9) - math.log(0.8)) / 2.0
    assert val.item() == pytest.approx(want, abs=1e-6)
    assert val.item() == pytest.approx(0.1643, abs=1e-4)


# ---------------------------------------------------------------------------
# Bit accuracy


def test_bit_accuracy_extremes():
    msg = MessageBits.random(48, np.random.default_rng(8))
    assert bit_accuracy(msg, msg) == 1.0
    assert bit_accuracy(msg.complement(), msg) == 0.0


def test_bit_accuracy_counts_matches():
    truth = MessageBits(bits=(1, 1, 0, 0))
    decoded = MessageBits(bits=(1, 0, 0, 1))
    assert bit_accuracy(decoded, truth) == pytest.approx(0.5)


def test_bit_accuracy_complement_identity():
    rng = np.random.default_rng(9)
    for _ in range(50):
        truth = MessageBits.random(48, rng)
        decoded = MessageBits.random(48, rng)
        total = bit_accuracy(decoded, truth) + bit_accuracy(decoded.complement(), truth)
        assert total == pytest.approx(1.0)


def test_bit_accuracy_random_decisions_monte_carlo():
    # independent uniform decisions over 10^4 trials average to 0.5 +- 0.01
    rng = np.random.default_rng(10)
    truth = MessageBits.random(48, rng)
    accs = np.empty(10_000)
    for i in range(10_000):
        accs[i] = bit_accuracy(MessageBits.random(48, rng), truth)
    assert abs(accs.mean() - 0.5) < 0.01


def test_bit_accuracy_length_mismatch():
    with pytest.raises(ValueError):
        bit_accuracy(MessageBits(bits=(1, 0)), MessageBits(bits=(1, 0, 1)))


def test_extractor_input_normalization_changes_output():
    # black and white frames must not collapse to the same features
    torch.manual_seed(11)
    net = ExtractorNet(ExtractorConfig(n_bits=8))
    black = net(torch.zeros(32, 32, 3))
    white = net(torch.ones(32, 32, 3))
    assert not torch.allclose(black, white)
