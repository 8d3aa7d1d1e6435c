"""Checkpoint persistence.

One .npz holds the backend, gate, sticker, extractor and classifier weights
plus enough config to rebuild the modules. The owner's message is stored only
as a salted SHA-256 commitment: someone holding the file can verify a claimed
message but cannot read it out.
"""

import json
from dataclasses import asdict

import numpy as np
import torch

from .extractor import ExtractorConfig, ExtractorNet, make_classifier
from .field import FieldConfig, make_backend
from .sticker import LaplaceGate, MessageBits, MessageSticker, StickerNet, commit_message

FORMAT_VERSION = "1"


class CheckpointError(RuntimeError):
    pass


def _pack(prefix: str, module: torch.nn.Module, out: dict) -> None:
    for name, tensor in module.state_dict().items():
        out[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()


def _unpack(prefix: str, module: torch.nn.Module, data) -> None:
    state = {}
    for name, tensor in module.state_dict().items():
        key = f"{prefix}/{name}"
        if key not in data:
            raise CheckpointError(f"checkpoint is missing section {key!r}")
        state[name] = torch.from_numpy(np.asarray(data[key]))
    module.load_state_dict(state)


def save_checkpoint(
    path,
    backend: torch.nn.Module,
    field_cfg: FieldConfig,
    sticker: MessageSticker,
    extractor: ExtractorNet,
    classifier: ExtractorNet,
    extractor_cfg: ExtractorConfig,
    message: MessageBits,
    salt: bytes,
    seed: int,
    extra_config: dict | None = None,
) -> None:
    arrays: dict = {
        "format_version": np.array(FORMAT_VERSION),
        "field_config": np.array(json.dumps(asdict(field_cfg))),
        "extractor_config": np.array(json.dumps({
            "n_bits": extractor_cfg.n_bits, "channels": list(extractor_cfg.channels),
        })),
        "sticker_config": np.array(json.dumps({
            "mode": sticker.mode,
            "fixed_threshold": sticker.fixed_threshold,
            "message_scale": sticker.message_scale,
            "gate_eps": sticker.gate.eps,
            "n_bits": sticker.net.n_bits,
            "enc_dim": sticker.net.enc_dim,
            "enc_freqs": sticker.net.enc_freqs,
            "hidden": sticker.net.fc2.out_features,
        })),
        "message_commitment": np.array(commit_message(message, salt)),
        "message_salt": np.array(salt.hex()),
        "seed": np.array(seed),
        "config": np.array(json.dumps(extra_config or {})),
    }
    _pack("field", backend, arrays)
    _pack("gate", sticker.gate, arrays)
    _pack("sticker", sticker.net, arrays)
    _pack("extractor", extractor, arrays)
    _pack("classifier", classifier, arrays)
    np.savez(path, **arrays)


def load_checkpoint(path) -> dict:
    """Rebuild all modules. Returns a dict with backend, sticker, extractor,
    classifier, configs, commitment, salt and seed."""
    try:
        data = np.load(path, allow_pickle=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if "format_version" not in data:
        raise CheckpointError("checkpoint is missing section 'format_version'")
    version = str(data["format_version"])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r}, want {FORMAT_VERSION!r}")

    field_cfg = FieldConfig(**json.loads(str(data["field_config"])))
    ec = json.loads(str(data["extractor_config"]))
    extractor_cfg = ExtractorConfig(n_bits=ec["n_bits"], channels=tuple(ec["channels"]))
    sc = json.loads(str(data["sticker_config"]))

    backend = make_backend(field_cfg)
    gate = LaplaceGate(mu=0.0, beta=1.0, eps=sc["gate_eps"])
    net = StickerNet(n_bits=sc["n_bits"], enc_dim=sc["enc_dim"], hidden=sc["hidden"], enc_freqs=sc["enc_freqs"])
    sticker = MessageSticker(
        gate, net, mode=sc["mode"], fixed_threshold=sc["fixed_threshold"], message_scale=sc["message_scale"],
    )
    extractor = ExtractorNet(extractor_cfg)
    classifier = make_classifier(extractor_cfg)
    _unpack("field", backend, data)
    _unpack("gate", sticker.gate, data)
    _unpack("sticker", sticker.net, data)
    _unpack("extractor", extractor, data)
    _unpack("classifier", classifier, data)
    for module in (backend, sticker, extractor, classifier):
        for p in module.parameters():
            p.requires_grad_(False)
    return {
        "backend": backend,
        "field_config": field_cfg,
        "sticker": sticker,
        "extractor": extractor,
        "classifier": classifier,
        "extractor_config": extractor_cfg,
        "message_commitment": str(data["message_commitment"]),
        "message_salt": bytes.fromhex(str(data["message_salt"])),
        "seed": int(data["seed"]),
        "config": json.loads(str(data["config"])),
    }


def verify_message(ckpt: dict, message: MessageBits) -> bool:
    return commit_message(message, ckpt["message_salt"]) == ckpt["message_commitment"]


def save_field(path, backend: torch.nn.Module, field_cfg: FieldConfig, seed: int) -> None:
    """Stage-1 intermediate: just the field, for the embed step to pick up."""
    arrays: dict = {
        "format_version": np.array(FORMAT_VERSION),
        "field_config": np.array(json.dumps(asdict(field_cfg))),
        "seed": np.array(seed),
    }
    _pack("field", backend, arrays)
    np.savez(path, **arrays)


def load_field(path) -> dict:
    try:
        data = np.load(path, allow_pickle=False)
    except Exception as e:
        raise CheckpointError(f"cannot read field checkpoint {path}: {e}") from e
    if "format_version" not in data or str(data["format_version"]) != FORMAT_VERSION:
        raise CheckpointError("field checkpoint version missing or unsupported")
    field_cfg = FieldConfig(**json.loads(str(data["field_config"])))
    backend = make_backend(field_cfg)
    _unpack("field", backend, data)
    for p in backend.parameters():
        p.requires_grad_(False)
    return {"backend": backend, "field_config": field_cfg, "seed": int(data["seed"])}
