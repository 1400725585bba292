"""Versioned checkpoint files: a named parameter map plus a config echo."""

from __future__ import annotations

import io
import os

import torch

FORMAT = "rdcodec-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _write(path, payload: dict) -> None:
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def _read(path, kind: str) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as err:
        raise CheckpointError(f"{path}: unreadable checkpoint ({err})") from err
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if payload.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if payload.get("kind") != kind:
        raise CheckpointError(f"{path}: holds a {payload.get('kind')!r} model, expected {kind!r}")
    return payload


def save_checkpoint(path, model, extra: dict | None = None) -> None:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    _write(path, {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "kind": "codec",
        "config": model.cfg.to_dict(),
        "trained_stage": int(getattr(model, "trained_stage", 0)),
        "anchor_lambdas": list(model.gains.anchor_lambdas),
        "aux_lambdas": list(model.gains.aux_lambdas),
        "extra": extra or {},
        "params": state,
    })


def load_checkpoint(path):
    from .codec_core import ModelConfig, VersatileCodec
    from .gain_control import GainSet

    payload = _read(path, "codec")
    cfg = ModelConfig(**payload["config"])
    model = VersatileCodec(cfg)
    model.gains = GainSet(cfg.c_y, cfg.c_z, cfg.c_s, payload["anchor_lambdas"], payload["aux_lambdas"])
    try:
        model.load_state_dict(payload["params"])
    except RuntimeError as err:
        raise CheckpointError(f"{path}: parameters do not match the stored config ({err})") from err
    model.trained_stage = payload["trained_stage"]
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    model.update_tables()
    return model


def save_encoder(path, encoder, extra: dict | None = None) -> None:
    _write(path, {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "kind": "proxy",
        "config": {"dim": encoder.dim, "width": encoder.backbone[0].out_channels},
        "extra": extra or {},
        "params": {k: v.detach().clone() for k, v in encoder.state_dict().items()},
    })


def load_encoder(path):
    from .cognition import ContrastiveEncoder

    payload = _read(path, "proxy")
    enc = ContrastiveEncoder(**payload["config"])
    enc.load_state_dict(payload["params"])
    return enc.freeze()
