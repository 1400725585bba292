"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace

from .codec_core import ModelConfig
from .cognition import ProxyConfig
from .gain_control import STAGE1_LAMBDAS, STAGE2_LAMBDAS
from .training import StageIConfig, StageIIConfig


class ConfigError(ValueError):
    pass


# "original": probe fitted on uncompressed images. "cognition": fitted on
# beta=1 reconstructions at every gain anchor, the downstream fine-tune setup.
PROBE_DATA = ("original", "cognition")


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "builtin"
    train_count: int = 16000
    val_count: int = 200
    test_count: int = 200
    seed: int = 0

    proxy_checkpoint: str = "runs/default/proxy.ckpt"
    stage1_checkpoint: str = "runs/default/stage1.ckpt"
    stage2_checkpoint: str = "runs/default/stage2.ckpt"
    out_dir: str = "runs/default"

    c_y: int = 96
    c_z: int = 48
    c_s: int = 64
    hidden: int = 64
    scalable_hidden: int = 16
    residual_hidden: int = 32
    sigma_min: float = 0.11

    proxy_steps: int = 2000
    proxy_batch_size: int = 64
    proxy_lr: float = 1e-3
    proxy_queue_size: int = 4096
    proxy_tau: float = 0.07
    proxy_momentum: float = 0.99
    proxy_dim: int = 128
    proxy_width: int = 32

    stage1_lambdas: tuple = STAGE1_LAMBDAS
    stage1_lambda_local: float = 1e-5
    stage1_steps: int = 6000
    stage1_batch_size: int = 16
    stage1_lr: float = 1e-3
    stage1_gain_lr: float = 3e-3
    stage1_tau: float = 0.07
    stage1_queue_size: int = 4096

    stage2_lambdas: tuple = STAGE2_LAMBDAS
    stage2_steps: int = 4000
    stage2_batch_size: int = 16
    stage2_lr: float = 1e-3
    stage2_gain_lr: float = 3e-3

    sweep_alphas: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    sweep_betas: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    sweep_alpha_s: float = 0.0
    probe_data: str = "cognition"
    probe_count: int = 1000

    # -- derived configs ----------------------------------------------------
    def model_config(self) -> ModelConfig:
        return ModelConfig(
            c_y=self.c_y, c_z=self.c_z, c_s=self.c_s, hidden=self.hidden,
            scalable_hidden=self.scalable_hidden, residual_hidden=self.residual_hidden,
            num_anchors=len(self.stage1_lambdas), sigma_min=self.sigma_min,
        )

    def proxy_config(self) -> ProxyConfig:
        return ProxyConfig(
            dim=self.proxy_dim, width=self.proxy_width, queue_size=self.proxy_queue_size,
            tau=self.proxy_tau, momentum=self.proxy_momentum, steps=self.proxy_steps,
            batch_size=self.proxy_batch_size, lr=self.proxy_lr, seed=self.seed,
        )

    def stage1_config(self) -> StageIConfig:
        return StageIConfig(
            lambdas=tuple(self.stage1_lambdas), lambda_local=self.stage1_lambda_local,
            steps=self.stage1_steps, batch_size=self.stage1_batch_size, lr=self.stage1_lr,
            gain_lr=self.stage1_gain_lr, tau=self.stage1_tau, queue_size=self.stage1_queue_size,
            seed=self.seed,
        )

    def stage2_config(self) -> StageIIConfig:
        return StageIIConfig(
            lambdas=tuple(self.stage2_lambdas), steps=self.stage2_steps,
            batch_size=self.stage2_batch_size, lr=self.stage2_lr, gain_lr=self.stage2_gain_lr,
            seed=self.seed,
        )

    # -- text form ----------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides: dict) -> "RunConfig":
        cfg = replace(self, **_coerce(overrides))
        if cfg.probe_data not in PROBE_DATA:
            raise ConfigError(f"probe_data must be one of {PROBE_DATA}, got {cfg.probe_data!r}")
        return cfg


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(raw: dict) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        default = _FIELDS[key].default
        if not isinstance(value, str):
            out[key] = value
            continue
        try:
            if isinstance(default, bool):
                out[key] = value.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                out[key] = int(value)
            elif isinstance(default, float):
                out[key] = float(value)
            elif isinstance(default, tuple):
                out[key] = tuple(float(v) for v in value.split(",") if v.strip())
            else:
                out[key] = value.strip()
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from None
    return out


def parse_config_text(text: str) -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        raw[key] = value
    return raw


def load_config(path: str | None = None, overrides: dict | None = None, env=os.environ) -> RunConfig:
    """Defaults, then the config file, then explicit overrides, then ``RDC_SEED``."""
    cfg = RunConfig()
    if path:
        with open(path) as fh:
            cfg = cfg.with_overrides(parse_config_text(fh.read()))
    if overrides:
        cfg = cfg.with_overrides({k: v for k, v in overrides.items() if v is not None})
    if env.get("RDC_SEED"):
        cfg = cfg.with_overrides({"seed": env["RDC_SEED"]})
    return cfg
