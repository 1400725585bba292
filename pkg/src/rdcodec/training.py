"""Two-stage optimization of the versatile codec.

Stage I trains the primary branch and the ``y``/``z`` gains with the
cognition-oriented objective: rate plus a contrastive term scored by the frozen
proxy encoder plus a penalty on reconstructed values outside [0, 1]. Stage II
freezes all of that and trains the auxiliary branch with rate plus MSE.

Rates are expressed in bits per pixel and squared errors on the 0-255 scale
(``DISTORTION_SCALE``), the usual convention for the published lambda sets.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .codec_core import ModelConfig, VersatileCodec
from .cognition import ContrastiveEncoder, NegativeQueue, augment, info_nce
from .entropy import estimate_rate
from .gain_control import STAGE1_LAMBDAS, STAGE2_LAMBDAS

log = logging.getLogger(__name__)

DISTORTION_SCALE = 255.0 ** 2


class TrainingError(RuntimeError):
    pass


class FrozenParameterError(TrainingError):
    pass


@dataclass
class StageIConfig:
    lambdas: tuple = STAGE1_LAMBDAS
    lambda_local: float = 1e-5
    steps: int = 6000
    batch_size: int = 16
    lr: float = 1e-3
    gain_lr: float = 3e-3
    tau: float = 0.07
    queue_size: int = 4096
    key_augment: float = 0.5
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StageIIConfig:
    lambdas: tuple = STAGE2_LAMBDAS
    steps: int = 4000
    batch_size: int = 16
    lr: float = 1e-3
    gain_lr: float = 3e-3
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# -- loss terms -------------------------------------------------------------

def local_mse(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean over all elements of ``(x_hat - x)^2`` where ``x_hat`` leaves [0, 1]."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    outside = (x_hat < 0) | (x_hat > 1)
    return torch.where(outside, (x_hat - x) ** 2, torch.zeros_like(x_hat)).sum() / x.numel()


def _pixels(x: torch.Tensor) -> int:
    return x.shape[0] * x.shape[-2] * x.shape[-1]


def stage1_loss(
    x: torch.Tensor,
    model: VersatileCodec,
    n: int,
    encoder: ContrastiveEncoder,
    negatives: torch.Tensor,
    cfg: StageIConfig,
    generator: torch.Generator | None = None,
    lambda_n: float | None = None,
) -> dict:
    """Stage-I terms for a batch at gain anchor ``n``; ``total`` is the objective.

    The returned ``keys`` are the positive keys, to be enqueued after the step.
    """
    lam = cfg.lambdas[n] if lambda_n is None else lambda_n
    g = model.gains
    out = model.forward_primary(x, g.anchor(n, "y"), g.anchor(n, "z"), "noise", generator)
    pixels = _pixels(x)
    rate_y = estimate_rate(out["lik_y"]) / pixels
    rate_z = estimate_rate(out["lik_z"]) / pixels
    q = encoder(out["x_hat1"])
    with torch.no_grad():
        keys = encoder(augment(x, generator, cfg.key_augment))
    contrastive = info_nce(q, keys, negatives, cfg.tau)
    local = local_mse(x, out["x_hat1"])
    total = rate_y + rate_z + lam * contrastive + cfg.lambda_local * DISTORTION_SCALE * local
    terms = {"rate_y": rate_y, "rate_z": rate_z, "contrastive": contrastive, "local": local, "total": total}
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise TrainingError(f"non-finite stage-I term {name!r}")
    terms["keys"] = keys
    terms["x_hat1"] = out["x_hat1"]
    return terms


def stage2_loss(
    x: torch.Tensor,
    model: VersatileCodec,
    n: int,
    m: int,
    cfg: StageIIConfig,
    generator: torch.Generator | None = None,
    lambda_m: float | None = None,
) -> dict:
    """Stage-II terms: scalable-stream rate plus ``lambda_m`` times MSE of ``x_hat2``.

    The primary branch runs in inference (rounding) mode without gradients.
    """
    lam = cfg.lambdas[m] if lambda_m is None else lambda_m
    g = model.gains
    with torch.no_grad():
        primary = model.forward_primary(x, g.anchor(n, "y"), g.anchor(n, "z"), "round")
    aux = model.forward_aux(primary, g.anchor(m, "s"), "noise", generator)
    pixels = _pixels(x)
    rate_s = estimate_rate(aux["lik_s"]) / pixels if aux["lik_s"] is not None else x.new_zeros(())
    mse = torch.mean((aux["x_hat2"] - x) ** 2)
    total = rate_s + lam * DISTORTION_SCALE * mse
    terms = {"rate_s": rate_s, "mse": mse, "total": total}
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise TrainingError(f"non-finite stage-II term {name!r}")
    terms["x_hat1"] = primary["x_hat1"]
    terms["x_hat2"] = aux["x_hat2"]
    return terms


# -- helpers ------------------------------------------------------------------

def parameter_fingerprint(params) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class DivergenceMonitor:
    """Flags a run whose loss exceeds ``factor`` times its first value for ``patience`` steps."""

    def __init__(self, factor: float = 1e3, patience: int = 100):
        self.factor = factor
        self.patience = patience
        self.initial = None
        self.streak = 0

    def update(self, loss: float) -> None:
        if self.initial is None:
            self.initial = abs(loss) if loss != 0 else 1e-12
            return
        self.streak = self.streak + 1 if loss > self.factor * self.initial else 0
        if self.streak >= self.patience:
            raise TrainingError(f"training diverged: loss {loss:.4g} vs initial {self.initial:.4g}")


class CsvLog:
    def __init__(self, path: str | os.PathLike | None, fields: list[str]):
        self.fields = fields
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=fields)
            self._writer.writeheader()

    def write(self, row: dict) -> None:
        if self._fh is not None:
            self._writer.writerow({k: row[k] for k in self.fields})

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _batches(num: int, batch_size: int, generator: torch.Generator):
    while True:
        yield torch.randint(num, (batch_size,), generator=generator)


def _optimizer(params_main, params_gain, lr: float, gain_lr: float):
    return torch.optim.Adam([{"params": params_main, "lr": lr}, {"params": params_gain, "lr": gain_lr}])


@torch.no_grad()
def anchor_rates(model: VersatileCodec, images, mode: str = "round") -> list[float]:
    """Estimated bpp per primary gain anchor on ``images``."""
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    g = model.gains
    rates = []
    for n in range(g.num_anchors):
        out = model.forward_primary(x, g.anchor(n, "y"), g.anchor(n, "z"), mode)
        rates.append(float(estimate_rate(out["lik_y"], out["lik_z"]) / _pixels(x)))
    return rates


# -- stage drivers ------------------------------------------------------------

def train_stage1(
    cfg: StageIConfig,
    images: np.ndarray,
    encoder: ContrastiveEncoder,
    model_cfg: ModelConfig | None = None,
    out_dir: str | os.PathLike | None = None,
    log_every: int = 100,
) -> VersatileCodec:
    """Train the primary branch from scratch; the proxy encoder stays frozen."""
    if not encoder.frozen:
        raise TrainingError("the proxy encoder must be pretrained and frozen before stage I")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = VersatileCodec(model_cfg or ModelConfig())
    for p in model.auxiliary_parameters():
        p.requires_grad_(False)
    gains = [model.gains.log_y, model.gains.log_z]
    main = [p for p in model.primary_parameters() if all(p is not q for q in gains)]
    opt = _optimizer(main, gains, cfg.lr, cfg.gain_lr)
    data = torch.from_numpy(np.asarray(images, dtype=np.float32))
    enc_hash = encoder.fingerprint()

    queue = NegativeQueue(cfg.queue_size, encoder.dim)
    with torch.no_grad():
        warm = torch.randint(len(data), (cfg.queue_size,), generator=gen)
        for i in range(0, cfg.queue_size, 256):
            queue.enqueue(encoder(augment(data[warm[i:i + 256]], gen, cfg.key_augment)))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    fields = ["step", "n", "lambda_n", "rate_y", "rate_z", "contrastive", "local", "total"]
    csv_log = CsvLog(out / "stage1_log.csv" if out else None, fields)
    monitor = DivergenceMonitor()
    batches = _batches(len(data), cfg.batch_size, gen)
    model.train()
    try:
        for step in range(cfg.steps):
            n = int(torch.randint(len(cfg.lambdas), (1,), generator=gen))
            x = data[next(batches)]
            terms = stage1_loss(x, model, n, encoder, queue.contents(), cfg, gen)
            opt.zero_grad()
            terms["total"].backward()
            opt.step()
            queue.enqueue(terms["keys"])
            row = {k: float(terms[k].detach()) for k in ("rate_y", "rate_z", "contrastive", "local", "total")}
            row.update(step=step, n=n, lambda_n=cfg.lambdas[n])
            csv_log.write(row)
            monitor.update(row["total"])
            if log_every and step % log_every == 0:
                log.info("stage1 %d n=%d bpp=%.4f C=%.4f local=%.5f", step, n,
                         row["rate_y"] + row["rate_z"], row["contrastive"], row["local"])
    finally:
        csv_log.close()
    opt.zero_grad(set_to_none=True)
    if encoder.fingerprint() != enc_hash:
        raise FrozenParameterError("proxy encoder changed during stage I")
    model.eval()
    model.trained_stage = 1
    model.update_tables()
    if out is not None:
        save_checkpoint(out / "stage1.ckpt", model, extra={"stage1": cfg.to_dict()})
    return model


def train_stage2(
    cfg: StageIIConfig,
    model: VersatileCodec,
    images: np.ndarray,
    out_dir: str | os.PathLike | None = None,
    log_every: int = 100,
) -> VersatileCodec:
    """Train the auxiliary branch on top of a frozen stage-I model (updated in place)."""
    if getattr(model, "trained_stage", 0) < 1:
        raise TrainingError("stage II needs a stage-I model")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    frozen = list(model.primary_parameters())
    for p in frozen:
        p.requires_grad_(False)
        p.grad = None
    frozen_hash = parameter_fingerprint(frozen)
    for p in model.auxiliary_parameters():
        p.requires_grad_(True)
    main = [p for p in model.auxiliary_parameters() if p is not model.gains.log_s]
    opt = _optimizer(main, [model.gains.log_s], cfg.lr, cfg.gain_lr)
    data = torch.from_numpy(np.asarray(images, dtype=np.float32))
    num_primary = model.gains.num_anchors

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    fields = ["step", "n", "m", "lambda_m", "rate_s", "mse", "total"]
    csv_log = CsvLog(out / "stage2_log.csv" if out else None, fields)
    monitor = DivergenceMonitor()
    batches = _batches(len(data), cfg.batch_size, gen)
    model.train()
    try:
        for step in range(cfg.steps):
            n = int(torch.randint(num_primary, (1,), generator=gen))
            m = int(torch.randint(len(cfg.lambdas), (1,), generator=gen))
            x = data[next(batches)]
            terms = stage2_loss(x, model, n, m, cfg, gen)
            opt.zero_grad()
            terms["total"].backward()
            for p in frozen:
                if p.grad is not None:
                    raise FrozenParameterError("gradient reached a frozen primary-branch parameter")
            opt.step()
            row = {k: float(terms[k].detach()) for k in ("rate_s", "mse", "total")}
            row.update(step=step, n=n, m=m, lambda_m=cfg.lambdas[m])
            csv_log.write(row)
            monitor.update(row["total"])
            if log_every and step % log_every == 0:
                log.info("stage2 %d n=%d m=%d bpp_s=%.4f mse=%.5f", step, n, m, row["rate_s"], row["mse"])
    finally:
        csv_log.close()
    opt.zero_grad(set_to_none=True)
    if parameter_fingerprint(frozen) != frozen_hash:
        raise FrozenParameterError("primary branch changed during stage II")
    model.eval()
    model.trained_stage = 2
    model.update_tables()
    if out is not None:
        save_checkpoint(out / "stage2.ckpt", model, extra={"stage2": cfg.to_dict()})
    return model
