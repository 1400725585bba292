"""Neural transforms of the versatile codec.

The primary branch is a plain convolutional hyperprior codec (``g_a``, ``g_s``,
``h_a``, ``h_s``). The auxiliary branch codes the quantization error of the
main latent through a three-layer scalable transform and turns the corrected
latent plus decoder feature priors into a pixel residual ``r``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from . import gain_control
from .entropy import FactorizedPrior, GaussianConditional
from .gain_control import GainSet

PAD_MULTIPLE = 64


class PaddingRequiredError(ValueError):
    def __init__(self, height: int, width: int, multiple: int = PAD_MULTIPLE):
        super().__init__(
            f"input of size {height}x{width} must be padded to a multiple of {multiple}"
        )
        self.multiple = multiple


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    c_y: int = 96
    c_z: int = 48
    c_s: int = 64
    hidden: int = 64
    scalable_hidden: int = 16
    residual_hidden: int = 32
    num_anchors: int = 6
    sigma_min: float = 0.11
    output_bias: float = 0.5
    use_scalable: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def _down(cin: int, cout: int, k: int = 5) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=2, padding=k // 2)


def _up(cin: int, cout: int, k: int = 5) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(cin, cout, k, stride=2, padding=k // 2, output_padding=1)


def _up4(cin: int, cout: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)


def _zero_(layer: nn.Module, bias: float = 0.0) -> nn.Module:
    nn.init.zeros_(layer.weight)
    nn.init.constant_(layer.bias, bias)
    return layer


class TransformStack(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden
        self.cfg = cfg
        self.g_a = nn.Sequential(
            _down(3, h), nn.LeakyReLU(),
            _down(h, h), nn.LeakyReLU(),
            _down(h, h), nn.LeakyReLU(),
            _down(h, cfg.c_y),
        )
        self.g_s = nn.ModuleList([_up(cfg.c_y, h), _up(h, h), _up(h, h), _up(h, 3)])
        _zero_(self.g_s[-1], cfg.output_bias)
        self.h_a = nn.Sequential(
            nn.Conv2d(cfg.c_y, h, 3, padding=1), nn.LeakyReLU(),
            _down(h, h), nn.LeakyReLU(),
            _down(h, cfg.c_z),
        )
        self.h_s = nn.Sequential(
            _up(cfg.c_z, h), nn.LeakyReLU(),
            _up(h, h), nn.LeakyReLU(),
            nn.Conv2d(h, 2 * cfg.c_y, 3, padding=1),
        )
        with torch.no_grad():
            self.h_s[-1].bias[cfg.c_y:] += 1.0


class AuxiliaryStack(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        a, r = cfg.scalable_hidden, cfg.residual_hidden
        self.cfg = cfg
        self.scalable_enc = nn.Sequential(
            nn.Conv2d(cfg.c_y, a, 3, padding=1), nn.LeakyReLU(),
            nn.Conv2d(a, a, 3, padding=1), nn.LeakyReLU(),
            nn.Conv2d(a, cfg.c_s, 3, padding=1),
        )
        self.scalable_dec = nn.Sequential(
            nn.Conv2d(cfg.c_s, a, 3, padding=1), nn.LeakyReLU(),
            nn.Conv2d(a, a, 3, padding=1), nn.LeakyReLU(),
            _zero_(nn.Conv2d(a, cfg.c_y, 3, padding=1)),
        )
        self.res_in = nn.Conv2d(cfg.c_y, r, 1)
        self.res_up = nn.ModuleList([_up4(r, r), _up4(r, r), _up4(r, r), _up4(r, 3)])
        _zero_(self.res_up[-1])
        self.res_prior = nn.ModuleList([nn.Conv2d(cfg.hidden, r, 1) for _ in range(3)])

    def residual(self, y2_hat: torch.Tensor, priors) -> torch.Tensor:
        t = self.res_in(y2_hat)
        for up, side, f in zip(self.res_up[:3], self.res_prior, priors):
            t = up(t)
            if f.shape[-2:] != t.shape[-2:]:
                raise ConfigurationError(
                    f"prior of spatial size {tuple(f.shape[-2:])} does not match {tuple(t.shape[-2:])}"
                )
            t = F.leaky_relu(t + side(f))
        return self.res_up[3](t)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"expected a CxHxW or BxCxHxW tensor, got shape {tuple(x.shape)}")


def _unbatch(t: torch.Tensor, single: bool) -> torch.Tensor:
    return t[0] if single else t


class VersatileCodec(nn.Module):
    """Primary hyperprior codec with gain units plus the auxiliary scalable branch.

    Methods accept single images (``C x H x W``) or batches. Gains are passed
    as vectors so callers choose between anchors (training) and interpolated
    values (inference).
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.transforms = TransformStack(cfg)
        self.aux = AuxiliaryStack(cfg)
        self.gains = GainSet(cfg.c_y, cfg.c_z, cfg.c_s)
        if self.gains.num_anchors != cfg.num_anchors:
            raise ConfigurationError("num_anchors must match the anchor lambda sets")
        self.gaussian = GaussianConditional(cfg.sigma_min)
        self.z_prior = FactorizedPrior(cfg.c_z)
        self.s_prior = FactorizedPrior(cfg.c_s)

    # -- primary branch -------------------------------------------------
    def analyze(self, x: torch.Tensor, gain_y: torch.Tensor | None = None):
        """``y = g_a(x)`` and ``z = h_a(y * G_y)`` (``h_a(y)`` without a gain)."""
        xb, single = _batched(x)
        hh, ww = xb.shape[-2:]
        if hh % PAD_MULTIPLE or ww % PAD_MULTIPLE:
            raise PaddingRequiredError(hh, ww)
        y = self.transforms.g_a(xb)
        z = self.transforms.h_a(y if gain_y is None else gain_control.scaled(y, gain_y))
        return _unbatch(y, single), _unbatch(z, single)

    def synthesize(self, y_hat: torch.Tensor):
        """Decode ``y_hat`` to an unclipped image and the priors ``f1, f2, f3``."""
        yb, single = _batched(y_hat)
        if yb.shape[1] != self.cfg.c_y:
            raise ConfigurationError(f"expected {self.cfg.c_y} latent channels, got {yb.shape[1]}")
        g_s = self.transforms.g_s
        priors = []
        t = yb
        for layer in g_s[:3]:
            t = F.leaky_relu(layer(t))
            priors.append(t)
        x_hat = g_s[3](t)
        return _unbatch(x_hat, single), [_unbatch(f, single) for f in priors]

    def hyper_decode(self, z_hat: torch.Tensor):
        zb, single = _batched(z_hat)
        if zb.shape[1] != self.cfg.c_z:
            raise ConfigurationError(f"expected {self.cfg.c_z} hyper channels, got {zb.shape[1]}")
        params = self.transforms.h_s(zb)
        mu, raw = params.chunk(2, dim=1)
        sigma = torch.clamp_min(raw, self.cfg.sigma_min)
        return _unbatch(mu, single), _unbatch(sigma, single)

    # -- auxiliary branch -----------------------------------------------
    def scalable_encode(self, err: torch.Tensor) -> torch.Tensor:
        eb, single = _batched(err)
        return _unbatch(self.aux.scalable_enc(eb), single)

    def scalable_decode(self, s_hat: torch.Tensor) -> torch.Tensor:
        sb, single = _batched(s_hat)
        return _unbatch(self.aux.scalable_dec(sb), single)

    def reconstruct_residual(self, y2_hat: torch.Tensor, priors) -> torch.Tensor:
        yb, single = _batched(y2_hat)
        pb = [_batched(f)[0] for f in priors]
        return _unbatch(self.aux.residual(yb, pb), single)

    # -- composite passes used by training and evaluation ---------------
    def forward_primary(self, x, gain_y, gain_z, mode="noise", generator=None) -> dict:
        y, z = self.analyze(x, gain_y)
        z_hat = gain_control.quantize(z, gain_z, mode, generator)
        mu, sigma = self.hyper_decode(z_hat)
        y_hat = gain_control.quantize(y, gain_y, mode, generator)
        lik_y = self.gaussian.likelihood(
            gain_control.scaled(y_hat, gain_y),
            gain_control.scaled(mu, gain_y),
            gain_control.scaled(sigma, gain_y),
        )
        lik_z = self.z_prior.likelihood(gain_control.scaled(z_hat, gain_z))
        x_hat1, priors = self.synthesize(y_hat)
        return {
            "y": y, "z": z, "y_hat": y_hat, "z_hat": z_hat, "mu": mu, "sigma": sigma,
            "x_hat1": x_hat1, "priors": priors, "lik_y": lik_y, "lik_z": lik_z,
        }

    def forward_aux(self, primary: dict, gain_s, mode="noise", generator=None) -> dict:
        y, y_hat = primary["y"], primary["y_hat"]
        if self.cfg.use_scalable:
            s = self.scalable_encode(y - y_hat)
            s_hat = gain_control.quantize(s, gain_s, mode, generator)
            err_hat = self.scalable_decode(s_hat)
            lik_s = self.s_prior.likelihood(gain_control.scaled(s_hat, gain_s))
        else:
            s = s_hat = lik_s = None
            err_hat = torch.zeros_like(y_hat)
        y2_hat = y_hat + err_hat
        r = self.reconstruct_residual(y2_hat, primary["priors"])
        return {
            "s": s, "s_hat": s_hat, "err_hat": err_hat, "y2_hat": y2_hat, "r": r,
            "x_hat2": primary["x_hat1"] + r, "lik_s": lik_s,
        }

    # -- parameter groups -----------------------------------------------
    def primary_parameters(self):
        """Everything trained in stage I: transforms, y/z gains, z prior."""
        yield from self.transforms.parameters()
        yield self.gains.log_y
        yield self.gains.log_z
        yield from self.z_prior.parameters()

    def auxiliary_parameters(self):
        """Everything trained in stage II: auxiliary stack, s gains, s prior."""
        yield from self.aux.parameters()
        yield self.gains.log_s
        yield from self.s_prior.parameters()

    def update_tables(self) -> None:
        self.z_prior.update_tables()
        self.s_prior.update_tables()


def without_scalable(model: VersatileCodec) -> VersatileCodec:
    """Copy of ``model`` whose auxiliary branch skips the scalable stream (``y2_hat = y_hat``).

    Used for the ablation where the residual network sees only the primary latent.
    """
    twin = VersatileCodec(replace(model.cfg, use_scalable=False))
    twin.gains = GainSet(model.cfg.c_y, model.cfg.c_z, model.cfg.c_s,
                         model.gains.anchor_lambdas, model.gains.aux_lambdas)
    twin.load_state_dict(model.state_dict())
    twin.trained_stage = min(getattr(model, "trained_stage", 0), 1)
    twin.update_tables()
    return twin


def parameter_budget(cfg: ModelConfig | None = None) -> tuple[int, int]:
    """``(auxiliary, transform)`` parameter counts for a configuration."""
    model = VersatileCodec(cfg)
    return count_parameters(model.aux), count_parameters(model.transforms)
