"""Learned gain units for variable-rate coding.

Each latent (``y``, ``z`` and the auxiliary ``s``) owns ``N`` per-channel
gain vectors. A latent is multiplied by its gain before quantization and
divided by it afterwards, so larger gains mean finer quantization and more
bits. A continuous quality index ``alpha`` in [0, 1] is mapped uniformly onto
the ``N - 1`` intervals between anchors and the gains are interpolated
geometrically.
"""

from __future__ import annotations

import math

import torch
from torch import nn

STAGE1_LAMBDAS = (0.0625, 0.125, 0.25, 0.5, 1.0, 2.0)
STAGE2_LAMBDAS = (0.00018, 0.00036, 0.00072, 0.001, 0.0015, 0.002)

ALPHA_FX_SCALE = 65535
_SNAP_EPS = 1e-9


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Round to nearest integer, ties away from zero."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def alpha_to_fixed(alpha: float) -> int:
    """Encode ``alpha`` as the 16-bit fixed-point value stored in stream headers."""
    check_alpha(alpha)
    return int(math.floor(alpha * ALPHA_FX_SCALE + 0.5))


def fixed_to_alpha(alpha_fx: int) -> float:
    if not 0 <= alpha_fx <= ALPHA_FX_SCALE:
        raise ValueError(f"fixed-point alpha {alpha_fx} outside [0, {ALPHA_FX_SCALE}]")
    return alpha_fx / ALPHA_FX_SCALE


def check_alpha(alpha: float) -> None:
    if not (0.0 <= alpha <= 1.0) or math.isnan(alpha):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha!r}")


def anchor_position(alpha: float, num_anchors: int) -> tuple[int, float]:
    """Map ``alpha`` to ``(n, l)``: lower anchor index and its interpolation weight.

    The returned gain is ``G_n ** l * G_{n+1} ** (1 - l)``; ``l == 1`` means the
    anchor ``n`` itself.
    """
    check_alpha(alpha)
    if num_anchors == 1:
        return 0, 1.0
    t = alpha * (num_anchors - 1)
    nearest = round(t)
    if abs(t - nearest) < _SNAP_EPS:
        t = float(nearest)
    n = min(int(math.floor(t)), num_anchors - 2)
    frac = t - n
    return n, 1.0 - frac


class GainSet(nn.Module):
    """Per-anchor, per-channel gains for ``y``, ``z`` and ``s``.

    Gains are stored as logs so every entry stays strictly positive; all start
    at 1.0.
    """

    def __init__(
        self,
        num_y: int,
        num_z: int,
        num_s: int,
        anchor_lambdas=STAGE1_LAMBDAS,
        aux_lambdas=STAGE2_LAMBDAS,
    ):
        super().__init__()
        if len(anchor_lambdas) != len(aux_lambdas):
            raise ValueError("primary and auxiliary anchor sets must have equal length")
        self.anchor_lambdas = tuple(float(v) for v in anchor_lambdas)
        self.aux_lambdas = tuple(float(v) for v in aux_lambdas)
        n = len(self.anchor_lambdas)
        self.log_y = nn.Parameter(torch.zeros(n, num_y))
        self.log_z = nn.Parameter(torch.zeros(n, num_z))
        self.log_s = nn.Parameter(torch.zeros(n, num_s))

    @property
    def num_anchors(self) -> int:
        return self.log_y.shape[0]

    def _table(self, which: str) -> torch.Tensor:
        try:
            return {"y": self.log_y, "z": self.log_z, "s": self.log_s}[which]
        except KeyError:
            raise ValueError(f"unknown gain stream {which!r}; expected y, z or s") from None

    def anchor(self, n: int, which: str) -> torch.Tensor:
        """Gain vector of anchor ``n`` (differentiable)."""
        return torch.exp(self._table(which)[n])

    def gain_at(self, alpha: float, which: str) -> torch.Tensor:
        """Gain vector at quality ``alpha``, geometric between bracketing anchors."""
        table = self._table(which)
        n, l = anchor_position(alpha, table.shape[0])
        if l == 1.0:
            return torch.exp(table[n])
        return torch.exp(l * table[n] + (1.0 - l) * table[n + 1])


def quantize(
    v: torch.Tensor,
    gain: torch.Tensor,
    mode: str = "round",
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Gain-scaled quantization ``Q(v * G) / G`` over the channel axis.

    ``v`` is ``C x H x W`` or ``B x C x H x W``; ``gain`` has ``C`` entries.
    ``round`` mode rounds half away from zero. ``noise`` mode adds
    ``U(-1/2, 1/2)`` in the scaled domain, drawn from ``generator``.
    """
    g = _broadcast_gain(v, gain)
    scaled = v * g
    if mode == "round":
        q = round_half_away(scaled)
    elif mode == "noise":
        u = torch.rand(scaled.shape, generator=generator, dtype=scaled.dtype, device=scaled.device)
        q = scaled + (u - 0.5)
    else:
        raise ValueError(f"unknown quantization mode {mode!r}")
    return q / g


def _broadcast_gain(v: torch.Tensor, gain: torch.Tensor) -> torch.Tensor:
    channel_axis = 1 if v.dim() == 4 else 0
    if gain.dim() != 1 or gain.shape[0] != v.shape[channel_axis]:
        raise ValueError(
            f"gain of length {tuple(gain.shape)} does not match {v.shape[channel_axis]} channels"
        )
    if not bool(torch.all(gain > 0)):
        raise AssertionError("gain entries must be strictly positive")
    shape = [1] * v.dim()
    shape[channel_axis] = -1
    return gain.to(v.dtype).reshape(shape)


def scaled(v: torch.Tensor, gain: torch.Tensor) -> torch.Tensor:
    """``v * G`` broadcast over the channel axis."""
    return v * _broadcast_gain(v, gain)
