"""Probability models used for rate estimation and for building coding tables.

All likelihoods are evaluated in the gain-scaled domain where rounded symbols
sit on the integer grid.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import tables

SIGMA_MIN = 0.11
LIKELIHOOD_BOUND = 1e-9
TAIL_MASS = 1e-6


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


def gaussian_likelihood(v: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Mass of ``N(mu, sigma^2)`` on ``[v - 1/2, v + 1/2]``, all in the scaled domain.

    Evaluated on ``|v - mu|`` so the subtraction happens in the upper tail where
    it is numerically benign.
    """
    d = torch.abs(v - mu)
    upper = _std_normal_cdf((0.5 - d) / sigma)
    lower = _std_normal_cdf((-0.5 - d) / sigma)
    return torch.clamp_min(upper - lower, LIKELIHOOD_BOUND)


class GaussianConditional(nn.Module):
    """Conditional Gaussian model for the main latent, parameterized by the hyper-decoder."""

    def __init__(self, sigma_min: float = SIGMA_MIN):
        super().__init__()
        self.sigma_min = float(sigma_min)

    def likelihood(self, v_scaled, mu_scaled, sigma_scaled):
        return gaussian_likelihood(v_scaled, mu_scaled, sigma_scaled)

    @staticmethod
    def tables(mu_scaled: torch.Tensor, sigma_scaled: torch.Tensor):
        return tables.gaussian_tables(
            mu_scaled.detach().double().cpu().numpy(),
            sigma_scaled.detach().double().cpu().numpy(),
        )


class FactorizedPrior(nn.Module):
    """Per-channel learned CDF built from a small monotone scalar network.

    Each channel maps ``v`` through ``1 -> 3 -> 3 -> 1`` affine layers with
    softplus-positive weights and ``tanh`` gating, then a sigmoid. The network
    is monotone non-decreasing in ``v``, so its sigmoid is a valid CDF.
    """

    def __init__(self, channels: int, filters=(3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = int(channels)
        dims = (1, *filters, 1)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        gen = torch.Generator().manual_seed(0)
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            bias = torch.rand(channels, dims[i + 1], 1, generator=gen) - 0.5
            self.biases.append(nn.Parameter(bias))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))
        self._tables = None

    def logits_cdf(self, v: torch.Tensor) -> torch.Tensor:
        """CDF logits for ``v`` shaped ``C x K`` (channel-major)."""
        x = v.unsqueeze(1)
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            x = torch.matmul(F.softplus(m).to(x.dtype), x) + b.to(x.dtype)
            if i < len(self.factors):
                x = x + torch.tanh(self.factors[i]).to(x.dtype) * torch.tanh(x)
        return x.squeeze(1)

    def cdf(self, v: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits_cdf(v))

    def likelihood(self, v_scaled: torch.Tensor) -> torch.Tensor:
        """Per-element probability of ``v_scaled`` (``B x C x H x W`` or ``C x H x W``)."""
        batched = v_scaled.dim() == 4
        x = v_scaled if batched else v_scaled.unsqueeze(0)
        b, c, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        flat = x.permute(1, 0, 2, 3).reshape(c, -1)
        lower = self.logits_cdf(flat - 0.5)
        upper = self.logits_cdf(flat + 0.5)
        sign = -torch.sign(lower + upper).detach()
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        p = torch.clamp_min(p, LIKELIHOOD_BOUND)
        p = p.reshape(c, b, h, w).permute(1, 0, 2, 3)
        return p if batched else p[0]

    @torch.no_grad()
    def _quantile(self, target: float) -> np.ndarray:
        lo = torch.full((self.channels, 1), -1e4, dtype=torch.float64)
        hi = torch.full((self.channels, 1), 1e4, dtype=torch.float64)
        logit = math.log(target / (1.0 - target))
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            below = self.logits_cdf(mid) < logit
            lo = torch.where(below, mid, lo)
            hi = torch.where(below, hi, mid)
        return hi[:, 0].numpy()

    @torch.no_grad()
    def update_tables(self, precision: int = tables.PRECISION):
        """Freeze per-channel coding tables from the current parameters.

        Alphabet bounds are the ``TAIL_MASS / 2`` quantiles of the learned
        density, widened to integers; the tail mass goes to the escape slot.
        """
        lo = np.floor(self._quantile(TAIL_MASS / 2)).astype(np.int64)
        hi = np.ceil(self._quantile(1 - TAIL_MASS / 2)).astype(np.int64)
        half_cap = tables.MAX_HALF_WIDTH
        center = np.floor((lo + hi) / 2).astype(np.int64)
        lo = np.maximum(lo, center - half_cap)
        hi = np.minimum(hi, center + half_cap)
        width = int((hi - lo).max()) + 1
        grid = torch.from_numpy(lo[:, None] + np.arange(width)[None, :]).double()
        pm = self.cdf(grid + 0.5) - self.cdf(grid - 0.5)
        valid = torch.from_numpy(np.arange(width)[None, :] <= (hi - lo)[:, None])
        pm = torch.where(valid, pm, torch.zeros_like(pm)).numpy()
        # slots past a narrow channel's bound keep one count each
        escape = np.clip(1.0 - pm.sum(axis=1, keepdims=True), 0.0, None)
        cdf = tables.pmf_to_cdf(np.concatenate([pm, escape], axis=1), precision)
        self._tables = (lo, cdf)
        return self._tables

    @property
    def coding_tables(self):
        if self._tables is None:
            self.update_tables()
        return self._tables

    def invalidate_tables(self) -> None:
        self._tables = None
