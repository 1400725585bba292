"""Entropy models, rate estimation and range coding."""

from __future__ import annotations

import torch

from .models import (
    LIKELIHOOD_BOUND,
    SIGMA_MIN,
    FactorizedPrior,
    GaussianConditional,
    gaussian_likelihood,
)
from .range_coder import DecodeError, RangeDecoder, RangeEncoder
from .tables import PRECISION, decode_values, encode_values, gaussian_tables, pmf_to_cdf


def estimate_rate(*likelihoods: torch.Tensor) -> torch.Tensor:
    """Total information content ``sum(-log2 p)`` over all given likelihood tensors."""
    total = None
    for p in likelihoods:
        bits = -torch.log2(p).sum()
        total = bits if total is None else total + bits
    if total is None:
        return torch.tensor(0.0)
    return total


def range_encode(symbols, cdf, lows=None, rows=None, precision: int = PRECISION) -> bytes:
    """Encode integer ``symbols`` against quantized CDF table rows.

    With a single-row ``cdf`` and no ``lows``, symbols are indices
    ``0 .. nsym - 2`` and every element uses that row.
    """
    symbols = list(symbols)
    lows, rows = _defaults(cdf, lows, rows, len(symbols))
    return encode_values(symbols, lows, cdf, rows, precision)


def range_decode(data: bytes, count: int, cdf, lows=None, rows=None, precision: int = PRECISION):
    lows, rows = _defaults(cdf, lows, rows, count)
    return decode_values(data, count, lows, cdf, rows, precision)


def _defaults(cdf, lows, rows, count):
    if lows is None:
        lows = [0] * len(cdf)
    if rows is None and len(cdf) == 1:
        rows = [0] * count
    return lows, rows


__all__ = [
    "DecodeError",
    "FactorizedPrior",
    "GaussianConditional",
    "LIKELIHOOD_BOUND",
    "PRECISION",
    "RangeDecoder",
    "RangeEncoder",
    "SIGMA_MIN",
    "decode_values",
    "encode_values",
    "estimate_rate",
    "gaussian_likelihood",
    "gaussian_tables",
    "pmf_to_cdf",
    "range_decode",
    "range_encode",
]
