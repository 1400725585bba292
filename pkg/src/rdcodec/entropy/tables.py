"""Quantized CDF tables and table-driven symbol coding.

A table row describes one alphabet ``[low, low + n - 2]`` plus a final escape
slot carrying the remaining tail mass. Values outside the alphabet are coded
as the escape symbol followed by an Elias-gamma code of the zigzagged value in
bypass bits.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from .range_coder import DecodeError, RangeDecoder, RangeEncoder

PRECISION = 16
# two-sided Gaussian tail of 1e-6
GAUSSIAN_TAIL_Z = 4.891638475699412
MAX_HALF_WIDTH = 256
_MEAN_GRID = 256.0
_SCALE_GRID = 64.0


def pmf_to_cdf(pmf: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Quantize rows of ``pmf`` to integer CDFs summing to ``2**precision``.

    Every symbol gets at least one count; the rounding remainder goes to the
    most probable symbol of each row.
    """
    pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    nsym = pmf.shape[1]
    total = 1 << precision
    if nsym > total // 2:
        raise ValueError(f"alphabet of {nsym} symbols too large for {precision}-bit tables")
    pmf = np.clip(pmf, 0.0, None)
    sums = pmf.sum(axis=1, keepdims=True)
    pmf = np.where(sums > 0, pmf / np.where(sums > 0, sums, 1.0), 1.0 / nsym)
    freq = np.floor(pmf * (total - nsym)).astype(np.int64) + 1
    deficit = total - freq.sum(axis=1)
    rows = np.arange(pmf.shape[0])
    freq[rows, np.argmax(pmf, axis=1)] += deficit
    cdf = np.zeros((pmf.shape[0], nsym + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return cdf


def quantize_gaussian_params(mu: np.ndarray, sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Snap scaled-domain means and scales to the grids used for table building."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    mu_q = np.floor(mu * _MEAN_GRID + 0.5) / _MEAN_GRID
    sigma_q = np.exp2(np.floor(np.log2(np.maximum(sigma, 1e-6)) * _SCALE_GRID + 0.5) / _SCALE_GRID)
    return mu_q, sigma_q


def gaussian_tables(mu: np.ndarray, sigma: np.ndarray, precision: int = PRECISION):
    """One table row per element for discretized Gaussians on the integer grid.

    Returns ``(lows, cdf)`` where row ``i`` covers values
    ``lows[i] .. lows[i] + 2L`` plus escape.
    """
    mu_q, sigma_q = quantize_gaussian_params(np.ravel(mu), np.ravel(sigma))
    center = np.sign(mu_q) * np.floor(np.abs(mu_q) + 0.5)
    if mu_q.size == 0:
        return center.astype(np.int64), np.zeros((0, 2), dtype=np.int64)
    half = int(np.clip(np.ceil(GAUSSIAN_TAIL_Z * sigma_q.max()) + 1, 1, MAX_HALF_WIDTH))
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    values = center[:, None] + offsets[None, :]
    d = np.abs(values - mu_q[:, None])
    s = sigma_q[:, None]
    pmf = ndtr((0.5 - d) / s) - ndtr((-0.5 - d) / s)
    escape = np.clip(1.0 - pmf.sum(axis=1, keepdims=True), 0.0, None)
    cdf = pmf_to_cdf(np.concatenate([pmf, escape], axis=1), precision)
    return (center - half).astype(np.int64), cdf


def _zigzag(v: int) -> int:
    return 2 * v if v >= 0 else -2 * v - 1


def _unzigzag(u: int) -> int:
    return u >> 1 if u % 2 == 0 else -((u + 1) >> 1)


def encode_values(
    values,
    lows,
    cdf: np.ndarray,
    rows=None,
    precision: int = PRECISION,
    encoder: RangeEncoder | None = None,
) -> bytes | None:
    """Code integer ``values`` element by element with table ``rows[i]``.

    ``rows`` defaults to ``0..len(values)-1``. When ``encoder`` is given the
    symbols are appended to it and nothing is returned.
    """
    own = encoder is None
    enc = RangeEncoder() if own else encoder
    values = [int(v) for v in np.ravel(values)]
    lows = np.ravel(lows).tolist()
    table = cdf.tolist()
    rows = range(len(values)) if rows is None else np.ravel(rows).tolist()
    for v, r in zip(values, rows):
        row = table[r]
        escape = len(row) - 2
        idx = v - lows[r]
        if 0 <= idx < escape:
            enc.encode(row[idx], row[idx + 1] - row[idx], precision)
        else:
            enc.encode(row[escape], row[escape + 1] - row[escape], precision)
            u = _zigzag(v) + 1
            nbits = u.bit_length()
            enc.encode_bits(0, nbits - 1)
            enc.encode_bits(u, nbits)
    return enc.finish() if own else None


def decode_values(
    data_or_decoder,
    count: int,
    lows,
    cdf: np.ndarray,
    rows=None,
    precision: int = PRECISION,
) -> np.ndarray:
    dec = (
        data_or_decoder
        if isinstance(data_or_decoder, RangeDecoder)
        else RangeDecoder(bytes(data_or_decoder))
    )
    lows = np.ravel(lows).tolist()
    table = cdf.tolist()
    rows = range(count) if rows is None else np.ravel(rows).tolist()
    out = np.empty(count, dtype=np.int64)
    for i, r in zip(range(count), rows):
        row = table[r]
        escape = len(row) - 2
        idx = dec.decode_symbol(row, precision)
        if idx < escape:
            out[i] = lows[r] + idx
            continue
        zeros = 0
        while dec.decode_bits(1) == 0:
            zeros += 1
            if zeros > 62:
                raise DecodeError("runaway escape code", dec.position)
        u = (1 << zeros) | dec.decode_bits(zeros)
        out[i] = _unzigzag(u - 1)
    return out
