"""Container format binding the hyper, main and optional auxiliary substreams.

Layout (little-endian)::

    magic "RDC1" | version u8 | flags u8 | orig_w u16 | orig_h u16 |
    padded_w u16 | padded_h u16 | alpha_fx u16 | alpha_s_fx u16 |
    len_z u32 | len_y u32 | z payload | y payload | s payload

The auxiliary payload runs to the end of the file, so its length is implied:
``len_s = total - 26 - len_z - len_y``. The decoder-side mix weight ``beta``
is not stored; one stream serves every cognition/distortion trade-off.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from . import gain_control
from .codec_core import PAD_MULTIPLE, VersatileCodec
from .entropy import DecodeError
from .entropy import tables as coding
from .gain_control import round_half_away

MAGIC = b"RDC1"
FORMAT_VERSION = 1
FLAG_AUX = 0x01
_HEADER = struct.Struct("<4sBBHHHHHHII")
HEADER_SIZE = _HEADER.size


class StreamFormatError(ValueError):
    """Bad magic, unsupported version or inconsistent header."""


class ModelVersionError(RuntimeError):
    """The model cannot produce or read the requested stream."""


@dataclass(frozen=True)
class StreamHeader:
    orig_width: int
    orig_height: int
    padded_width: int
    padded_height: int
    alpha_fx: int
    alpha_s_fx: int
    len_z: int
    len_y: int
    len_s: int
    flags: int = 0
    version: int = FORMAT_VERSION

    @property
    def has_aux(self) -> bool:
        return bool(self.flags & FLAG_AUX)

    def validate(self) -> None:
        for name in ("padded_width", "padded_height"):
            if getattr(self, name) % PAD_MULTIPLE:
                raise StreamFormatError(f"{name} {getattr(self, name)} not a multiple of {PAD_MULTIPLE}")
        if self.padded_width < self.orig_width or self.padded_height < self.orig_height:
            raise StreamFormatError("padded size smaller than original size")
        if self.orig_width == 0 or self.orig_height == 0:
            raise StreamFormatError("empty image")
        if self.has_aux != (self.len_s > 0):
            raise StreamFormatError("auxiliary flag and auxiliary payload length disagree")
        if not self.has_aux and self.alpha_s_fx:
            raise StreamFormatError("alpha_s set without the auxiliary flag")

    def pack(self) -> bytes:
        return _HEADER.pack(
            MAGIC, self.version, self.flags,
            self.orig_width, self.orig_height, self.padded_width, self.padded_height,
            self.alpha_fx, self.alpha_s_fx, self.len_z, self.len_y,
        )


@dataclass(frozen=True)
class CodedStream:
    header: StreamHeader
    z_bytes: bytes
    y_bytes: bytes
    s_bytes: bytes = b""

    def to_bytes(self) -> bytes:
        return self.header.pack() + self.z_bytes + self.y_bytes + self.s_bytes

    def __len__(self) -> int:
        return HEADER_SIZE + len(self.z_bytes) + len(self.y_bytes) + len(self.s_bytes)

    @property
    def bpp(self) -> float:
        return 8.0 * len(self) / (self.header.orig_width * self.header.orig_height)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodedStream":
        data = bytes(data)
        if len(data) < HEADER_SIZE:
            raise DecodeError("truncated header", len(data))
        magic, version, flags, ow, oh, pw, ph, afx, asfx, len_z, len_y = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise StreamFormatError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise StreamFormatError(f"unsupported stream version {version}")
        end_z = HEADER_SIZE + len_z
        end_y = end_z + len_y
        if end_y > len(data):
            raise DecodeError("truncated substream", len(data))
        header = StreamHeader(ow, oh, pw, ph, afx, asfx, len_z, len_y, len(data) - end_y, flags, version)
        header.validate()
        return cls(header, data[HEADER_SIZE:end_z], data[end_z:end_y], data[end_y:])


def padded_size(n: int, multiple: int = PAD_MULTIPLE) -> int:
    return max(multiple, -(-n // multiple) * multiple)


def pad_image(x: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Reflect-pad a ``3 x H x W`` image on the bottom/right to the next multiple."""
    _, h, w = x.shape
    ph, pw = padded_size(h, multiple), padded_size(w, multiple)
    if (ph, pw) == (h, w):
        return x
    return np.pad(x, ((0, 0), (0, ph - h), (0, pw - w)), mode="reflect" if min(h, w) > 1 else "edge")


def _check_model(model: VersatileCodec, need_aux: bool) -> None:
    stage = getattr(model, "trained_stage", 0)
    if stage < 1:
        raise ModelVersionError("model has no trained primary branch")
    if need_aux and stage < 2:
        raise ModelVersionError("auxiliary stream requested but the model has no trained auxiliary branch")
    if need_aux and not model.cfg.use_scalable:
        raise ModelVersionError("model variant has no scalable transform")


def _gains(model: VersatileCodec, alpha_fx: int, alpha_s_fx: int):
    a = gain_control.fixed_to_alpha(alpha_fx)
    a_s = gain_control.fixed_to_alpha(alpha_s_fx)
    g = model.gains
    return g.gain_at(a, "y"), g.gain_at(a, "z"), g.gain_at(a_s, "s")


def _per_channel_rows(shape) -> np.ndarray:
    c, h, w = shape
    return np.repeat(np.arange(c), h * w)


def _encode_factorized(q: torch.Tensor, prior) -> bytes:
    lows, cdf = prior.coding_tables
    return coding.encode_values(q.numpy().astype(np.int64), lows, cdf, _per_channel_rows(q.shape))


def _decode_factorized(data: bytes, shape, prior) -> torch.Tensor:
    lows, cdf = prior.coding_tables
    n = int(np.prod(shape))
    vals = coding.decode_values(data, n, lows, cdf, _per_channel_rows(shape))
    return torch.from_numpy(vals.reshape(shape).astype(np.float32))


def _to_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float32))


@torch.no_grad()
def compress(x, alpha: float, model: VersatileCodec, alpha_s: float | None = None, return_latents: bool = False):
    """Encode a ``3 x H x W`` image in [0, 1].

    ``alpha_s=None`` omits the auxiliary stream. With ``return_latents`` the
    encoder-side ``z_hat``, ``y_hat`` and ``s_hat`` are returned as well.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W image, got shape {x.shape}")
    use_aux = alpha_s is not None
    _check_model(model, use_aux)
    _, h, w = x.shape
    xp = pad_image(x)
    alpha_fx = gain_control.alpha_to_fixed(alpha)
    alpha_s_fx = gain_control.alpha_to_fixed(alpha_s) if use_aux else 0
    g_y, g_z, g_s = _gains(model, alpha_fx, alpha_s_fx)

    y, z = model.analyze(_to_tensor(xp), g_y)
    q_z = round_half_away(gain_control.scaled(z, g_z))
    z_hat = q_z / g_z[:, None, None]
    mu, sigma = model.hyper_decode(z_hat)
    q_y = round_half_away(gain_control.scaled(y, g_y))
    y_hat = q_y / g_y[:, None, None]

    z_bytes = _encode_factorized(q_z, model.z_prior)
    lows, cdf = model.gaussian.tables(gain_control.scaled(mu, g_y), gain_control.scaled(sigma, g_y))
    y_bytes = coding.encode_values(q_y.numpy().astype(np.int64), lows, cdf)

    s_bytes, s_hat = b"", None
    if use_aux:
        s = model.scalable_encode(y - y_hat)
        q_s = round_half_away(gain_control.scaled(s, g_s))
        s_hat = q_s / g_s[:, None, None]
        s_bytes = _encode_factorized(q_s, model.s_prior)

    header = StreamHeader(
        w, h, xp.shape[2], xp.shape[1], alpha_fx, alpha_s_fx,
        len(z_bytes), len(y_bytes), len(s_bytes), FLAG_AUX if use_aux else 0,
    )
    header.validate()
    stream = CodedStream(header, z_bytes, y_bytes, s_bytes)
    if return_latents:
        return stream, {"z_hat": z_hat, "y_hat": y_hat, "s_hat": s_hat}
    return stream


@torch.no_grad()
def decode_latents(stream, model: VersatileCodec) -> dict:
    """Entropy-decode a stream back to ``z_hat``, ``y_hat`` and ``s_hat``."""
    if not isinstance(stream, CodedStream):
        stream = CodedStream.from_bytes(stream)
    hd = stream.header
    _check_model(model, hd.has_aux)
    g_y, g_z, g_s = _gains(model, hd.alpha_fx, hd.alpha_s_fx)
    cfg = model.cfg
    lh, lw = hd.padded_height // 16, hd.padded_width // 16
    offsets = {"z": HEADER_SIZE, "y": HEADER_SIZE + hd.len_z, "s": HEADER_SIZE + hd.len_z + hd.len_y}
    part = "z"
    try:
        q_z = _decode_factorized(stream.z_bytes, (cfg.c_z, lh // 4, lw // 4), model.z_prior)
        z_hat = q_z / g_z[:, None, None]
        mu, sigma = model.hyper_decode(z_hat)
        part = "y"
        lows, cdf = model.gaussian.tables(gain_control.scaled(mu, g_y), gain_control.scaled(sigma, g_y))
        vals = coding.decode_values(stream.y_bytes, cfg.c_y * lh * lw, lows, cdf)
        y_hat = torch.from_numpy(vals.reshape(cfg.c_y, lh, lw).astype(np.float32)) / g_y[:, None, None]
        s_hat = None
        if hd.has_aux:
            part = "s"
            q_s = _decode_factorized(stream.s_bytes, (cfg.c_s, lh, lw), model.s_prior)
            s_hat = q_s / g_s[:, None, None]
    except DecodeError as err:
        reason = str(err).rsplit(" (byte offset", 1)[0]
        raise DecodeError(f"{part} substream: {reason}", offsets[part] + err.offset) from err
    return {"z_hat": z_hat, "y_hat": y_hat, "s_hat": s_hat, "header": hd}


@torch.no_grad()
def reconstruct(latents: dict, model: VersatileCodec) -> tuple[torch.Tensor, torch.Tensor]:
    """``(x_hat1, r)`` on the padded grid.

    Without an auxiliary stream ``r`` is zero, except for models trained
    without the scalable transform, whose residual network reads ``y_hat`` alone.
    """
    y_hat = latents["y_hat"]
    x_hat1, priors = model.synthesize(y_hat)
    if latents.get("s_hat") is not None:
        y2_hat = y_hat + model.scalable_decode(latents["s_hat"])
        return x_hat1, model.reconstruct_residual(y2_hat, priors)
    if not model.cfg.use_scalable and getattr(model, "trained_stage", 0) >= 2:
        return x_hat1, model.reconstruct_residual(y_hat, priors)
    return x_hat1, torch.zeros_like(x_hat1)


def mix(x_hat1: torch.Tensor, r: torch.Tensor, beta: float) -> torch.Tensor:
    """Decoder-side interpolation ``x_hat1 + (1 - beta) * r`` (unclipped)."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta!r}")
    return x_hat1 + (1.0 - beta) * r


@torch.no_grad()
def decompress(stream, beta: float, model: VersatileCodec, return_latents: bool = False):
    """Decode to a clipped ``3 x orig_h x orig_w`` float array at mix weight ``beta``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta!r}")
    latents = decode_latents(stream, model)
    hd = latents["header"]
    x_hat1, r = reconstruct(latents, model)
    out = torch.clamp(mix(x_hat1, r, beta), 0.0, 1.0)[:, : hd.orig_height, : hd.orig_width]
    out = out.numpy()
    if return_latents:
        return out, latents
    return out
