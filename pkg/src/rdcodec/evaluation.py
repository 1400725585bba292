"""Metrics, trade-off sweeps and diagnostics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, field, fields

import numpy as np
import torch
from scipy import interpolate

from . import bitstream
from .cognition import probe_accuracy, train_probe

CSV_FIELDS = ("alpha", "beta", "alpha_s", "bpp", "psnr_db", "probe_acc")


def bpp(total_bits: int, h: int, w: int) -> float:
    if total_bits <= 0 or h <= 0 or w <= 0:
        raise ValueError("bits and image dimensions must be positive")
    return total_bits / (h * w)


def psnr(x, x_hat) -> float:
    """PSNR in dB with unit peak; ``inf`` for identical inputs."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    mse = np.mean((x - x_hat) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


# -- Bjontegaard deltas -----------------------------------------------------------

def _curve(points):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 4:
        raise ValueError("a curve needs at least 4 (rate, quality) points")
    if np.any(pts[:, 0] <= 0):
        raise ValueError("rates must be positive")
    order = np.argsort(pts[:, 0])
    return np.log10(pts[order, 0]), pts[order, 1]


def _avg_integral(xs, ys, lo, hi, method):
    if method == "cubic":
        poly = np.polyint(np.polyfit(xs, ys, 3))
        return (np.polyval(poly, hi) - np.polyval(poly, lo)) / (hi - lo)
    if method == "pchip":
        order = np.argsort(xs)
        f = interpolate.PchipInterpolator(xs[order], ys[order])
        return float(f.integrate(lo, hi)) / (hi - lo)
    raise ValueError(f"unknown BD fitting method {method!r}")


def bd_quality(curve_a, curve_b, method: str = "cubic") -> float:
    """Average quality gain of ``curve_b`` over ``curve_a`` across their common log-rate span."""
    ra, qa = _curve(curve_a)
    rb, qb = _curve(curve_b)
    lo, hi = max(ra.min(), rb.min()), min(ra.max(), rb.max())
    if hi <= lo:
        raise ValueError("rate ranges of the two curves do not overlap")
    return float(_avg_integral(rb, qb, lo, hi, method) - _avg_integral(ra, qa, lo, hi, method))


def bd_rate(curve_a, curve_b, method: str = "cubic") -> float:
    """Average relative rate change of ``curve_b`` vs ``curve_a`` at equal quality (1.0 == +100%)."""
    ra, qa = _curve(curve_a)
    rb, qb = _curve(curve_b)
    lo, hi = max(qa.min(), qb.min()), min(qa.max(), qb.max())
    if hi <= lo:
        raise ValueError("quality ranges of the two curves do not overlap")
    diff = _avg_integral(qb, rb, lo, hi, method) - _avg_integral(qa, ra, lo, hi, method)
    return float(10.0 ** diff - 1.0)


def bd_metric(curve_a, curve_b, kind: str = "quality", method: str = "cubic") -> float:
    if kind == "quality":
        return bd_quality(curve_a, curve_b, method)
    if kind == "rate":
        return bd_rate(curve_a, curve_b, method)
    raise ValueError(f"unknown BD metric kind {kind!r}")


# -- trade-off surface ----------------------------------------------------------

@dataclass(frozen=True)
class RDCPoint:
    alpha: float
    beta: float
    alpha_s: float
    bpp: float
    psnr_db: float
    probe_acc: float

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError("bpp must be positive")
        if not math.isfinite(self.psnr_db):
            raise ValueError("PSNR must be finite")
        if not 0.0 <= self.probe_acc <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")


CORNERS = {"A": (1.0, 1.0), "B": (1.0, 0.0), "C": (0.0, 0.0), "D": (0.0, 1.0)}


@dataclass
class TradeoffSurface:
    alphas: tuple
    betas: tuple
    points: dict = field(default_factory=dict)
    model_id: str = ""
    dataset_id: str = ""

    def add(self, point: RDCPoint) -> None:
        self.points[(point.alpha, point.beta)] = point

    def at(self, alpha: float, beta: float) -> RDCPoint:
        return self.points[(alpha, beta)]

    @property
    def complete(self) -> bool:
        return all((a, b) in self.points for a in self.alphas for b in self.betas)

    def corners(self) -> dict:
        """Points A-D where the grid spans the unit square."""
        return {k: self.points[c] for k, c in CORNERS.items() if c in self.points}

    def to_csv(self) -> str:
        if not self.complete:
            raise ValueError("surface has missing cells")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for a in self.alphas:
            for b in self.betas:
                w.writerow([repr(float(v)) for v in astuple(self.points[(a, b)])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TradeoffSurface":
        rows = list(csv.DictReader(io.StringIO(text)))
        pts = [RDCPoint(**{f.name: float(r[f.name]) for f in fields(RDCPoint)}) for r in rows]
        alphas = tuple(dict.fromkeys(p.alpha for p in pts))
        betas = tuple(dict.fromkeys(p.beta for p in pts))
        surf = cls(alphas, betas)
        for p in pts:
            surf.add(p)
        return surf


class SweepCellError(RuntimeError):
    def __init__(self, alpha, beta, err):
        super().__init__(f"sweep cell alpha={alpha} beta={beta}: {err}")
        self.alpha, self.beta = alpha, beta


def sweep_surface(
    model,
    images,
    labels,
    encoder,
    probe,
    alpha_grid,
    beta_grid,
    alpha_s: float | None = 0.0,
    model_id: str = "",
    dataset_id: str = "",
) -> TradeoffSurface:
    """Evaluate every (alpha, beta) cell with real coded streams.

    Each image is compressed once per alpha; all betas decode that same stream.
    """
    images = np.asarray(images, dtype=np.float32)
    surf = TradeoffSurface(tuple(alpha_grid), tuple(beta_grid), model_id=model_id, dataset_id=dataset_id)
    for a in surf.alphas:
        try:
            streams = [bitstream.compress(x, a, model, alpha_s=alpha_s) for x in images]
        except Exception as err:
            raise SweepCellError(a, None, err) from err
        rate = float(np.mean([s.bpp for s in streams]))
        for b in surf.betas:
            try:
                recon = np.stack([bitstream.decompress(s.to_bytes(), b, model) for s in streams])
                quality = float(np.mean([psnr(x, r) for x, r in zip(images, recon)]))
                acc = probe_accuracy(recon, labels, probe, encoder)
            except Exception as err:
                raise SweepCellError(a, b, err) from err
            surf.add(RDCPoint(float(a), float(b), float(alpha_s or 0.0), rate, quality, acc))
    return surf


def cognition_training_set(model, images, labels, alphas):
    """Decoded beta=1 reconstructions of ``images`` at every alpha, labels tiled to match."""
    recon = [bitstream.decompress(bitstream.compress(x, a, model).to_bytes(), 1.0, model)
             for a in alphas for x in np.asarray(images, dtype=np.float32)]
    return np.stack(recon), np.tile(np.asarray(labels), len(alphas))


def fit_probe(encoder, images, labels, data: str = "original", model=None, alphas=(), seed: int = 0):
    """Linear probe on frozen proxy features.

    ``data="cognition"`` fits it on beta=1 reconstructions from ``model`` at
    each of ``alphas`` instead of the images themselves, mirroring a
    downstream network fine-tuned on cognition-oriented output.
    """
    num_classes = int(np.max(labels)) + 1
    if data == "cognition":
        if model is None or not len(alphas):
            raise ValueError("cognition probes need a model and at least one alpha")
        images, labels = cognition_training_set(model, images, labels, alphas)
    elif data != "original":
        raise ValueError(f"unknown probe data {data!r}")
    return train_probe(encoder, images, labels, num_classes, seed=seed)


# -- diagnostics ------------------------------------------------------------------

def pixel_histogram(x_hat, bins: int = 120, value_range=(-1.0, 2.0)):
    counts, edges = np.histogram(np.asarray(x_hat).ravel(), bins=bins, range=value_range)
    return counts, edges


def log_spectrum(img) -> np.ndarray:
    """Centered log-magnitude 2-D spectrum, averaged over colour channels."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    mag = np.abs(np.fft.fftshift(np.fft.fft2(img), axes=(-2, -1)))
    return np.log1p(mag).mean(axis=0)


def high_frequency_ratio(img, cutoff: float = 0.125) -> float:
    """Fraction of spectral energy at frequencies above ``cutoff`` cycles/pixel in either axis.

    The default is a quarter of the Nyquist frequency.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    power = np.abs(np.fft.fft2(img)) ** 2
    fy = np.abs(np.fft.fftfreq(img.shape[-2]))[:, None]
    fx = np.abs(np.fft.fftfreq(img.shape[-1]))[None, :]
    high = (fy > cutoff) | (fx > cutoff)
    total = power.sum()
    if total == 0:
        return 0.0
    return float(power[..., high].sum() / total)


def channel_gradient_profile(model, y_hat: torch.Tensor, s_hat: torch.Tensor | None = None, target: str = "x1"):
    """Per-channel mean ``|d x_hat / d y_hat|`` for ``x1`` or ``x2`` reconstructions."""
    y = y_hat.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        x1, priors = model.synthesize(y)
        if target == "x1":
            out = x1
        elif target == "x2":
            err = model.scalable_decode(s_hat) if s_hat is not None else torch.zeros_like(y)
            out = x1 + model.reconstruct_residual(y + err, priors)
        else:
            raise ValueError(f"unknown target {target!r}")
        (grad,) = torch.autograd.grad(out.sum(), y)
    g = grad.abs()
    dims = tuple(i for i in range(g.dim()) if i != g.dim() - 3)
    return g.mean(dim=dims).numpy()


def channel_energy(latent: torch.Tensor) -> np.ndarray:
    t = latent.detach()
    dims = tuple(i for i in range(t.dim()) if i != t.dim() - 3)
    return (t ** 2).mean(dim=dims).numpy()


def out_of_range_fraction(x_hat, lo: float = -0.05, hi: float = 1.05) -> float:
    v = np.asarray(x_hat)
    return float(np.mean((v < lo) | (v > hi)))


def diagnostics(x, x_hat_1, x_hat_2, model=None, y_hat=None, s_hat=None) -> dict:
    """Histogram, spectrum and optional channel-profile report for one image set.

    ``x_hat_1`` and ``x_hat_2`` are unclipped reconstructions.
    """
    report = {
        "histogram": {
            "x": pixel_histogram(x),
            "x_hat1": pixel_histogram(x_hat_1),
            "x_hat2": pixel_histogram(x_hat_2),
            "x_hat2_clipped": pixel_histogram(np.clip(x_hat_2, 0, 1)),
        },
        "spectrum": {k: log_spectrum(_first(v)) for k, v in (("x", x), ("x_hat1", x_hat_1), ("x_hat2", x_hat_2))},
        "hf_ratio": {k: _mean_hf(v) for k, v in (("x", x), ("x_hat1", x_hat_1), ("x_hat2", x_hat_2))},
        "out_of_range": {"x_hat1": out_of_range_fraction(x_hat_1), "x_hat2": out_of_range_fraction(x_hat_2)},
    }
    if model is not None and y_hat is not None:
        report["gradient"] = {
            "x_hat1": channel_gradient_profile(model, y_hat, s_hat, "x1"),
            "x_hat2": channel_gradient_profile(model, y_hat, s_hat, "x2"),
        }
        y_hat2 = y_hat + model.scalable_decode(s_hat) if s_hat is not None else y_hat
        report["energy"] = {"y_hat": channel_energy(y_hat), "y_hat2": channel_energy(y_hat2)}
    return report


def _first(v):
    v = np.asarray(v)
    return v[0] if v.ndim == 4 else v


def _mean_hf(v) -> float:
    v = np.asarray(v)
    if v.ndim == 3:
        return high_frequency_ratio(v)
    return float(np.mean([high_frequency_ratio(im) for im in v]))
