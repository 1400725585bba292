"""Acceptance criteria 1-12 on the toy pipeline.

Criteria that need trained models use ``rdcodec.pipeline.build_all`` with the
default run configuration. Checkpoints are cached in ``.artifacts/`` (or
``$RDC_ARTIFACTS``); a cold cache trains everything first, which takes over an
hour on one CPU core. Each test records a one-line verdict that the terminal
summary prints.
"""

import math
import os
import re
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from fdcheck import check_input, check_params
from rdcodec import bitstream, gain_control
from rdcodec.codec_core import ModelConfig, VersatileCodec, parameter_budget
from rdcodec.cognition import ContrastiveEncoder, info_nce, probe_accuracy, train_probe
from rdcodec.config import RunConfig
from rdcodec.data import load_dataset
from rdcodec.entropy import estimate_rate, gaussian_likelihood, pmf_to_cdf, range_decode, range_encode
from rdcodec.evaluation import (
    bd_metric,
    cognition_training_set,
    high_frequency_ratio,
    out_of_range_fraction,
    psnr,
)
from rdcodec.pipeline import build_all
from rdcodec.training import StageIConfig, StageIIConfig, local_mse, stage1_loss, stage2_loss

RESULTS: dict[int, str] = {}
STARTED: set[int] = set()
CFG = RunConfig()
ARTIFACTS = Path(os.environ.get("RDC_ARTIFACTS", Path(__file__).resolve().parents[1] / ".artifacts"))
ALPHAS3 = (0.0, 0.5, 1.0)


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n:>2} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(RESULTS[n])
    assert ok, RESULTS[n]


@pytest.fixture(autouse=True)
def _mark_started(request):
    m = re.match(r"test_c(\d+)_", request.node.name)
    if m:
        STARTED.add(int(m.group(1)))


@pytest.fixture(scope="module")
def art():
    return build_all(CFG, ARTIFACTS)


@pytest.fixture(scope="module")
def test_set():
    return load_dataset(CFG.dataset, "test", CFG.test_count)


@pytest.fixture(scope="module")
def val_set():
    return load_dataset(CFG.dataset, "val", CFG.val_count)


def _decode(model, x, alpha, alpha_s=None):
    """Coded stream plus unclipped, cropped ``x_hat1`` and ``x_hat2``."""
    stream = bitstream.compress(x, alpha, model, alpha_s=alpha_s)
    x1, r = bitstream.reconstruct(bitstream.decode_latents(stream.to_bytes(), model), model)
    h, w = x.shape[1:]
    return stream, x1[:, :h, :w].numpy(), (x1 + r)[:, :h, :w].numpy()


# -- 1-3: bitstream ------------------------------------------------------------

def test_c01_bit_exact_round_trip(art, test_set):
    images, _ = test_set
    model = art.stage2
    t0 = time.perf_counter()
    mismatches, runs = 0, 0
    for x in images:
        for a in ALPHAS3:
            for a_s in (0.0, None):
                stream, enc = bitstream.compress(x, a, model, alpha_s=a_s, return_latents=True)
                out, dec = bitstream.decompress(stream.to_bytes(), 0.0, model, return_latents=True)
                same = all(
                    (enc[k] is None and dec[k] is None) or (dec[k] is not None and torch.equal(enc[k], dec[k]))
                    for k in ("z_hat", "y_hat", "s_hat")
                )
                mismatches += (not same) or out.shape != x.shape
                runs += 1
    elapsed = time.perf_counter() - t0
    verdict(1, "bit-exact round trip", mismatches == 0 and elapsed < 300,
            f"{runs} streams, {mismatches} mismatches, {elapsed:.0f} s")


def _estimated_bits(model, x, alpha, alpha_s):
    g = model.gains
    a = gain_control.fixed_to_alpha(gain_control.alpha_to_fixed(alpha))
    a_s = gain_control.fixed_to_alpha(gain_control.alpha_to_fixed(alpha_s))
    with torch.no_grad():
        prim = model.forward_primary(torch.from_numpy(x)[None], g.gain_at(a, "y"), g.gain_at(a, "z"), "round")
        aux = model.forward_aux(prim, g.gain_at(a_s, "s"), "round")
        return float(estimate_rate(prim["lik_y"], prim["lik_z"], aux["lik_s"]))


def test_c02_rate_fidelity(art, test_set):
    images, _ = test_set
    worst, failures = 0.0, 0
    for x in images:
        for a in ALPHAS3:
            est_bytes = _estimated_bits(art.stage2, x, a, 0.0) / 8
            measured = len(bitstream.compress(x, a, art.stage2, alpha_s=0.0))
            slack = abs(measured - est_bytes) - 0.01 * est_bytes
            worst = max(worst, slack)
            failures += slack > 64
    verdict(2, "rate fidelity", failures == 0,
            f"worst |measured - estimate| - 1% = {worst:.1f} bytes over {len(images) * 3} streams, limit 64")


def test_c03_mix_endpoints(art, test_set):
    images, _ = test_set
    model = art.stage2
    ok_one = ok_zero = True
    worst_mid = 0.0
    for x in images[:50]:
        stream = bitstream.compress(x, 0.5, model, alpha_s=0.0).to_bytes()
        x1, r = bitstream.reconstruct(bitstream.decode_latents(stream, model), model)
        ok_one &= np.array_equal(bitstream.decompress(stream, 1.0, model), torch.clamp(x1, 0, 1).numpy())
        ok_zero &= np.array_equal(bitstream.decompress(stream, 0.0, model), torch.clamp(x1 + r, 0, 1).numpy())
        mid = bitstream.mix(x1, r, 0.5)
        worst_mid = max(worst_mid, float((mid - 0.5 * (x1 + (x1 + r))).abs().max()))
    ok_mid = worst_mid <= 1e-6
    verdict(3, "mix endpoints", ok_one and ok_zero and ok_mid,
            f"beta=1 exact {ok_one}, beta=0 exact {ok_zero}, midpoint error {worst_mid:.1e}")


# -- 4-7: trained-model behaviour ----------------------------------------------

def test_c04_rate_monotone_across_anchors(art, val_set):
    images, _ = val_set
    model = art.stage2
    n = model.gains.num_anchors
    order = sorted(range(n), key=lambda i: model.gains.anchor_lambdas[i])
    rates = [float(np.mean([bitstream.compress(x, i / (n - 1), model).bpp for x in images])) for i in order]
    violations = sum(b < a for a, b in zip(rates, rates[1:]))
    verdict(4, "rate monotonicity", violations <= 1,
            f"bpp by lambda {' '.join(f'{r:.3f}' for r in rates)}; {violations} violations")


def _x1_out_of_range(model, images):
    return out_of_range_fraction(np.stack([_decode(model, x, a)[1] for x in images for a in ALPHAS3]))


def test_c05_pixel_range_after_stage1(art, test_set):
    images, _ = test_set
    frac = _x1_out_of_range(art.stage1, images)
    frac_ablation = _x1_out_of_range(art.stage1_no_local, images)
    verdict(5, "x_hat1 pixel range", frac <= 0.01 and frac_ablation > frac,
            f"out of range {100 * frac:.3f}% with penalty, {100 * frac_ablation:.3f}% without")


def _curve(model, images, alphas, alpha_s):
    pts = []
    for a in alphas:
        rates, quality = [], []
        for x in images:
            stream = bitstream.compress(x, a, model, alpha_s=alpha_s)
            rates.append(stream.bpp)
            quality.append(psnr(x, bitstream.decompress(stream.to_bytes(), 0.0, model)))
        pts.append((float(np.mean(rates)), float(np.mean(quality))))
    return pts


def test_c06_scalable_stream_gain(art, val_set):
    images, _ = val_set
    with_aux = _curve(art.stage2, images, (0.0, 0.25, 0.5, 0.75, 1.0), 0.0)
    without = _curve(art.stage2_no_aux, images, np.linspace(0.0, 1.0, 21), None)
    gains = []
    for rate, quality in with_aux:
        near_rate, near_quality = min(without, key=lambda p: abs(math.log(p[0] / rate)))
        if abs(near_rate - rate) <= 0.05 * rate:
            gains.append(quality - near_quality)
    ok = bool(gains) and min(gains) >= 0.5
    verdict(6, "scalable stream gain", ok,
            f"{len(gains)}/{len(with_aux)} rate-matched points, PSNR gain "
            f"{' '.join(f'{g:+.2f}' for g in gains) or 'n/a'} dB")


def test_c07_tradeoff_ordering(art, test_set):
    images, labels = test_set
    model = art.stage2
    n = model.gains.num_anchors
    anchors = [i / (n - 1) for i in range(n)]
    train_x, train_y = load_dataset(CFG.dataset, "train", CFG.probe_count)
    recon_x, recon_y = cognition_training_set(model, train_x, train_y, anchors)
    probes = [train_probe(art.encoder, recon_x, recon_y, int(train_y.max()) + 1, seed=s) for s in (0, 1, 2)]
    bad_acc, bad_psnr = [], []
    for a in anchors:
        recon = {0.0: [], 1.0: []}
        for x in images:
            stream = bitstream.compress(x, a, model, alpha_s=CFG.sweep_alpha_s).to_bytes()
            for b in recon:
                recon[b].append(bitstream.decompress(stream, b, model))
        acc = {b: np.mean([probe_accuracy(np.stack(v), labels, p, art.encoder) for p in probes])
               for b, v in recon.items()}
        q = {b: np.mean([psnr(x, r) for x, r in zip(images, v)]) for b, v in recon.items()}
        print(f"alpha {a:.1f}: acc beta=1 {acc[1.0]:.3f} beta=0 {acc[0.0]:.3f}; "
              f"psnr beta=0 {q[0.0]:.2f} beta=1 {q[1.0]:.2f}")
        if acc[1.0] < acc[0.0]:
            bad_acc.append(a)
        if q[0.0] < q[1.0]:
            bad_psnr.append(a)
    verdict(7, "trade-off ordering", not bad_acc and not bad_psnr,
            f"{n} anchors, 3 probe seeds; accuracy inversions at {bad_acc or 'none'}, "
            f"PSNR inversions at {bad_psnr or 'none'}")


# -- 8-11: analytic properties -------------------------------------------------

TINY = ModelConfig(c_y=8, c_z=4, c_s=6, hidden=8, scalable_hidden=4, residual_hidden=4)


def test_c08_gradient_suite():
    torch.manual_seed(0)
    errs = {}
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    errs["local_mse"] = check_input(lambda v: local_mse(x, v), torch.randn_like(x) * 0.6 + 0.5, count=30)

    unit = lambda *s: torch.nn.functional.normalize(torch.randn(*s, dtype=torch.float64), dim=-1)
    k, neg = unit(4, 16), unit(32, 16)
    errs["info_nce"] = check_input(lambda q: info_nce(q, k, neg, 0.07), unit(4, 16), count=20)

    v = torch.round(torch.randn(40, dtype=torch.float64) * 3)
    mu = torch.randn(40, dtype=torch.float64) * 2
    sigma = (torch.rand(40, dtype=torch.float64) * 3 + 0.3).requires_grad_()
    mu.requires_grad_()
    errs["rate"] = check_params(lambda: estimate_rate(gaussian_likelihood(v, mu, sigma)), [mu, sigma], count=20)

    model = VersatileCodec(TINY).double()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.05)
    enc = ContrastiveEncoder(dim=16, width=4).double().freeze()
    img = torch.rand(2, 3, 64, 64, dtype=torch.float64)
    s1 = StageIConfig(queue_size=32, lambda_local=1.0)
    errs["stage1"] = check_params(
        lambda: stage1_loss(img, model, 2, enc, neg, s1, torch.Generator().manual_seed(5))["total"],
        list(model.primary_parameters()), count=10, seed=1)
    errs["stage2"] = check_params(
        lambda: stage2_loss(img, model, 1, 3, StageIIConfig(), torch.Generator().manual_seed(9))["total"],
        list(model.auxiliary_parameters()), count=10, seed=2)
    worst = max(errs.values())
    verdict(8, "gradient suite", worst <= 1e-4, ", ".join(f"{k} {e:.1e}" for k, e in errs.items()))


def test_c09_probability_hygiene():
    rng = np.random.default_rng(0)
    mus = torch.tensor(rng.uniform(-20, 20, 200))
    sigmas = torch.tensor(rng.uniform(0.11, 30, 200))
    support = torch.arange(-400, 401, dtype=torch.float64)[:, None]
    sums = gaussian_likelihood(support, mus, sigmas).sum(0)
    worst_sum = float((sums - 1).abs().max())

    pmf = rng.dirichlet(np.ones(16))
    symbols = rng.choice(16, size=100_000, p=pmf)
    cdf = pmf_to_cdf(np.append(pmf, 0.0))
    data = range_encode(symbols.tolist(), cdf)
    counts = np.bincount(symbols, minlength=16)
    nz = counts[counts > 0]
    entropy_bytes = float(-(nz * np.log2(nz / len(symbols))).sum() / 8)
    decoded_ok = range_decode(data, len(symbols), cdf).tolist() == symbols.tolist()
    ok = worst_sum <= 1e-6 and len(data) <= entropy_bytes * 1.001 + 16 and decoded_ok
    verdict(9, "probability hygiene", ok,
            f"max |sum pmf - 1| {worst_sum:.1e}; {len(data)} bytes vs entropy {entropy_bytes:.1f}")


def test_c10_bd_oracle():
    rates = [0.1, 0.2, 0.4, 0.8]
    base = list(zip(rates, [28.0, 30.5, 32.7, 34.1]))
    shifted = [(r, q + 1.0) for r, q in base]
    doubled = [(2 * r, q) for r, q in base]
    vals = (bd_metric(base, base), bd_metric(base, shifted), bd_metric(base, doubled, kind="rate"))
    ok = abs(vals[0]) <= 1e-6 and abs(vals[1] - 1.0) <= 1e-6 and abs(vals[2] - 1.0) <= 1e-6
    verdict(10, "BD oracle", ok, f"identical {vals[0]:.1e}, +1 dB offset {vals[1]:.8f}, doubled rate {vals[2]:.8f}")


def test_c11_auxiliary_parameter_budget():
    aux, base = parameter_budget(CFG.model_config())
    verdict(11, "auxiliary parameter budget", aux < 0.1 * base, f"{aux} / {base} = {100 * aux / base:.2f}%")


# -- 12: spectra ------------------------------------------------------------------

def test_c12_high_frequency_energy(art, test_set):
    images, _ = test_set
    hf1, hf2 = [], []
    for x in images:
        for a in ALPHAS3:
            stream = bitstream.compress(x, a, art.stage2, alpha_s=CFG.sweep_alpha_s).to_bytes()
            hf1.append(high_frequency_ratio(bitstream.decompress(stream, 1.0, art.stage2)))
            hf2.append(high_frequency_ratio(bitstream.decompress(stream, 0.0, art.stage2)))
    m1, m2 = float(np.mean(hf1)), float(np.mean(hf2))
    verdict(12, "high-frequency energy", m1 > m2, f"x_hat1 {m1:.5f} vs x_hat2 {m2:.5f}")
