import csv

import numpy as np
import pytest
import torch

from fdcheck import check_input, check_params
from rdcodec.codec_core import ModelConfig, VersatileCodec
from rdcodec.cognition import ContrastiveEncoder
from rdcodec.data import make_split
from rdcodec.training import (
    DISTORTION_SCALE,
    DivergenceMonitor,
    FrozenParameterError,
    StageIConfig,
    StageIIConfig,
    TrainingError,
    local_mse,
    parameter_fingerprint,
    stage1_loss,
    stage2_loss,
    train_stage1,
    train_stage2,
)

TINY = ModelConfig(c_y=8, c_z=4, c_s=6, hidden=8, scalable_hidden=4, residual_hidden=4)


def test_local_mse_hand_value():
    x_hat = torch.tensor([1.5, 0.5, -0.2, 0.8])
    x = torch.tensor([1.0, 0.5, 0.0, 0.8])
    assert float(local_mse(x, x_hat)) == pytest.approx(0.0725)


def test_local_mse_boundaries():
    x = torch.rand(3, 8, 8)
    assert float(local_mse(x, torch.rand(3, 8, 8))) == 0.0
    edge = torch.tensor([0.0, 1.0, 1.0 + 1e-6])
    assert float(local_mse(torch.zeros(3), edge)) == pytest.approx((1 + 1e-6) ** 2 / 3)
    with pytest.raises(ValueError):
        local_mse(torch.zeros(3), torch.zeros(4))


def test_local_mse_gradient():
    torch.manual_seed(0)
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    x_hat = torch.randn(2, 3, 8, 8, dtype=torch.float64) * 0.6 + 0.5
    assert check_input(lambda v: local_mse(x, v), x_hat, count=30) <= 1e-4


def _setup(seed=0):
    torch.manual_seed(seed)
    model = VersatileCodec(TINY).double()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.05)
    enc = ContrastiveEncoder(dim=16, width=4).double().freeze()
    negatives = torch.nn.functional.normalize(torch.randn(32, 16, dtype=torch.float64), dim=-1)
    x = torch.rand(2, 3, 64, 64, dtype=torch.float64)
    return model, enc, negatives, x


def _s1(model, enc, negatives, x, lam=None, cfg=None, n=2):
    cfg = cfg or StageIConfig(queue_size=32)
    return stage1_loss(x, model, n, enc, negatives, cfg, torch.Generator().manual_seed(5), lambda_n=lam)


@torch.no_grad()
def test_stage1_terms_combine_linearly():
    model, enc, neg, x = _setup()
    cfg = StageIConfig(queue_size=32)
    t0 = _s1(model, enc, neg, x, lam=0.0)
    expected = t0["rate_y"] + t0["rate_z"] + cfg.lambda_local * DISTORTION_SCALE * t0["local"]
    assert float(t0["total"]) == pytest.approx(float(expected), rel=1e-12)
    t1 = _s1(model, enc, neg, x, lam=0.5)
    t2 = _s1(model, enc, neg, x, lam=1.0)
    c1 = float(t1["total"] - t0["total"])
    c2 = float(t2["total"] - t0["total"])
    assert c2 == pytest.approx(2 * c1, rel=1e-10)


def test_stage1_gradient():
    model, enc, neg, x = _setup()
    params = list(model.primary_parameters())
    assert check_params(lambda: _s1(model, enc, neg, x)["total"], params, count=10, seed=1) <= 1e-4


def test_stage1_gradient_through_local_term():
    model, enc, neg, x = _setup()
    with torch.no_grad():
        model.transforms.g_s[-1].bias.fill_(1.2)  # push outputs out of range
    cfg = StageIConfig(queue_size=32, lambda_local=1.0)
    params = [model.transforms.g_s[-1].weight, model.transforms.g_s[-1].bias]
    t = _s1(model, enc, neg, x, cfg=cfg)
    assert t["local"].item() > 0
    assert check_params(lambda: _s1(model, enc, neg, x, cfg=cfg)["total"], params, count=10) <= 1e-4


def test_stage1_rejects_non_finite():
    model, enc, neg, x = _setup()
    with pytest.raises(TrainingError, match="local|rate|contrastive|total"):
        _s1(model, enc, neg, x * float("nan"))


def _s2(model, x, lam=None, n=1, m=3):
    return stage2_loss(x, model, n, m, StageIIConfig(), torch.Generator().manual_seed(9), lambda_m=lam)


def test_stage2_starts_at_primary_quality():
    torch.manual_seed(0)
    model = VersatileCodec(TINY).double()
    x = torch.rand(2, 3, 64, 64, dtype=torch.float64)
    t = _s2(model, x)
    assert torch.equal(t["x_hat2"], t["x_hat1"])


def test_stage2_gradient_reaches_only_auxiliary():
    model, _, _, x = _setup()
    for p in model.primary_parameters():
        p.requires_grad_(False)
    t = _s2(model, x)
    t["total"].backward()
    assert all(p.grad is None for p in model.primary_parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.auxiliary_parameters())
    params = list(model.auxiliary_parameters())
    assert check_params(lambda: _s2(model, x)["total"], params, count=10, seed=2) <= 1e-4


def test_divergence_monitor():
    mon = DivergenceMonitor(factor=10, patience=3)
    mon.update(1.0)
    for v in (20.0, 20.0, 5.0, 20.0, 20.0):
        mon.update(v)
    with pytest.raises(TrainingError, match="diverged"):
        mon.update(20.0)


@pytest.fixture(scope="module")
def tiny_data():
    images, _ = make_split("train", 32)
    return images


@pytest.fixture(scope="module")
def frozen_encoder():
    torch.manual_seed(0)
    return ContrastiveEncoder(dim=16, width=4).freeze()


def test_stage1_requires_frozen_encoder(tiny_data):
    with pytest.raises(TrainingError):
        train_stage1(StageIConfig(steps=1), tiny_data, ContrastiveEncoder(dim=16, width=4), TINY)


def test_stage1_is_deterministic_and_logs(tmp_path, tiny_data, frozen_encoder):
    cfg = StageIConfig(steps=4, batch_size=4, queue_size=32)
    h = frozen_encoder.fingerprint()
    a = train_stage1(cfg, tiny_data, frozen_encoder, TINY, tmp_path / "a", log_every=0)
    b = train_stage1(cfg, tiny_data, frozen_encoder, TINY, tmp_path / "b", log_every=0)
    assert frozen_encoder.fingerprint() == h
    assert parameter_fingerprint(a.parameters()) == parameter_fingerprint(b.parameters())
    assert (tmp_path / "a" / "stage1.ckpt").read_bytes() == (tmp_path / "b" / "stage1.ckpt").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a" / "stage1_log.csv")))
    assert len(rows) == 4
    assert set(rows[0]) == {"step", "n", "lambda_n", "rate_y", "rate_z", "contrastive", "local", "total"}
    assert all(float(r["lambda_n"]) == cfg.lambdas[int(r["n"])] for r in rows)
    assert a.trained_stage == 1


def test_stage2_needs_stage1_model(tiny_data):
    with pytest.raises(TrainingError):
        train_stage2(StageIIConfig(steps=1), VersatileCodec(TINY), tiny_data)


def test_stage2_freezes_primary_and_rate_falls_without_distortion(tmp_path, tiny_data, frozen_encoder):
    model = train_stage1(StageIConfig(steps=2, batch_size=4, queue_size=32), tiny_data, frozen_encoder, TINY,
                         log_every=0)
    before = parameter_fingerprint(model.primary_parameters())
    cfg = StageIIConfig(lambdas=(0.0,) * 6, steps=100, batch_size=4, lr=1e-3, gain_lr=1e-2)
    train_stage2(cfg, model, tiny_data, tmp_path, log_every=0)
    assert parameter_fingerprint(model.primary_parameters()) == before
    rates = [float(r["rate_s"]) for r in csv.DictReader(open(tmp_path / "stage2_log.csv"))]
    assert np.mean(rates[-10:]) < np.mean(rates[:10])
    assert model.trained_stage == 2


def test_stage2_detects_gradient_on_frozen_parameter(tiny_data, frozen_encoder, monkeypatch):
    import rdcodec.training as tr

    model = train_stage1(StageIConfig(steps=1, batch_size=4, queue_size=32), tiny_data, frozen_encoder, TINY,
                         log_every=0)
    real = tr.stage2_loss

    def leaky(x, model, n, m, cfg, gen):
        terms = real(x, model, n, m, cfg, gen)
        model.transforms.g_s[0].bias.requires_grad_(True)
        terms["total"] = terms["total"] + model.transforms.g_s[0].bias.sum()
        return terms

    monkeypatch.setattr(tr, "stage2_loss", leaky)
    with pytest.raises(FrozenParameterError):
        train_stage2(StageIIConfig(steps=1, batch_size=2), model, tiny_data)
