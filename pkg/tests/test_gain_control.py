import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rdcodec.gain_control import (
    ALPHA_FX_SCALE,
    STAGE1_LAMBDAS,
    STAGE2_LAMBDAS,
    GainSet,
    alpha_to_fixed,
    anchor_position,
    fixed_to_alpha,
    quantize,
    round_half_away,
)


def test_round_half_away_from_zero():
    x = torch.tensor([-2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 0.49, -0.49])
    assert round_half_away(x).tolist() == [-3, -2, -1, 1, 2, 3, 0, -0]


@pytest.mark.parametrize("gain,expected", [(2.0, 1.5), (0.5, 2.0)])
def test_quantize_hand_values(gain, expected):
    v = torch.tensor([[[1.3]]], dtype=torch.float64)
    out = quantize(v, torch.tensor([gain], dtype=torch.float64))
    assert out.item() == pytest.approx(expected, abs=1e-12)


def test_unit_gain_is_plain_rounding():
    v = torch.randn(4, 5, 5, dtype=torch.float64) * 3
    assert torch.equal(quantize(v, torch.ones(4, dtype=torch.float64)), round_half_away(v))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 20.0))
def test_round_error_bound(seed, g):
    gen = torch.Generator().manual_seed(seed)
    v = torch.randn(3, 4, 4, generator=gen, dtype=torch.float64) * 10
    gain = torch.full((3,), g, dtype=torch.float64)
    err = (quantize(v, gain) - v).abs()
    assert float(err.max()) <= 0.5 / g + 1e-12


def test_noise_mode_bound_and_seeding():
    v = torch.randn(2, 8, 6, 6, dtype=torch.float64)
    gain = torch.rand(8, dtype=torch.float64) + 0.1
    a = quantize(v, gain, "noise", torch.Generator().manual_seed(7))
    b = quantize(v, gain, "noise", torch.Generator().manual_seed(7))
    assert torch.equal(a, b)
    g = gain.view(1, -1, 1, 1)
    assert float((a * g - v * g).abs().max()) <= 0.5 + 1e-12


def test_quantize_rejects_bad_gains():
    v = torch.zeros(3, 2, 2)
    with pytest.raises(ValueError):
        quantize(v, torch.ones(4))
    with pytest.raises(AssertionError):
        quantize(v, torch.tensor([1.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        quantize(v, torch.ones(3), mode="floor")


def test_default_lambda_sets():
    gs = GainSet(4, 3, 2)
    assert gs.anchor_lambdas == STAGE1_LAMBDAS == (0.0625, 0.125, 0.25, 0.5, 1.0, 2.0)
    assert gs.aux_lambdas == STAGE2_LAMBDAS
    assert gs.num_anchors == 6
    assert torch.equal(gs.anchor(3, "y"), torch.ones(4))


def _random_gains(seed=0):
    torch.manual_seed(seed)
    gs = GainSet(5, 3, 2)
    with torch.no_grad():
        for t in (gs.log_y, gs.log_z, gs.log_s):
            t.copy_(torch.randn_like(t))
    return gs


def test_anchor_positions_are_exact():
    gs = _random_gains()
    for n in range(6):
        for which in "yzs":
            assert torch.equal(gs.gain_at(n / 5, which), gs.anchor(n, which))
    assert torch.equal(gs.gain_at(0.0, "y"), gs.anchor(0, "y"))
    assert torch.equal(gs.gain_at(1.0, "y"), gs.anchor(5, "y"))


def test_geometric_midpoint():
    gs = GainSet(2, 1, 1, anchor_lambdas=(1, 2), aux_lambdas=(1, 2))
    with torch.no_grad():
        gs.log_y.copy_(torch.log(torch.tensor([[2.0, 2.0], [8.0, 8.0]])))
    assert anchor_position(0.5, 2) == (0, 0.5)
    assert torch.allclose(gs.gain_at(0.5, "y"), torch.tensor([4.0, 4.0]), rtol=1e-6)


def test_interpolation_is_continuous():
    gs = _random_gains(1)
    with torch.no_grad():
        alphas = np.linspace(0, 1, 1000)
        vals = torch.stack([gs.gain_at(float(a), "y") for a in alphas]).double()
        log_steps = (vals[1:] / vals[:-1]).log().abs().max()
        # log-space Lipschitz bound; gains are float32
        gap = (gs.log_y[1:] - gs.log_y[:-1]).abs().max().double()
        assert float(log_steps) <= float(gap * 5 / 999) * (1 + 1e-4)
        for n in range(1, 5):
            a = n / 5
            left, right = gs.gain_at(a - 1e-12, "y"), gs.gain_at(a + 1e-12, "y")
            assert float(((left - right) / right).abs().max()) < 1e-6


@pytest.mark.parametrize("alpha", [-0.01, 1.01, float("nan")])
def test_alpha_range_checked(alpha):
    with pytest.raises(ValueError):
        GainSet(2, 2, 2).gain_at(alpha, "y")


def test_alpha_fixed_point():
    assert alpha_to_fixed(0.0) == 0
    assert alpha_to_fixed(1.0) == ALPHA_FX_SCALE
    assert alpha_to_fixed(0.5) == 32768
    for fx in (0, 1, 13107, 32768, 65535):
        assert alpha_to_fixed(fixed_to_alpha(fx)) == fx
    with pytest.raises(ValueError):
        fixed_to_alpha(65536)


def test_gain_at_unknown_stream():
    with pytest.raises(ValueError):
        GainSet(2, 2, 2).gain_at(0.5, "x")
