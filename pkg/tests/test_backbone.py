import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from twins.backbone import Align, Encoder, TapAligner
from twins.errors import ConfigError
from twins.model import TwinsNet

from conftest import tiny_config
from fdcheck import fd_relative_error

CH = (8, 16, 16, 32)


def test_stage_shapes_64():
    enc = Encoder(CH).eval()
    pyr, taps = enc(torch.randn(1, 3, 64, 64))
    assert [tuple(s.shape[1:]) for s in pyr.stages] == [(8, 16, 16), (16, 8, 8), (16, 4, 4), (32, 2, 2)]
    assert pyr.channel_counts == list(CH)
    for e, l, s in zip(taps.early, taps.late, pyr.stages):
        assert e.shape == l.shape == s.shape
    assert len(taps.early) == len(taps.late) == 3


@settings(max_examples=6, deadline=None)
@given(h=st.integers(1, 3), w=st.integers(1, 3))
def test_shape_contract_for_multiples_of_32(h, w):
    H, W = 32 * h, 32 * w
    pyr, _ = Encoder(CH)(torch.randn(1, 3, H, W))
    for i, s in enumerate(pyr.stages, start=1):
        assert tuple(s.shape[-2:]) == (H // 2 ** (i + 1), W // 2 ** (i + 1))


def test_non_divisible_input_rejected():
    with pytest.raises(ConfigError):
        Encoder(CH)(torch.randn(1, 3, 48, 64))


def test_decreasing_channels_rejected():
    with pytest.raises(ConfigError):
        Encoder((32, 16, 64, 64))


def test_zero_image_zero_bias_gives_zero_features():
    enc = Encoder(CH)
    with torch.no_grad():
        for m in enc.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.bias.zero_()
    pyr, taps = enc(torch.zeros(1, 3, 64, 64))
    for t in pyr.stages + taps.early + taps.late:
        assert torch.count_nonzero(t) == 0


def _receptive_ranges(geometry):
    """Per stage: (lo, hi, jump) such that output j sees input [j*jump+lo, j*jump+hi]."""
    lo, hi, jump = 0, 0, 1
    out = []
    for stage in geometry:
        for k, s, p in stage:
            lo, hi, jump = lo - p * jump, hi + (k - 1 - p) * jump, jump * s
        out.append((lo, hi, jump))
    return out


def test_perturbation_stays_within_receptive_field():
    torch.manual_seed(0)
    enc = Encoder(CH).double().eval()
    x = torch.randn(1, 3, 128, 128, dtype=torch.float64)
    y0, x0 = 70, 37
    x2 = x.clone()
    x2[0, :, y0, x0] += 1.0
    with torch.no_grad():
        a, _ = enc(x)
        b, _ = enc(x2)
    for stage, (lo, hi, jump), fa, fb in zip(range(4), _receptive_ranges(enc.layer_geometry()), a.stages, b.stages):
        changed = (fa - fb).abs().amax(1)[0] > 0
        n = changed.shape[0]
        pos = np.arange(n)
        allowed_y = (pos * jump + lo <= y0) & (y0 <= pos * jump + hi)
        allowed_x = (pos * jump + lo <= x0) & (x0 <= pos * jump + hi)
        allowed = torch.as_tensor(allowed_y[:, None] & allowed_x[None, :])
        assert changed.any(), f"stage {stage} did not react"
        assert not (changed & ~allowed).any(), f"stage {stage} changed outside its receptive field"


def test_siamese_weights_shared(tiny_cfg):
    model = TwinsNet(tiny_cfg).eval()
    assert model.geo_encoder is None
    t, s = torch.randn(1, 3, 64, 64), torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        both, _ = model.encoder(torch.cat([t, s]))
        only_s, _ = model.encoder(s)
    for a, b in zip(both.stages, only_s.stages):
        torch.testing.assert_close(a[1:], b, atol=1e-5, rtol=1e-5)


def test_independent_context_has_separate_weights():
    model = TwinsNet(tiny_config(refine_context="independent"))
    assert model.geo_encoder is not None
    shared = {id(p) for p in model.encoder.parameters()} & {id(p) for p in model.geo_encoder.parameters()}
    assert not shared


def test_align_rectified_and_normalized():
    torch.manual_seed(1)
    m = Align(24, 16, groups=8)
    x = torch.randn(2, 24, 5, 7) * 3 + 1
    y = m(x)
    assert y.shape == (2, 16, 5, 7)
    assert y.min() >= 0
    pre = m.normalized(x).reshape(2, 8, -1)
    torch.testing.assert_close(pre.mean(-1), torch.zeros(2, 8), atol=1e-4, rtol=0)
    torch.testing.assert_close(pre.var(-1, unbiased=False), torch.ones(2, 8), atol=1e-4, rtol=0)


def test_align_group_count_must_divide():
    with pytest.raises(ConfigError):
        Align(8, 12, groups=8)


# exact up to the normaliser's eps; scales here keep eps / variance below 1e-5
@pytest.mark.parametrize("k", [0.1, 0.5, 3.0, 250.0])
def test_align_scale_invariance(k):
    torch.manual_seed(2)
    m = Align(12, 16, groups=4).double()
    with torch.no_grad():
        m.proj.bias.zero_()
    x = torch.randn(1, 12, 6, 6, dtype=torch.float64)
    torch.testing.assert_close(m.normalized(k * x), m.normalized(x), atol=1e-5, rtol=0)


def test_align_gradient():
    torch.manual_seed(3)
    m = Align(6, 8, groups=4).double()
    assert fd_relative_error(m, [torch.randn(1, 6, 8, 8)]) < 1e-3


def test_tap_aligner_independent_weights():
    ta = TapAligner(CH, 16, 8)
    ids = [id(m.proj.weight) for m in list(ta.early) + list(ta.late)]
    assert len(set(ids)) == 6
