import pytest
import torch

from twins.backbone import Align
from twins.correlation import build_pyramid, build_volume, lookup
from twins.data import SceneSpec, generate_scene
from twins.errors import ConfigError, ContractError, NumericalError
from twins.model import TwinsNet
from twins.refinement import (
    ConvGRU,
    HiddenStateSet,
    UpdateBlock,
    convex_upsample,
    convex_weights,
    init_hidden,
    refine,
)
from twins.trainer import collate, make_state, scheduled_lr, set_lr, supervised_step

from conftest import tiny_config
from fdcheck import fd_relative_error


def pyramid_inputs(d=8, h=4, w=4, dtype=torch.float32, seed=0):
    g = torch.Generator().manual_seed(seed)
    shapes = [(h, w), (h // 2, w // 2), (h // 4, w // 4)]
    early = [torch.randn(1, d, *s, generator=g, dtype=dtype) for s in shapes]
    late = [torch.relu(torch.randn(1, d, *s, generator=g, dtype=dtype)) for s in shapes]
    return early, late


def test_init_hidden_zero_and_bounded():
    zeros = [torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 4, 4), torch.zeros(1, 4, 2, 2)]
    assert all(torch.count_nonzero(h) == 0 for h in init_hidden(zeros).levels)
    early, _ = pyramid_inputs()
    # float32 tanh rounds to +-1 beyond |x| ~ 9, so stay within a realistic range
    for h in init_hidden(early).levels:
        assert h.abs().max() < 1


def test_init_hidden_constant_taps_give_constant_states():
    torch.manual_seed(0)
    aligns = [Align(6, 8, groups=4) for _ in range(3)]
    taps = [torch.randn(1, 6, 1, 1).expand(1, 6, s, s) for s in (8, 4, 2)]
    hidden = init_hidden([a(t) for a, t in zip(aligns, taps)])
    for h in hidden.levels:
        assert torch.all(h == h[..., :1, :1])


def test_init_hidden_resolution_mismatch():
    with pytest.raises(ContractError):
        init_hidden([torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 3, 3), torch.zeros(1, 4, 2, 2)])


def _force_update_gate(gru, value):
    with torch.no_grad():
        gru.convz.weight.zero_()
        gru.convz.bias.fill_(value)


def test_gru_gate_closed_keeps_state():
    torch.manual_seed(1)
    gru = ConvGRU(4, 3).double()
    _force_update_gate(gru, -1e4)
    h = torch.tanh(torch.randn(1, 4, 5, 5, dtype=torch.float64))
    x = torch.randn(1, 3, 5, 5, dtype=torch.float64)
    assert torch.equal(gru(h, x), h)


def test_gru_gate_open_takes_candidate():
    torch.manual_seed(2)
    gru = ConvGRU(4, 3).double()
    _force_update_gate(gru, 1e4)
    h = torch.tanh(torch.randn(1, 4, 5, 5, dtype=torch.float64))
    x = torch.randn(1, 3, 5, 5, dtype=torch.float64)
    r = torch.sigmoid(gru.convr(torch.cat([h, x], 1)))
    q = torch.tanh(gru.convq(torch.cat([r * h, x], 1)))
    torch.testing.assert_close(gru(h, x), q, atol=1e-12, rtol=0)


@pytest.mark.parametrize("mode", ["stereo", "flow"])
def test_update_step_gradient(mode):
    torch.manual_seed(3)
    d, r = 8, 1
    block = UpdateBlock(d, mode, radius=r).double()
    early, late = pyramid_inputs(d, dtype=torch.float64)
    hidden = init_hidden(early)
    corr_ch = block.encoder.conv1.in_channels - 32
    g = torch.Generator().manual_seed(4)
    corr = torch.randn(1, corr_ch, 4, 4, generator=g, dtype=torch.float64)
    current = torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64)

    def step(h04, h08, h16, c04, c08, c16, corr_feat, cur):
        new, delta = block(HiddenStateSet([h04, h08, h16]), [c04, c08, c16], corr_feat, cur)
        return torch.cat([new.levels[0].flatten(), new.levels[1].flatten(), new.levels[2].flatten(), delta.flatten()])

    err = fd_relative_error(step, [*hidden.levels, *late, corr, current])
    assert err < 1e-3


def test_update_step_nan_reports_iteration():
    block = UpdateBlock(8, "stereo", radius=1)
    early, late = pyramid_inputs(8)
    corr = torch.zeros(1, 9, 4, 4)
    corr[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericalError, match="iteration 5"):
        block(init_hidden(early), late, corr, torch.zeros(1, 2, 4, 4), iteration=5)


def test_stereo_delta_second_component_zero():
    block = UpdateBlock(8, "stereo", radius=1)
    early, late = pyramid_inputs(8)
    _, delta = block(init_hidden(early), late, torch.randn(1, 9, 4, 4), torch.randn(1, 2, 4, 4))
    assert torch.count_nonzero(delta[:, 1]) == 0


def test_convex_weights_are_a_partition_of_unity():
    mask = torch.randn(2, 9 * 16, 3, 5) * 10
    w = convex_weights(mask)
    assert w.min() >= 0
    torch.testing.assert_close(w.sum(2), torch.ones_like(w.sum(2)), atol=1e-5, rtol=0)


def test_convex_upsample_of_constant_field_scales_by_four():
    field = torch.full((1, 2, 3, 5), 1.5)
    field[:, 1] = -0.5
    # interior pixels: every 3x3 neighbour equals the constant
    up = convex_upsample(field, torch.randn(1, 144, 3, 5))
    torch.testing.assert_close(up[0, 0, 4:8, 4:16], torch.full((4, 12), 6.0))
    torch.testing.assert_close(up[0, 1, 4:8, 4:16], torch.full((4, 12), -2.0))


def _small_scene(seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, 3, 64, 64, generator=g), torch.rand(1, 3, 64, 64, generator=g)


@pytest.mark.parametrize("k", [1, 4, 8])
def test_refine_trace_length_and_bounds(k):
    torch.manual_seed(5)
    model = TwinsNet(tiny_config()).eval()
    t, s = _small_scene()
    with torch.no_grad():
        out = model(t, s, iters=k, with_seg=False)
    assert len(out.trace.fields) == k
    assert all(f.shape == (1, 2, 64, 64) for f in out.trace.fields)
    for h in out.trace.final_hidden.levels:
        assert h.abs().max() < 1
    for f in out.trace.fields:
        assert torch.count_nonzero(f[:, 1]) == 0


def test_hidden_bounded_after_every_iteration():
    torch.manual_seed(6)
    block = UpdateBlock(8, "flow", radius=1)
    f = torch.randn(2, 1, 4, 4, 4)
    pyr = build_pyramid(build_volume(f[0], f[1], "flow"), "flow")
    early, late = pyramid_inputs(8)
    hidden = init_hidden([5 * e for e in early])
    current = torch.zeros(1, 2, 4, 4)
    for k in range(6):
        hidden, delta = block(hidden, [5 * c for c in late], lookup(pyr, current, 1), current, k)
        current = current + delta
        assert hidden.iteration_index == k + 1
        assert all(h.abs().max() < 1 for h in hidden.levels)


def test_refine_rejects_zero_iterations():
    block = UpdateBlock(8, "stereo", radius=1)
    f = torch.randn(2, 1, 4, 4, 4)
    pyr = build_pyramid(build_volume(f[0], f[1], "stereo"), "stereo")
    early, late = pyramid_inputs(8)
    with pytest.raises(ConfigError):
        refine(block, pyr, early, late, 0)


def test_refine_init_field_stereo_projection():
    block = UpdateBlock(8, "stereo", radius=1).eval()
    f = torch.randn(2, 1, 4, 4, 4)
    pyr = build_pyramid(build_volume(f[0], f[1], "stereo"), "stereo")
    early, late = pyramid_inputs(8)
    init = torch.randn(1, 2, 16, 16)
    trace = refine(block, pyr, early, late, 2, init=init)
    assert all(torch.count_nonzero(c[:, 1]) == 0 for c in trace.coarse_fields)


def test_refine_deterministic_in_eval():
    torch.manual_seed(7)
    model = TwinsNet(tiny_config(mode="flow")).eval()
    t, s = _small_scene(1)
    with torch.no_grad():
        a = model(t, s)
        b = model(t, s)
    for fa, fb in zip(a.trace.fields, b.trace.fields):
        assert torch.equal(fa, fb)
    assert torch.equal(a.sigma, b.sigma)


@pytest.mark.slow
def test_trained_refinement_improves_on_first_iterate():
    cfg = tiny_config(refine_iters=8, lr=5e-4, lr_schedule="linear")
    # one depth for every layer -> constant disparity over the image
    scene = generate_scene(SceneSpec(texture_seed=7, image_size=(64, 64), depth_range=(2.0, 2.0), max_disparity=6))
    batch = collate([scene])
    state = make_state(cfg)
    for s in range(500):
        set_lr(state, scheduled_lr(cfg, s, 500))
        state, _ = supervised_step(batch, state, cfg)
    state.student.eval()
    with torch.no_grad():
        fields = state.student(batch["target"], batch["source"], with_seg=False).trace.fields
    valid = batch["valid"][0] > 0.5
    first, last = ((f[0] - batch["corr"][0]).abs().sum(0)[valid].median() for f in (fields[0], fields[-1]))
    assert last < first
