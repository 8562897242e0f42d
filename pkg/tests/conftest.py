import pytest

from twins.config import TwinsConfig


def tiny_config(**kw):
    base = dict(
        backbone_channels=(16, 16, 32, 32),
        refine_hidden_width=16,
        refine_iters=3,
        decoder_dim=32,
        unc_width=8,
        corr_radius=2,
        batch_size=1,
    )
    base.update(kw)
    return TwinsConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def verdict(request, capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def emit(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
