"""Four-stage convolutional encoder with early/late taps, plus tap alignment."""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


class LayerNorm2d(nn.Module):
    """Per-pixel normalisation over channels (keeps convolutions local)."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(1, keepdim=True)
        var = (x - mean).pow(2).mean(1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm = LayerNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.norm(self.conv1(x))))


class Stage(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.down = nn.Conv2d(in_ch, out_ch, stride, stride=stride)
        self.block1 = ResidualBlock(out_ch)
        self.block2 = ResidualBlock(out_ch)

    def forward(self, x):
        x = self.down(x)
        early = self.block1(x)
        late = self.block2(early)
        return early, late


@dataclass
class FeaturePyramid:
    stages: list  # 4 tensors, (B, C_i, H / 2^(i+1), W / 2^(i+1))

    @property
    def channel_counts(self):
        return [s.shape[1] for s in self.stages]


@dataclass
class EarlyLateTaps:
    early: list  # stages 1-3
    late: list


def check_divisible(h, w, factor=32):
    if h % factor or w % factor:
        raise ConfigError(f"input size {h}x{w} must be divisible by {factor}")


class Encoder(nn.Module):
    """Stride-4 stem stage followed by three stride-2 stages.

    Stage outputs are the late taps; early taps are the first residual block
    outputs. The same module encodes target and source (shared weights).
    """

    def __init__(self, channels=(48, 96, 192, 384), in_channels=3):
        super().__init__()
        channels = list(channels)
        if len(channels) != 4 or any(b < a for a, b in zip(channels, channels[1:])):
            raise ConfigError(f"backbone.channels must be 4 non-decreasing ints, got {channels}")
        self.channels = channels
        ins = [in_channels] + channels[:-1]
        strides = [4, 2, 2, 2]
        self.stages = nn.ModuleList(Stage(i, o, s) for i, o, s in zip(ins, channels, strides))

    def forward(self, image):
        check_divisible(*image.shape[-2:])
        x = image
        outs, early, late = [], [], []
        for i, stage in enumerate(self.stages):
            e, x = stage(x)
            outs.append(x)
            if i < 3:
                early.append(e)
                late.append(x)
        return FeaturePyramid(outs), EarlyLateTaps(early, late)

    def layer_geometry(self):
        """(kernel, stride, padding) of every conv in stage order, for receptive-field analysis."""
        geo = []
        for stage in self.stages:
            stage_geo = [(stage.down.kernel_size[0], stage.down.stride[0], stage.down.padding[0])]
            for block in (stage.block1, stage.block2):
                for conv in (block.conv1, block.conv2):
                    stage_geo.append((conv.kernel_size[0], conv.stride[0], conv.padding[0]))
            geo.append(stage_geo)
        return geo


class Align(nn.Module):
    """1x1 conv -> GroupNorm -> ReLU, mapping a tap to the GRU hidden width."""

    def __init__(self, in_channels, target_channels, groups=8, eps=1e-8):
        super().__init__()
        if target_channels <= 0 or target_channels % groups:
            raise ConfigError(f"group count {groups} must divide target channels {target_channels}")
        self.proj = nn.Conv2d(in_channels, target_channels, 1)
        # a small eps keeps the normalisation scale invariant over a wide input range
        self.norm = nn.GroupNorm(groups, target_channels, eps=eps)

    def normalized(self, x):
        return self.norm(self.proj(x))

    def forward(self, x):
        return F.relu(self.normalized(x))


class TapAligner(nn.Module):
    """Independent Align modules for every (tap, level) pair."""

    def __init__(self, channels, hidden_width, groups=8):
        super().__init__()
        self.early = nn.ModuleList(Align(c, hidden_width, groups) for c in channels[:3])
        self.late = nn.ModuleList(Align(c, hidden_width, groups) for c in channels[:3])

    def forward(self, taps: EarlyLateTaps):
        early = [m(t) for m, t in zip(self.early, taps.early)]
        late = [m(t) for m, t in zip(self.late, taps.late)]
        return early, late
