"""Multi-level ConvGRU refinement of a correspondence field.

Hidden states live at 1/4, 1/8 and 1/16 resolution. Fields are kept at 1/4
resolution in 1/4-resolution pixel units and convex-upsampled by 4 for output.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .correlation import lookup, lookup_channels
from .errors import ConfigError, ContractError, NumericalError

UPSAMPLE = 4


@dataclass
class HiddenStateSet:
    levels: list  # [1/4, 1/8, 1/16], each (B, D, h, w)
    iteration_index: int = 0


@dataclass
class IterationTrace:
    fields: list  # K tensors (B, 2, H, W), full resolution, pixels
    final_hidden: HiddenStateSet
    coarse_fields: list  # K tensors (B, 2, H/4, W/4)


def init_hidden(aligned_early):
    if len(aligned_early) != 3:
        raise ContractError("expected three aligned early taps")
    shapes = [tuple(t.shape[-2:]) for t in aligned_early]
    for a, b in zip(shapes, shapes[1:]):
        if (a[0] // 2, a[1] // 2) != b:
            raise ContractError(f"aligned early taps are not a 2x pyramid: {shapes}")
    return HiddenStateSet([torch.tanh(t) for t in aligned_early], 0)


def pool2x(x):
    return F.avg_pool2d(x, 2, stride=2)


def interp(x, like):
    return F.interpolate(x, size=like.shape[-2:], mode="bilinear", align_corners=False)


class ConvGRU(nn.Module):
    def __init__(self, hidden_dim, input_dim, kernel_size=3):
        super().__init__()
        pad = kernel_size // 2
        self.convz = nn.Conv2d(hidden_dim + input_dim, hidden_dim, kernel_size, padding=pad)
        self.convr = nn.Conv2d(hidden_dim + input_dim, hidden_dim, kernel_size, padding=pad)
        self.convq = nn.Conv2d(hidden_dim + input_dim, hidden_dim, kernel_size, padding=pad)

    def forward(self, h, *inputs):
        x = torch.cat(inputs, dim=1)
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(self.convz(hx))
        r = torch.sigmoid(self.convr(hx))
        q = torch.tanh(self.convq(torch.cat([r * h, x], dim=1)))
        return (1 - z) * h + z * q


class MotionEncoder(nn.Module):
    def __init__(self, corr_channels, out_dim):
        super().__init__()
        self.convf = nn.Conv2d(2, 32, 7, padding=3)
        self.conv1 = nn.Conv2d(corr_channels + 32, out_dim, 1)
        self.conv2 = nn.Conv2d(out_dim, out_dim - 2, 3, padding=1)

    def forward(self, corr, field):
        f = F.relu(self.convf(field))
        m = F.relu(self.conv1(torch.cat([corr, f], dim=1)))
        m = F.relu(self.conv2(m))
        return torch.cat([m, field], dim=1)


class FieldHead(nn.Module):
    def __init__(self, hidden_dim, mid=128):
        super().__init__()
        self.conv1 = nn.Conv2d(hidden_dim, mid, 3, padding=1)
        self.conv2 = nn.Conv2d(mid, 2, 3, padding=1)

    def forward(self, h):
        return self.conv2(F.relu(self.conv1(h)))


class UpdateBlock(nn.Module):
    """One refinement step over all three levels (coarse to fine)."""

    def __init__(self, hidden_dim=96, mode="stereo", radius=4, num_levels=3):
        super().__init__()
        self.mode = mode
        self.radius = radius
        d = hidden_dim
        self.encoder = MotionEncoder(lookup_channels(mode, radius, num_levels), d)
        self.gru16 = ConvGRU(d, d + d)  # late ctx + pooled 1/8
        self.gru08 = ConvGRU(d, d + d + d)  # late ctx + pooled 1/4 + upsampled 1/16
        self.gru04 = ConvGRU(d, d + d + d)  # late ctx + motion + upsampled 1/8
        self.head = FieldHead(d, mid=max(d, 64))
        self.mask = nn.Sequential(
            nn.Conv2d(d, 2 * d, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * d, 9 * UPSAMPLE * UPSAMPLE, 1),
        )

    def forward(self, hidden: HiddenStateSet, aligned_late, corr_feat, current, iteration=0):
        """Returns (new HiddenStateSet, delta field at 1/4 resolution)."""
        for name, t in (("corr_feat", corr_feat), ("current", current), *(
            (f"hidden[{j}]", h) for j, h in enumerate(hidden.levels)
        ), *((f"aligned_late[{j}]", a) for j, a in enumerate(aligned_late))):
            if not torch.isfinite(t).all():
                raise NumericalError(f"non-finite values in {name} at iteration {iteration}")
        h04, h08, h16 = hidden.levels
        c04, c08, c16 = aligned_late
        h16 = self.gru16(h16, c16, pool2x(h08))
        h08 = self.gru08(h08, c08, pool2x(h04), interp(h16, h08))
        motion = self.encoder(corr_feat, current)
        h04 = self.gru04(h04, c04, motion, interp(h08, h04))
        delta = self.head(h04)
        if self.mode == "stereo":
            delta = torch.cat([delta[:, :1], torch.zeros_like(delta[:, 1:])], dim=1)
        return HiddenStateSet([h04, h08, h16], hidden.iteration_index + 1), delta

    def upsample_mask(self, h04):
        return 0.25 * self.mask(h04)


def convex_weights(mask):
    b, _, h, w = mask.shape
    return torch.softmax(mask.view(b, 1, 9, UPSAMPLE, UPSAMPLE, h, w), dim=2)


def convex_upsample(field, mask):
    """Upsample a 1/4-resolution field to full resolution, scaling values by 4."""
    b, c, h, w = field.shape
    weights = convex_weights(mask)
    patches = F.unfold(UPSAMPLE * field, [3, 3], padding=1).view(b, c, 9, 1, 1, h, w)
    up = torch.sum(weights * patches, dim=2)
    up = up.permute(0, 1, 4, 2, 5, 3)
    return up.reshape(b, c, UPSAMPLE * h, UPSAMPLE * w)


def refine(update: UpdateBlock, pyr, aligned_early, aligned_late, iters, init=None):
    """Run ``iters`` refinement steps; ``init`` is a full-resolution field in pixels."""
    if iters < 1:
        raise ConfigError(f"iteration count must be >= 1, got {iters}")
    hidden = init_hidden(aligned_early)
    h04 = hidden.levels[0]
    b, _, h, w = h04.shape
    if init is None:
        current = h04.new_zeros(b, 2, h, w)
    else:
        current = F.interpolate(init, size=(h, w), mode="nearest") / UPSAMPLE
        if update.mode == "stereo":
            current = torch.cat([current[:, :1], torch.zeros_like(current[:, 1:])], dim=1)
    fields, coarse = [], []
    for k in range(iters):
        current = current.detach()
        corr_feat = lookup(pyr, current, update.radius)
        hidden, delta = update(hidden, aligned_late, corr_feat, current, iteration=k)
        current = current + delta
        coarse.append(current)
        fields.append(convex_upsample(current, update.upsample_mask(hidden.levels[0])))
    return IterationTrace(fields, hidden, coarse)
