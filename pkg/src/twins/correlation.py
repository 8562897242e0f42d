"""All-pairs correlation volume, its pooled pyramid, and windowed lookups.

Stereo volumes have shape (B, H, W_t, W_s): correlation only along the row.
Flow volumes have shape (B, H, W, H_s, W_s). Pooling always acts on the
trailing source dimensions.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ContractError


def build_volume(f_t, f_s, mode="stereo"):
    """Raw inner products between target and source features, (B, C, H, W) each."""
    if f_t.shape != f_s.shape:
        raise ContractError(f"feature shapes differ: {tuple(f_t.shape)} vs {tuple(f_s.shape)}")
    if mode == "stereo":
        return torch.einsum("bchi,bchj->bhij", f_t, f_s)
    if mode == "flow":
        b, c, h, w = f_t.shape
        vol = torch.einsum("bcp,bcq->bpq", f_t.reshape(b, c, h * w), f_s.reshape(b, c, h * w))
        return vol.reshape(b, h, w, h, w)
    raise ContractError(f"unknown mode {mode!r}")


@dataclass
class CorrelationPyramid:
    levels: list
    mode: str

    @property
    def base_resolution(self):
        return tuple(self.levels[0].shape[1:3])


def pool_source(vol, mode):
    if mode == "stereo":
        b, h, w, ws = vol.shape
        out = F.avg_pool1d(vol.reshape(b * h * w, 1, ws), 2, stride=2)
        return out.reshape(b, h, w, -1)
    b, h, w, hs, ws = vol.shape
    out = F.avg_pool2d(vol.reshape(b * h * w, 1, hs, ws), 2, stride=2)
    return out.reshape(b, h, w, *out.shape[-2:])


def build_pyramid(volume, mode="stereo", num_levels=3):
    levels = [volume]
    for _ in range(num_levels - 1):
        levels.append(pool_source(levels[-1], mode))
    return CorrelationPyramid(levels, mode)


def _sample_1d(values, x):
    """Linear interpolation of values (N, L) at positions x (N, K), clamped to [0, L-1]."""
    n = values.shape[-1]
    x = x.clamp(0, n - 1)
    x0 = x.floor().clamp(max=max(n - 2, 0))
    a = x - x0
    i0 = x0.long()
    i1 = (i0 + 1).clamp(max=n - 1)
    return values.gather(1, i0) * (1 - a) + values.gather(1, i1) * a


def _sample_2d(values, x, y):
    """Bilinear interpolation of values (N, Hs, Ws) at (x, y) of shape (N, K), clamped."""
    n, hs, ws = values.shape
    flat = values.reshape(n, hs * ws)
    x = x.clamp(0, ws - 1)
    y = y.clamp(0, hs - 1)
    x0 = x.floor().clamp(max=max(ws - 2, 0))
    y0 = y.floor().clamp(max=max(hs - 2, 0))
    ax, ay = x - x0, y - y0
    ix0, iy0 = x0.long(), y0.long()
    ix1 = (ix0 + 1).clamp(max=ws - 1)
    iy1 = (iy0 + 1).clamp(max=hs - 1)

    def at(iy, ix):
        return flat.gather(1, iy * ws + ix)

    top = at(iy0, ix0) * (1 - ax) + at(iy0, ix1) * ax
    bot = at(iy1, ix0) * (1 - ax) + at(iy1, ix1) * ax
    return top * (1 - ay) + bot * ay


def lookup_channels(mode, radius, num_levels=3):
    window = 2 * radius + 1
    return num_levels * (window if mode == "stereo" else window * window)


def lookup(pyr: CorrelationPyramid, current, radius=4):
    """Sample each pyramid level in a window around the displaced position.

    ``current`` is a (B, 2, H, W) correspondence field at the pyramid's base
    resolution. Returns (B, lookup_channels, H, W); level-major channel order,
    x-offset fastest.
    """
    b, _, h, w = current.shape
    if (h, w) != pyr.base_resolution:
        raise ContractError(f"field {h}x{w} does not match pyramid base {pyr.base_resolution}")
    dtype, device = current.dtype, current.device
    offsets = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    px = (xs + current[:, 0]).reshape(b * h * w, 1)
    py = (ys + current[:, 1]).reshape(b * h * w, 1)

    out = []
    for lvl, vol in enumerate(pyr.levels):
        scale = 2.0**lvl
        if pyr.mode == "stereo":
            values = vol.reshape(b * h * w, vol.shape[-1])
            sampled = _sample_1d(values, px / scale + offsets[None])
        else:
            values = vol.reshape(b * h * w, vol.shape[-2], vol.shape[-1])
            dy, dx = torch.meshgrid(offsets, offsets, indexing="ij")
            sampled = _sample_2d(values, px / scale + dx.reshape(1, -1), py / scale + dy.reshape(1, -1))
        out.append(sampled.reshape(b, h, w, -1))
    return torch.cat(out, dim=-1).permute(0, 3, 1, 2).contiguous()
