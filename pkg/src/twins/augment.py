"""Weak/strong augmentation with consistent transfer of correspondence labels.

Geometry (crop, resize, flip) is shared by target and source and moves the
labels with it. Photometric changes (jitter, gamma, source-only occlusion)
never touch labels.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError


@dataclass(frozen=True)
class Geometry:
    """Crop box (y0, x0, h, w) of the original image, resized to out_size, optionally mirrored."""

    y0: int
    x0: int
    h: int
    w: int
    out_size: tuple
    flip: bool = False

    @property
    def scale(self):
        return self.out_size[0] / self.h, self.out_size[1] / self.w

    @classmethod
    def identity(cls, size):
        return cls(0, 0, size[0], size[1], tuple(size))

    def validate(self, in_size, mode):
        H, W = in_size
        if self.out_size[0] % 32 or self.out_size[1] % 32:
            raise ContractError(f"augmented size {self.out_size} must be divisible by 32")
        if self.y0 < 0 or self.x0 < 0 or self.y0 + self.h > H or self.x0 + self.w > W or self.h <= 0 or self.w <= 0:
            raise ContractError(f"crop {self} lies outside the {H}x{W} image")
        if self.flip and mode == "stereo":
            raise ContractError("horizontal flips change the stereo reference view; labels cannot be transferred")


@dataclass(frozen=True)
class Photometric:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    gamma_target: float = 1.0
    gamma_source: float = 1.0
    occlusion: tuple | None = None  # (y0, x0, h, w) on the source image

    @property
    def is_identity(self):
        return (
            self.brightness == 1.0
            and self.contrast == 1.0
            and self.saturation == 1.0
            and self.gamma_target == 1.0
            and self.gamma_source == 1.0
            and self.occlusion is None
        )


@dataclass(frozen=True)
class AugmentPair:
    """Teacher (weak) and student (strong) views of the same sample."""

    weak: Geometry
    strong: Geometry
    photometric: Photometric
    mode: str = "stereo"

    @classmethod
    def build(cls, weak, strong, photometric, in_size, mode):
        weak.validate(in_size, mode)
        strong.validate(in_size, mode)
        if weak.flip != strong.flip and mode == "stereo":
            raise ContractError("weak and strong views disagree on flipping in stereo mode")
        return cls(weak, strong, photometric, mode)


def sample_geometry(rng, in_size, out_size=None, max_zoom=1.2):
    H, W = in_size
    out_size = tuple(out_size or in_size)
    zoom = rng.uniform(1.0, max_zoom)
    h = min(H, int(round(out_size[0] / zoom)))
    w = min(W, int(round(out_size[1] / zoom)))
    y0 = int(rng.integers(0, H - h + 1))
    x0 = int(rng.integers(0, W - w + 1))
    return Geometry(y0, x0, h, w, out_size)


def sample_photometric(rng, in_size, occlusion_prob=0.5):
    H, W = in_size
    occ = None
    if rng.random() < occlusion_prob:
        oh = int(rng.integers(H // 8, H // 3))
        ow = int(rng.integers(W // 8, W // 3))
        occ = (int(rng.integers(0, H - oh)), int(rng.integers(0, W - ow)), oh, ow)
    return Photometric(
        brightness=float(rng.uniform(0.8, 1.2)),
        contrast=float(rng.uniform(0.8, 1.2)),
        saturation=float(rng.uniform(0.8, 1.2)),
        gamma_target=float(rng.uniform(0.8, 1.2)),
        gamma_source=float(rng.uniform(0.8, 1.2)),
        occlusion=occ,
    )


def sample_pair(rng, in_size, mode, out_size=None, max_zoom=1.2):
    weak = sample_geometry(rng, in_size, out_size, max_zoom)
    return AugmentPair.build(weak, weak, sample_photometric(rng, weak.out_size), in_size, mode)


# --- applying geometry ------------------------------------------------------


def _nearest_index(n_out, start, length):
    return start + np.floor((np.arange(n_out) + 0.5) * length / n_out).astype(np.int64)


def warp_image(img, g: Geometry):
    """img: (C, H, W) tensor."""
    out = img[:, g.y0 : g.y0 + g.h, g.x0 : g.x0 + g.w]
    if (g.h, g.w) != tuple(g.out_size):
        out = F.interpolate(out[None], size=tuple(g.out_size), mode="bilinear", align_corners=False)[0]
    if g.flip:
        out = out.flip(-1)
    return out


def warp_labels(labels, g: Geometry):
    """Nearest resampling for class maps / masks, (..., H, W)."""
    iy = torch.as_tensor(_nearest_index(g.out_size[0], g.y0, g.h))
    ix = torch.as_tensor(_nearest_index(g.out_size[1], g.x0, g.w))
    out = labels[..., iy[:, None], ix[None, :]]
    return out.flip(-1) if g.flip else out


def warp_field(field, valid, g: Geometry):
    """Resample a (2, H, W) correspondence field into the augmented frame.

    Values are scaled by the resize factors; flips negate u. Pixels whose
    match leaves the crop become invalid.
    """
    sy, sx = g.scale
    f = warp_labels(field, g).clone()
    v = warp_labels(valid, g).clone()
    if g.flip:
        f = f.flip(-1)  # undo to compute in unflipped frame
        v = v.flip(-1)
    f[0] = f[0] * sx
    f[1] = f[1] * sy
    oh, ow = g.out_size
    ys = torch.arange(oh, dtype=f.dtype)[:, None]
    xs = torch.arange(ow, dtype=f.dtype)[None, :]
    inside = (xs + f[0] >= 0) & (xs + f[0] <= ow - 1) & (ys + f[1] >= 0) & (ys + f[1] <= oh - 1)
    v = v * inside.to(v.dtype)
    if g.flip:
        f = f.flip(-1)
        v = v.flip(-1)
        f[0] = -f[0]
    return f, v


def transfer_labels(field, valid, src: Geometry, dst: Geometry):
    """Move a field predicted in the ``src`` frame into the ``dst`` frame (nearest sampling)."""
    if src == dst:
        return field, valid
    oh, ow = dst.out_size
    # continuous original-image coordinate of every dst pixel centre
    yo = dst.y0 + (np.arange(oh) + 0.5) * dst.h / oh - 0.5
    xo = dst.x0 + (np.arange(ow) + 0.5) * dst.w / ow - 0.5
    if dst.flip:
        xo = xo[::-1]
    iy = np.floor((yo - src.y0 + 0.5) * src.out_size[0] / src.h).astype(np.int64)
    ix = np.floor((xo - src.x0 + 0.5) * src.out_size[1] / src.w).astype(np.int64)
    in_y = (iy >= 0) & (iy < src.out_size[0])
    in_x = (ix >= 0) & (ix < src.out_size[1])
    iy_c = np.clip(iy, 0, src.out_size[0] - 1)
    ix_c = np.clip(ix, 0, src.out_size[1] - 1)
    if src.flip:
        ix_c = src.out_size[1] - 1 - ix_c
    iy_t, ix_t = torch.as_tensor(iy_c), torch.as_tensor(ix_c)
    f = field[:, iy_t[:, None], ix_t[None, :]].clone()
    v = valid[iy_t[:, None], ix_t[None, :]].clone()
    v = v * torch.as_tensor(in_y[:, None] & in_x[None, :]).to(v.dtype)
    # back to original pixel units, then into dst units
    sy_s, sx_s = src.scale
    sy_d, sx_d = dst.scale
    u = f[0] / sx_s * sx_d
    if src.flip != dst.flip:
        u = -u
    f = torch.stack([u, f[1] / sy_s * sy_d])
    return f, v


# --- photometric --------------------------------------------------------------


def _jitter(img, p: Photometric, gamma):
    gray = img.mean(0, keepdim=True)
    out = img * p.brightness
    out = (out - out.mean()) * p.contrast + out.mean()
    out = (out - gray) * p.saturation + gray
    return out.clamp(0, 1).pow(gamma)


def apply_photometric(target, source, p: Photometric):
    if p.is_identity:
        return target, source
    t = _jitter(target, p, p.gamma_target)
    s = _jitter(source, p, p.gamma_source)
    if p.occlusion is not None:
        y0, x0, h, w = p.occlusion
        s = s.clone()
        s[:, y0 : y0 + h, x0 : x0 + w] = s.mean(dim=(1, 2), keepdim=True)
    return t, s


def weak_view(sample, pair: AugmentPair):
    return _view(sample, pair.weak, None)


def strong_view(sample, pair: AugmentPair):
    return _view(sample, pair.strong, pair.photometric)


def _view(sample, g, photometric):
    """sample: dict of per-item tensors (target, source, optional seg/corr/valid)."""
    out = {"target": warp_image(sample["target"], g), "source": warp_image(sample["source"], g)}
    if photometric is not None:
        out["target"], out["source"] = apply_photometric(out["target"], out["source"], photometric)
    if sample.get("seg") is not None:
        out["seg"] = warp_labels(sample["seg"], g)
    if sample.get("corr") is not None:
        out["corr"], out["valid"] = warp_field(sample["corr"], sample["valid"], g)
    return out
