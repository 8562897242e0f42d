"""Synthetic layered-plane scenes and the on-disk collection format.

A scene is a stack of textured fronto-parallel layers. Every layer moves by a
single integer displacement between the target and the source view, so the
ground-truth correspondence is exact and the source image is an exact warp of
the target wherever the pixel stays visible.

Correspondence convention: the source position of target pixel ``p`` is
``p + corr(p)`` with ``corr = (u, v)`` in pixels. In stereo mode ``v == 0`` and
``u >= 0``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, FormatError

MODES = ("stereo", "flow")
MAGIC = b"TWNS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class SceneSpec:
    num_objects: int = 4
    depth_range: tuple[float, float] = (2.0, 20.0)
    texture_seed: int = 0
    image_size: tuple[int, int] = (96, 128)
    num_classes: int = 5
    max_disparity: int = 16
    # texture appearance; shifting these gives a second "domain" for semi-supervised runs
    texture_sigma: float = 1.0
    contrast: float = 0.35

    def validate(self):
        h, w = self.image_size
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ConfigError(f"image_size {self.image_size} must be positive and divisible by 32")
        if self.num_objects < 1:
            raise ConfigError("num_objects must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        lo, hi = self.depth_range
        if not 0 < lo <= hi:
            raise ConfigError(f"depth_range {self.depth_range} must satisfy 0 < min <= max")
        if self.max_disparity < 0:
            raise ConfigError("max_disparity must be >= 0")
        if self.texture_sigma < 0 or not 0 < self.contrast <= 1:
            raise ConfigError("texture_sigma must be >= 0 and contrast in (0, 1]")


@dataclass
class ImageCollection:
    target_image: np.ndarray  # H x W x 3 float32 in [0, 1]
    source_image: np.ndarray
    mode: str = "stereo"
    gt_correspondence: np.ndarray | None = None  # H x W x 2 float32
    gt_segmentation: np.ndarray | None = None  # H x W int64
    valid: np.ndarray | None = None  # H x W float32 in {0, 1}
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.target_image.shape != self.source_image.shape:
            raise ConfigError("target and source images must share H, W")

    @property
    def shape(self):
        return self.target_image.shape[:2]

    def without_correspondence(self):
        return replace(self, gt_correspondence=None, valid=None)


def class_palette(num_classes):
    """Fixed per-class base colours; layers of one class share a tint."""
    rng = np.random.default_rng(12345)
    return rng.uniform(0.2, 0.8, size=(num_classes, 3)).astype(np.float32)


def _layer_classes(num_layers, num_classes):
    # background is class 0, objects cycle through the remaining classes
    return [0] + [1 + (k % (num_classes - 1)) for k in range(num_layers - 1)]


def _random_mask(rng, canvas_h, canvas_w, h, w, margin):
    mh = int(rng.integers(h // 4, h * 3 // 5 + 1))
    mw = int(rng.integers(w // 4, w * 3 // 5 + 1))
    cy = int(rng.integers(0, h)) + margin
    cx = int(rng.integers(0, w)) + margin
    yy, xx = np.mgrid[0:canvas_h, 0:canvas_w]
    if rng.random() < 0.5:
        return (np.abs(yy - cy) <= mh // 2) & (np.abs(xx - cx) <= mw // 2)
    return ((yy - cy) / (mh / 2)) ** 2 + ((xx - cx) / (mw / 2)) ** 2 <= 1.0


def generate_scene(spec: SceneSpec, mode: str = "stereo") -> ImageCollection:
    spec.validate()
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    rng = np.random.default_rng(spec.texture_seed)
    h, w = spec.image_size
    margin = spec.max_disparity + 1
    ch, cw = h + 2 * margin, w + 2 * margin

    lo, hi = spec.depth_range
    object_depths = np.sort(rng.uniform(lo, hi, size=spec.num_objects))[::-1]
    depths = np.concatenate([[hi], object_depths])  # far to near; background first
    scale = spec.max_disparity * lo / depths
    if mode == "stereo":
        disp = np.rint(scale).astype(int)
        shifts = [(int(d), 0) for d in disp]
    else:
        angle = rng.uniform(0, 2 * np.pi)
        direction = np.array([np.cos(angle), np.sin(angle)])
        shifts = [tuple(int(v) for v in np.rint(s * direction)) for s in scale]

    classes = _layer_classes(len(depths), spec.num_classes)
    palette = class_palette(spec.num_classes)
    masks, textures = [], []
    for k in range(len(depths)):
        if k == 0:
            masks.append(np.ones((ch, cw), dtype=bool))
        else:
            masks.append(_random_mask(rng, ch, cw, h, w, margin))
        noise = rng.standard_normal((ch, cw, 3)).astype(np.float32)
        if spec.texture_sigma > 0:
            noise = gaussian_filter(noise, sigma=(spec.texture_sigma, spec.texture_sigma, 0))
        noise /= noise.std() + 1e-8
        tex = palette[classes[k]] + spec.contrast * 0.5 * noise
        textures.append(np.clip(tex, 0.0, 1.0))

    target = np.zeros((h, w, 3), np.float32)
    source = np.zeros((h, w, 3), np.float32)
    tgt_layer = np.zeros((h, w), np.int64)
    src_layer = np.zeros((h, w), np.int64)
    for k, (u, v) in enumerate(shifts):
        # target view: layer in its own frame; source view: layer content at q - d
        sl_t = (slice(margin, margin + h), slice(margin, margin + w))
        sl_s = (slice(margin - v, margin - v + h), slice(margin - u, margin - u + w))
        m_t = masks[k][sl_t]
        m_s = masks[k][sl_s]
        target[m_t] = textures[k][sl_t][m_t]
        tgt_layer[m_t] = k
        source[m_s] = textures[k][sl_s][m_s]
        src_layer[m_s] = k

    # exact 8-bit quantisation so PNG round trips are lossless
    target = (np.rint(target * 255.0) / 255.0).astype(np.float32)
    source = (np.rint(source * 255.0) / 255.0).astype(np.float32)

    shift_arr = np.asarray(shifts, dtype=np.float32)
    corr = shift_arr[tgt_layer]
    seg = np.asarray(classes, dtype=np.int64)[tgt_layer]

    # z-buffer visibility: the splat of p lands on q = p + d; p is visible iff
    # the nearest layer rendered at q is p's own layer
    yy, xx = np.mgrid[0:h, 0:w]
    qx = xx + corr[..., 0].astype(np.int64)
    qy = yy + corr[..., 1].astype(np.int64)
    inside = (qx >= 0) & (qx < w) & (qy >= 0) & (qy < h)
    valid = np.zeros((h, w), np.float32)
    valid[inside] = (src_layer[qy[inside], qx[inside]] == tgt_layer[inside]).astype(np.float32)

    return ImageCollection(
        target_image=target,
        source_image=source,
        mode=mode,
        gt_correspondence=corr,
        gt_segmentation=seg,
        valid=valid,
        meta={"layer_shifts": shifts, "layer_classes": classes},
    )


def warp_source_to_target(source, corr):
    """Bilinearly sample ``source`` at ``p + corr(p)`` with border clamping."""
    h, w = source.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    x = np.clip(xx + corr[..., 0], 0, w - 1)
    y = np.clip(yy + corr[..., 1], 0, h - 1)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2)
    ax = (x - x0)[..., None]
    ay = (y - y0)[..., None]
    top = source[y0, x0] * (1 - ax) + source[y0, x0 + 1] * ax
    bot = source[y0 + 1, x0] * (1 - ax) + source[y0 + 1, x0 + 1] * ax
    return top * (1 - ay) + bot * ay


# --- on-disk format ---------------------------------------------------------


def write_field(path, array):
    """Write an H x W [x C] float array as a TWNS binary field."""
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, h, w, c))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_field(path):
    path = Path(path)
    if not path.exists():
        raise FormatError("missing file", path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", path)
    magic, version, h, w, c = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", path)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", path)
    expected = h * w * c * 4
    if len(data) - _HEADER.size != expected:
        raise FormatError(f"payload is {len(data) - _HEADER.size} bytes, expected {expected}", path)
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w, c).astype(np.float32)


def _write_png(path, img):
    if img.ndim == 3:
        Image.fromarray(np.rint(img * 255.0).astype(np.uint8), mode="RGB").save(path)
    else:
        Image.fromarray(img.astype(np.uint8), mode="L").save(path)


def _read_png(path, rgb):
    path = Path(path)
    if not path.exists():
        raise FormatError("missing file", path)
    with Image.open(path) as im:
        arr = np.asarray(im)
    if rgb:
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise FormatError(f"expected RGB image, got shape {arr.shape}", path)
        return arr.astype(np.float32) / np.float32(255.0)
    if arr.ndim != 2:
        raise FormatError(f"expected single-channel image, got shape {arr.shape}", path)
    return arr.astype(np.int64)


def write_collection(c: ImageCollection, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_png(d / "target.png", c.target_image)
    _write_png(d / "source.png", c.source_image)
    if c.gt_segmentation is not None:
        if c.gt_segmentation.max(initial=0) > 255 or c.gt_segmentation.min(initial=0) < 0:
            raise FormatError("segmentation classes must fit in 8 bits", d / "seg.png")
        _write_png(d / "seg.png", c.gt_segmentation)
    if c.gt_correspondence is not None:
        write_field(d / "corr.bin", c.gt_correspondence)
    if c.valid is not None:
        write_field(d / "valid.bin", c.valid)
    (d / "meta.txt").write_text(f"mode = {c.mode}\n")


def read_collection(directory) -> ImageCollection:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError("collection directory does not exist", d)
    target = _read_png(d / "target.png", rgb=True)
    source = _read_png(d / "source.png", rgb=True)
    h, w = target.shape[:2]
    if source.shape[:2] != (h, w):
        raise FormatError(f"dimension mismatch {source.shape[:2]} vs target {(h, w)}", d / "source.png")

    mode = "stereo"
    if (d / "meta.txt").exists():
        for line in (d / "meta.txt").read_text().splitlines():
            key, _, value = line.partition("=")
            if key.strip() == "mode":
                mode = value.strip()

    seg = corr = valid = None
    if (d / "seg.png").exists():
        seg = _read_png(d / "seg.png", rgb=False)
        if seg.shape != (h, w):
            raise FormatError(f"dimension mismatch {seg.shape} vs target {(h, w)}", d / "seg.png")
    if (d / "corr.bin").exists():
        corr = read_field(d / "corr.bin")
        if corr.shape != (h, w, 2):
            raise FormatError(f"dimension mismatch {corr.shape} vs {(h, w, 2)}", d / "corr.bin")
    if (d / "valid.bin").exists():
        valid = read_field(d / "valid.bin")
        if valid.shape != (h, w, 1):
            raise FormatError(f"dimension mismatch {valid.shape} vs {(h, w, 1)}", d / "valid.bin")
        valid = valid[..., 0]
    return ImageCollection(target, source, mode, corr, seg, valid)


def list_split(root, split):
    d = Path(root) / split
    if not d.is_dir():
        raise FileNotFoundError(f"split directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.is_dir())


def load_split(root, split):
    return [read_collection(p) for p in list_split(root, split)]


def parse_scene_spec(text) -> SceneSpec:
    """``key = value`` lines naming SceneSpec fields; pairs are written ``a, b``."""
    types = {f.name: f.type for f in fields(SceneSpec)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown scene key {key!r}")
        try:
            if key in ("depth_range", "image_size"):
                cast = float if key == "depth_range" else int
                parts = tuple(cast(p) for p in value.replace(",", " ").split())
                if len(parts) != 2:
                    raise ValueError("expected two values")
                values[key] = parts
            else:
                values[key] = (float if "float" in str(types[key]) else int)(value)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: invalid value for {key}: {e}") from None
    spec = SceneSpec(**values)
    spec.validate()
    return spec


def generate_split(spec: SceneSpec, count, root, split="train", mode="stereo", start=0):
    """Write ``count`` scenes with consecutive texture seeds to ``<root>/<split>/<id>``."""
    out = Path(root) / split
    paths = []
    for i in range(count):
        scene = generate_scene(replace(spec, texture_seed=spec.texture_seed + start + i), mode)
        paths.append(out / f"{start + i:05d}")
        write_collection(scene, paths[-1])
    return paths
