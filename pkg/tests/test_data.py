import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twins.data import (
    ImageCollection,
    SceneSpec,
    generate_scene,
    generate_split,
    load_split,
    parse_scene_spec,
    read_collection,
    read_field,
    warp_source_to_target,
    write_collection,
    write_field,
)
from twins.errors import ConfigError, FormatError


def test_invalid_size_rejected():
    with pytest.raises(ConfigError):
        generate_scene(SceneSpec(image_size=(100, 128)))


def test_single_plane_constant_correspondence():
    c = generate_scene(SceneSpec(num_objects=1, depth_range=(5.0, 5.0), texture_seed=4))
    obj = c.gt_segmentation != 0
    assert obj.any()
    assert np.unique(c.gt_correspondence[obj], axis=0).shape[0] == 1


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_stereo_correspondence_is_horizontal_and_bounded(seed):
    spec = SceneSpec(texture_seed=seed)
    c = generate_scene(spec, "stereo")
    assert np.all(c.gt_correspondence[..., 1] == 0)
    u = c.gt_correspondence[..., 0]
    assert u.min() >= 0 and u.max() <= spec.max_disparity
    assert c.gt_segmentation.min() >= 0 and c.gt_segmentation.max() < spec.num_classes


@pytest.mark.parametrize("mode", ["stereo", "flow"])
@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_warp_consistency(mode, seed):
    c = generate_scene(SceneSpec(texture_seed=seed), mode)
    warped = warp_source_to_target(c.source_image, c.gt_correspondence)
    err = np.abs(warped - c.target_image).max(-1)
    valid = c.valid > 0.5
    assert valid.mean() > 0.5
    assert (err[valid] <= 1e-3).mean() >= 0.99


def test_generator_is_deterministic():
    a = generate_scene(SceneSpec(texture_seed=7), "flow")
    b = generate_scene(SceneSpec(texture_seed=7), "flow")
    for k in ("target_image", "source_image", "gt_correspondence", "gt_segmentation", "valid"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))


def test_collection_round_trip(tmp_path):
    c = generate_scene(SceneSpec(texture_seed=11), "flow")
    write_collection(c, tmp_path / "x")
    r = read_collection(tmp_path / "x")
    assert r.mode == "flow"
    for k in ("target_image", "source_image", "gt_correspondence", "gt_segmentation", "valid"):
        np.testing.assert_array_equal(getattr(r, k), getattr(c, k))


def test_random_collection_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = lambda: (rng.integers(0, 256, (32, 64, 3)) / 255.0).astype(np.float32)  # noqa: E731
    c = ImageCollection(
        img(),
        img(),
        "stereo",
        rng.standard_normal((32, 64, 2)).astype(np.float32),
        rng.integers(0, 7, (32, 64)),
        (rng.random((32, 64)) > 0.5).astype(np.float32),
    )
    write_collection(c, tmp_path)
    r = read_collection(tmp_path)
    for k in ("target_image", "source_image", "gt_correspondence", "gt_segmentation", "valid"):
        np.testing.assert_array_equal(getattr(r, k), getattr(c, k))


def test_field_byte_layout(tmp_path):
    field = np.array([[[1.0, 0.0], [-2.0, 0.5]], [[0.25, 3.0], [0.0, -1.0]]], dtype=np.float32)
    write_field(tmp_path / "f.bin", field)
    raw = (tmp_path / "f.bin").read_bytes()
    expected_hex = (
        "54574e53" "01000000" "02000000" "02000000" "02000000"  # TWNS, version, H, W, C
        "0000803f" "00000000"  # (0,0): 1.0, 0.0
        "000000c0" "0000003f"  # (0,1): -2.0, 0.5
        "0000803e" "00004040"  # (1,0): 0.25, 3.0
        "00000000" "000080bf"  # (1,1): 0.0, -1.0
    )
    assert raw.hex() == expected_hex
    np.testing.assert_array_equal(read_field(tmp_path / "f.bin"), field)


def test_field_format_errors(tmp_path):
    p = tmp_path / "f.bin"
    write_field(p, np.zeros((2, 2, 1)))
    data = bytearray(p.read_bytes())
    data[:4] = b"XXXX"
    p.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="f.bin"):
        read_field(p)
    with pytest.raises(FormatError, match="missing"):
        read_field(tmp_path / "nope.bin")
    q = tmp_path / "short.bin"
    q.write_bytes(struct.pack("<4sIIII", b"TWNS", 1, 4, 4, 2) + b"\0" * 8)
    with pytest.raises(FormatError, match="expected"):
        read_field(q)


def test_dimension_mismatch_reports_path(tmp_path):
    c = generate_scene(SceneSpec(texture_seed=1))
    write_collection(c, tmp_path)
    write_field(tmp_path / "corr.bin", np.zeros((32, 32, 2)))
    with pytest.raises(FormatError, match="corr.bin"):
        read_collection(tmp_path)


def test_scene_spec_parsing_and_split(tmp_path):
    spec = parse_scene_spec("num_objects = 2\nimage_size = 64, 96  # H, W\ntexture_seed = 5\ncontrast = 0.5\n")
    assert spec.image_size == (64, 96) and spec.num_objects == 2 and spec.contrast == 0.5
    with pytest.raises(ConfigError, match="line 1"):
        parse_scene_spec("bogus = 1")
    generate_split(spec, 3, tmp_path, "train")
    data = load_split(tmp_path, "train")
    assert len(data) == 3 and data[0].shape == (64, 96)
    # consecutive seeds give distinct scenes
    assert not np.array_equal(data[0].target_image, data[1].target_image)
