import numpy as np
import pytest

from flow2stereo.field_core import (
    DisparityField,
    FlowField,
    Image,
    Mask,
    bilinear_sample,
    box_down2,
    build_pyramid,
    grayscale,
    load_png,
    load_raw,
    pyramid_dims,
    resample_bilinear,
    save_png,
    save_raw,
    upsample_flow,
)


def test_image_validation():
    with pytest.raises(ValueError):
        Image(np.full((4, 4), 1.5))
    with pytest.raises(ValueError):
        Image(np.full((4, 4), -0.1))
    with pytest.raises(ValueError):
        Image(np.zeros(4))
    bad = np.zeros((4, 4))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        Image(bad)


def test_flow_and_mask_validation():
    with pytest.raises(ValueError):
        FlowField(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        FlowField(np.zeros((4, 4, 3)))
    with pytest.raises(ValueError):
        Mask(np.full((4, 4), 2))
    with pytest.raises(ValueError):
        DisparityField(np.full((4, 4), -1.0))
    m = Mask(np.eye(4, dtype=bool))
    assert m.data.dtype == np.uint8
    assert m.count() == 4


def test_containers_are_frozen():
    img = Image(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        img.data[0, 0] = 1.0


def test_grayscale_weights():
    data = np.zeros((2, 2, 3))
    data[:, :, 0] = 1.0
    assert np.allclose(grayscale(Image(data)).data, 0.299)
    gray = Image(np.full((3, 3), 0.25))
    assert grayscale(gray) is gray


def test_bilinear_sample_reproduces_linear_ramp():
    ys, xs = np.mgrid[0:6, 0:8].astype(np.float64)
    img = Image((2.0 * xs + 3.0 * ys) / 40.0)
    px = np.array([1.3, 4.75, 0.0, 6.999])
    py = np.array([2.7, 0.25, 0.0, 4.999])
    want = (2.0 * px + 3.0 * py) / 40.0
    got = bilinear_sample(img, px, py)
    assert np.allclose(got, want, atol=1e-12)


def test_bilinear_sample_clamps_at_border():
    img = Image(np.linspace(0.0, 1.0, 12).reshape(3, 4))
    inside = bilinear_sample(img, np.array([3.0]), np.array([2.0]))
    beyond = bilinear_sample(img, np.array([9.0]), np.array([7.0]))
    assert np.allclose(inside, beyond)


def test_box_down2_hand_values():
    arr = np.array([[1.0, 2.0, 10.0], [3.0, 4.0, 20.0]])
    out = box_down2(arr)
    assert out.shape == (1, 2)
    assert np.allclose(out, [[2.5, 15.0]])
    const = box_down2(np.full((5, 7, 2), 3.25))
    assert const.shape == (3, 4, 2)
    assert np.allclose(const, 3.25)


def test_pyramid_dims_and_levels():
    dims = pyramid_dims(48, 33, 3)
    assert dims == [(48, 33), (24, 17), (12, 9)]
    pyr = build_pyramid(Image(np.zeros((48, 33))), 3)
    assert len(pyr) == 3
    assert [lvl.data.shape for lvl in pyr.levels] == [(48, 33), (24, 17), (12, 9)]
    with pytest.raises(ValueError):
        build_pyramid(Image(np.zeros((8, 8))), 0)


def test_resample_bilinear_hits_source_lattice():
    rng = np.random.default_rng(3)
    src = rng.random((5, 6))
    up = resample_bilinear(src, 10, 12)
    assert np.allclose(up[::2, ::2], src, atol=1e-12)


def test_upsample_flow_rescales_displacements():
    flow = FlowField(np.stack([np.full((4, 6), 1.0), np.full((4, 6), 2.0)], axis=-1))
    up = upsample_flow(flow, 8, 12)
    assert up.data.shape == (8, 12, 2)
    assert np.allclose(up.u, 2.0)
    assert np.allclose(up.v, 4.0)


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    quantized = np.round(rng.random((9, 13)) * 255.0) / 255.0
    save_png(tmp_path / "g.png", Image(quantized))
    assert np.allclose(load_png(tmp_path / "g.png").data, quantized, atol=1e-12)

    color = np.round(rng.random((7, 5, 3)) * 255.0) / 255.0
    save_png(tmp_path / "c.png", Image(color))
    assert np.allclose(load_png(tmp_path / "c.png").data, color, atol=1e-12)

    with pytest.raises(IOError):
        load_png(tmp_path / "missing.png")


def test_raw_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    for shape in [(6, 4), (3, 5, 2)]:
        arr = rng.standard_normal(shape) * 1e6
        save_raw(tmp_path / "f.raw", arr)
        assert np.array_equal(load_raw(tmp_path / "f.raw"), arr)
    (tmp_path / "junk.raw").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_raw(tmp_path / "junk.raw")
