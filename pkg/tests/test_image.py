import numpy as np
import pytest
from hypothesis import given, strategies as st

from omnivo.image import (
    Image,
    PhotometricCalib,
    build_pyramid,
    interp,
    parse_times,
    read_image,
    read_pgm,
)


def ramp_image(w=64, h=48, a=1.0, b=0.0, c=10.0):
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    return Image(a * uu + b * vv + c)


def test_image_validates_shape_and_exposure():
    with pytest.raises(ValueError):
        Image(np.zeros(10))
    with pytest.raises(ValueError):
        Image(np.zeros((4, 4)), exposure_t=0.0)


def test_pyramid_constant_image():
    pyr = build_pyramid(Image(np.full((64, 64), 37.0)))
    assert len(pyr.levels) == 5
    for lvl in pyr.levels:
        assert np.allclose(lvl.data, 37.0)


def test_pyramid_dimension_halving():
    pyr = build_pyramid(Image(np.zeros((480, 480))))
    assert [lvl.width for lvl in pyr.levels] == [480, 240, 120, 60, 30]


def test_pyramid_single_bright_pixel():
    data = np.zeros((64, 64))
    data[0, 0] = 100.0
    pyr = build_pyramid(Image(data))
    assert np.isclose(pyr.levels[1].data[0, 0], 25.0)  # mean of the 2x2 block
    assert np.isclose(pyr.levels[1].data.sum(), 25.0)


def test_pyramid_mean_preservation_even_dims():
    rng = np.random.default_rng(3)
    img = Image(rng.uniform(0, 255, size=(64, 64)))
    pyr = build_pyramid(img)
    means = [lvl.data.mean() for lvl in pyr.levels]
    for m in means[1:]:
        assert np.isclose(m, means[0], atol=1e-6)


def test_pyramid_rejects_small_images():
    with pytest.raises(ValueError):
        build_pyramid(Image(np.zeros((16, 64))))


def test_pyramid_propagates_exposure():
    pyr = build_pyramid(Image(np.zeros((64, 64)), exposure_t=0.02))
    assert all(lvl.exposure_t == 0.02 for lvl in pyr.levels)


def test_interp_exact_on_ramp():
    img = ramp_image(a=1.0, b=0.0, c=0.0)
    for u in (3.0, 7.25, 10.5):
        inten, gx, gy, ok = interp(img, np.array([u, 5.0]))
        assert ok
        assert np.isclose(inten, u)
        assert np.isclose(gx, 1.0)
        assert np.isclose(gy, 0.0)


def test_interp_zero_gradient_on_constant():
    img = Image(np.full((32, 32), 9.0))
    inten, gx, gy, ok = interp(img, np.array([4.0, 4.0]))
    assert ok and inten == 9.0 and gx == 0.0 and gy == 0.0


def test_interp_gradient_on_quadratic():
    # I = x^2: central differences are exact for quadratics at integer points,
    # bilinear blending keeps the error below 1 at x = 5.0
    w = 32
    uu, _ = np.meshgrid(np.arange(w, dtype=float), np.arange(w, dtype=float))
    img = Image(uu**2)
    _, gx, _, ok = interp(img, np.array([5.0, 10.0]))
    assert ok
    assert abs(gx - 10.0) < 1.0


@given(
    st.floats(0.5, 3.0),
    st.floats(-2.0, 2.0),
    st.floats(0.0, 61.0),
    st.floats(0.0, 45.0),
)
def test_interp_exact_on_affine_fields(a, b, u, v):
    img = ramp_image(a=a, b=b, c=50.0)
    if u > img.width - 2 or v > img.height - 2:
        return
    inten, gx, gy, ok = interp(img, np.array([u, v]))
    assert ok
    assert np.isclose(inten, a * u + b * v + 50.0, atol=1e-9)
    assert np.isclose(gx, a, atol=1e-9)
    assert np.isclose(gy, b, atol=1e-9)


def test_interp_out_of_bounds_flagged():
    img = ramp_image()
    _, _, _, ok = interp(img, np.array([float(img.width - 2), 5.0]))
    assert ok
    _, _, _, ok = interp(img, np.array([img.width - 2 + 0.01, 5.0]))
    assert not ok
    _, _, _, ok = interp(img, np.array([-0.01, 5.0]))
    assert not ok


def test_interp_batch_matches_scalar():
    img = ramp_image(a=2.0, b=-1.0)
    uv = np.array([[1.5, 2.5], [10.0, 7.75], [0.0, 0.0]])
    inten, gx, gy, ok = interp(img, uv)
    for i in range(len(uv)):
        s = interp(img, uv[i])
        assert np.isclose(inten[i], s[0])
        assert np.isclose(gx[i], s[1])
        assert ok[i] == s[3]


def test_read_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    data = rng.integers(0, 256, size=(40, 60), dtype=np.uint8)
    path = tmp_path / "img.pgm"
    with open(path, "wb") as f:
        f.write(b"P5\n# a comment\n60 40\n255\n")
        f.write(data.tobytes())
    back = read_pgm(path)
    assert back.shape == (40, 60)
    assert np.array_equal(back, data.astype(float))


def test_read_png_round_trip(tmp_path):
    from PIL import Image as PILImage

    rng = np.random.default_rng(6)
    data = rng.integers(0, 256, size=(32, 48), dtype=np.uint8)
    path = tmp_path / "img.png"
    PILImage.fromarray(data, mode="L").save(path)
    img = read_image(path, exposure_t=0.5)
    assert img.exposure_t == 0.5
    assert np.array_equal(img.data, data.astype(float))


def test_parse_times_with_exposure(tmp_path):
    path = tmp_path / "times.txt"
    path.write_text("# id ts exp\n000000 0.00 0.010\n000001 0.033 0.012\n")
    entries = parse_times(path)
    assert entries[1] == ("000001", 0.033, 0.012)


def test_parse_times_missing_exposure_warns(tmp_path):
    path = tmp_path / "times.txt"
    path.write_text("000000 0.0\n000001 0.033\n")
    with pytest.warns(UserWarning, match="exposure"):
        entries = parse_times(path)
    assert entries[0][2] == 1.0


def test_parse_times_rejects_malformed(tmp_path):
    path = tmp_path / "times.txt"
    path.write_text("000000 0.0 1.0 junk\n")
    with pytest.raises(ValueError, match="times.txt:1"):
        parse_times(path)


def test_photometric_calib_identity_by_default():
    data = np.random.default_rng(0).uniform(0, 255, (8, 8))
    assert np.array_equal(PhotometricCalib().apply(data), data)


def test_photometric_calib_response_and_vignette():
    calib = PhotometricCalib(
        inv_response=np.arange(256, dtype=float) * 2.0,
        vignette=np.full((4, 4), 0.5),
    )
    out = calib.apply(np.full((4, 4), 10.0))
    assert np.allclose(out, 10.0 * 2.0 / 0.5)
