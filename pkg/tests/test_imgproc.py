
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image as PilImage
from scipy import ndimage
from skimage.metrics import structural_similarity

from ggdiff.corpus import CorpusSpec, make_image
from ggdiff.imgproc import (PSNR_CAP, ColorspaceError, Image, MalformedHeaderError,
                            TruncatedPayloadError, UnsupportedFormatError, channel_means,
                            decode_ppm, encode_ppm, gray_image, hsv_to_rgb, list_images,
                            load_image, mscn, mscn_plane, pixel_histogram, psnr, rgb_to_hsv,
                            save_image, ssim, to_gray)

unit = st.floats(0.0, 1.0, allow_nan=False)


def rand_image(rng, h=16, w=16, c=3):
    return Image(rng.random((h, w, c)), "RGB" if c == 3 else "GRAY")


def test_image_clamps_and_freezes():
    im = Image(np.array([[[-0.5, 0.5, 1.5]]]))
    assert im.data.tolist() == [[[0.0, 0.5, 1.0]]]
    with pytest.raises(ValueError):
        im.data[0, 0, 0] = 0.2
    assert (im.height, im.width, im.channels) == (1, 1, 3)


def test_image_rejects_bad_input():
    with pytest.raises(ValueError):
        Image(np.full((2, 2, 3), np.nan))
    with pytest.raises(ValueError):
        Image(np.zeros((2, 2, 2)))
    with pytest.raises(ColorspaceError):
        Image(np.zeros((2, 2, 3)), "GRAY")
    with pytest.raises(ColorspaceError):
        Image(np.zeros((2, 2, 3)), "LAB")


def test_ppm_header_example():
    buf = b"P6 2 2 255\n" + bytes(range(12))
    im = decode_ppm(buf)
    assert im.shape == (2, 2, 3)
    assert im.data[1, 1, 2] == pytest.approx(11 / 255)


def test_ppm_errors_are_distinct():
    with pytest.raises(MalformedHeaderError):
        decode_ppm(b"P6 2")
    with pytest.raises(MalformedHeaderError):
        decode_ppm(b"hello world")
    with pytest.raises(TruncatedPayloadError):
        decode_ppm(b"P6 2 2 255\n" + bytes(5))
    with pytest.raises(UnsupportedFormatError):
        decode_ppm(b"P3 2 2 255\n0 0 0")
    with pytest.raises(UnsupportedFormatError):
        decode_ppm(b"P6 2 2 65535\n" + bytes(24))


def test_ppm_comments_allowed():
    im = decode_ppm(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    assert im.colorspace == "GRAY" and im.data.ravel().tolist() == [0.0, 1.0]


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 7, 3), elements=unit))
def test_save_load_quantisation_bound(data):
    im = Image(data)
    back = decode_ppm(encode_ppm(im))
    assert np.max(np.abs(back.data - im.data)) <= 1 / 510 + 1e-12


def test_p5_against_reference_decoder(tmp_path, rng):
    arr = (rng.random((9, 13)) * 255).astype(np.uint8)
    path = tmp_path / "g.pgm"
    PilImage.fromarray(arr, mode="L").save(path)
    im = load_image(path)
    assert im.channels == 1 and im.colorspace == "GRAY"
    np.testing.assert_array_equal(np.rint(im.data[:, :, 0] * 255).astype(np.uint8), arr)


def test_p6_readable_by_reference_decoder(tmp_path, rng):
    im = rand_image(rng, 6, 5)
    path = tmp_path / "x.ppm"
    save_image(im, path)
    ref = np.asarray(PilImage.open(path))
    np.testing.assert_array_equal(ref, np.rint(im.data * 255).astype(np.uint8))


def test_list_images(tmp_path, rng):
    for n in ("b.ppm", "a.pgm", "c.txt"):
        (tmp_path / n).write_bytes(b"")
    assert list_images(tmp_path) == ["a.pgm", "b.ppm"]


def test_hsv_examples():
    hsv = rgb_to_hsv(Image(np.array([[[1.0, 0.0, 0.0], [0.5, 0.5, 0.5]]])))
    assert hsv.colorspace == "HSV"
    np.testing.assert_allclose(hsv.data[0, 0], [0, 1, 1])
    assert hsv.data[0, 1, 1] == 0 and hsv.data[0, 1, 2] == 0.5


def test_hsv_wrong_colorspace():
    with pytest.raises(ColorspaceError):
        hsv_to_rgb(Image(np.zeros((1, 1, 3))))
    with pytest.raises(ColorspaceError):
        rgb_to_hsv(Image(np.zeros((1, 1, 3)), "HSV"))


def test_hsv_round_trip_1000_colours(rng):
    im = Image(rng.random((1000, 1, 3)))
    back = hsv_to_rgb(rgb_to_hsv(im))
    assert np.max(np.abs(back.data - im.data)) < 1e-6
    h = rgb_to_hsv(im).data[:, :, 0]
    assert h.min() >= 0 and h.max() < 1


def test_hsv_matches_colorsys(rng):
    import colorsys
    for rgb in rng.random((50, 3)):
        ref = colorsys.rgb_to_hsv(*rgb)
        got = rgb_to_hsv(Image(rgb.reshape(1, 1, 3))).data.ravel()
        np.testing.assert_allclose(got, ref, atol=1e-12)


def test_to_gray_weights():
    im = Image(np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]]))
    np.testing.assert_allclose(to_gray(im).ravel(), [0.299, 0.587])
    g = gray_image(np.full((2, 2), 0.3))
    assert np.allclose(to_gray(g), 0.3)


def test_psnr_examples(rng):
    a = Image(np.full((8, 8, 3), 0.5))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, Image(np.full((8, 8, 3), 0.6))) == pytest.approx(20.0)
    noisy = Image(0.5 + 0.05 * rng.standard_normal((64, 64, 3)))
    assert psnr(Image(np.full((64, 64, 3), 0.5)), noisy) == pytest.approx(26.02, abs=0.1)
    with pytest.raises(ValueError):
        psnr(a, Image(np.zeros((4, 4, 3))))


def test_psnr_ssim_symmetric(rng):
    a, b = rand_image(rng), rand_image(rng)
    assert psnr(a, b) == psnr(b, a)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9


def test_ssim_identity_and_inverse():
    checker = ((np.indices((16, 16)).sum(0)) % 2).astype(float)
    a = gray_image(checker)
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, gray_image(1 - checker)) < 0


def test_ssim_constant_closed_form():
    a, b = gray_image(np.full((11, 11), 0.4)), gray_image(np.full((11, 11), 0.5))
    c1 = 0.01 ** 2
    expected = (2 * 0.4 * 0.5 + c1) / (0.4 ** 2 + 0.5 ** 2 + c1)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-12)


def test_ssim_matches_skimage(rng):
    a = rand_image(rng, 24, 20)
    b = Image(np.clip(a.data + 0.1 * rng.standard_normal(a.shape), 0, 1))
    ref = structural_similarity(a.data, b.data, channel_axis=2, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=1.0)
    # skimage averages over a cropped full-size map; compare its valid region
    assert ssim(a, b) == pytest.approx(ref, abs=0.02)
    for c in range(3):
        full = structural_similarity(a.data[:, :, c], b.data[:, :, c], gaussian_weights=True, sigma=1.5,
                                     use_sample_covariance=False, data_range=1.0, full=True)[1]
        mine = ssim(Image(a.data[:, :, c:c + 1], "GRAY"), Image(b.data[:, :, c:c + 1], "GRAY"))
        assert mine == pytest.approx(full[5:-5, 5:-5].mean(), rel=1e-9)


def test_ssim_small_image_rejected():
    with pytest.raises(ValueError):
        ssim(gray_image(np.zeros((5, 5))), gray_image(np.zeros((5, 5))))


def test_mscn_constant_is_zero():
    assert np.all(mscn(Image(np.full((12, 12, 3), 0.7))) == 0)


def test_mscn_mean_near_zero_on_textures():
    spec = CorpusSpec(12, 64, patterns=("texture",), seed=42)
    for i in range(spec.count):
        assert abs(mscn(make_image(spec, i)).mean()) < 0.05


def test_mscn_contrast_normalisation(rng):
    g = ndimage.gaussian_filter(rng.random((32, 32)), 1.0)
    base = mscn_plane(g)
    half = mscn_plane(0.5 * (g - g.mean()) + 0.5)
    mu = ndimage.gaussian_filter(g, 7 / 6, mode="reflect", truncate=3 / (7 / 6))
    sd = np.sqrt(np.abs(ndimage.gaussian_filter(g * g, 7 / 6, mode="reflect", truncate=3 / (7 / 6)) - mu * mu))
    # exact effect of the stabiliser: ratio (sd + c) / (sd + 2c)
    np.testing.assert_allclose(half, base * (sd + 1e-3) / (sd + 2e-3), atol=1e-9)
    strong = sd > 0.05
    assert np.all(np.abs(half - base)[strong] <= 0.03 * np.abs(base)[strong] + 1e-12)


def test_channel_means():
    np.testing.assert_allclose(channel_means(Image(np.full((4, 4, 3), 0.3))), 0.3)
    half = np.zeros((4, 4, 3))
    half[:, 2:] = 1
    np.testing.assert_allclose(channel_means(Image(half)), 0.5)
    im = make_image(CorpusSpec(1, 32, seed=42), 0)
    brute = [sum(float(v) for v in im.data[:, :, c].ravel()) / im.data[:, :, c].size for c in range(3)]
    np.testing.assert_allclose(channel_means(im), brute, rtol=1e-12)


def test_histogram_examples():
    h = pixel_histogram(Image(np.full((4, 4, 3), 0.33)), bins=10)
    assert np.count_nonzero(h.densities) == 1 and h.densities.max() == pytest.approx(10)
    ramp = pixel_histogram(gray_image(np.linspace(0, 1, 6400).reshape(80, 80)), bins=16)
    np.testing.assert_allclose(ramp.densities, 1.0, atol=0.01)
    with pytest.raises(ValueError):
        pixel_histogram(ramp and Image(np.zeros((2, 2, 3))), bins=1)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 6, 3), elements=unit), st.integers(2, 100))
def test_histogram_mass(data, bins):
    assert pixel_histogram(Image(data), bins).mass() == pytest.approx(1.0, abs=1e-9)


def test_histogram_csv(tmp_path):
    h = pixel_histogram(Image(np.full((2, 2, 3), 0.5)), bins=4)
    path = tmp_path / "h.csv"
    h.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "bin_lo,bin_hi,density" and len(lines) == 5
