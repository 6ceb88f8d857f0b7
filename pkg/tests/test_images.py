"""Image container, noise, and PSNR behavior."""

import numpy as np
import pytest

from ntkfilter import (
    ConfigError,
    ImageTensor,
    NoiseModel,
    PSNR_CAP_DB,
    add_gaussian_noise,
    from_unit,
    load_png,
    psnr,
    save_png,
    synthetic_house,
)


def test_image_tensor_shape_and_centering():
    arr = np.linspace(0.0, 1.0, 12).reshape(3, 4)
    img = from_unit(arr)
    assert (img.height, img.width, img.channels, img.pixels) == (3, 4, 1, 12)
    np.testing.assert_allclose(img.planes()[0], arr - 0.5)
    np.testing.assert_allclose(img.to_unit()[0], arr.ravel(), atol=1e-15)


def test_image_tensor_rejects_bad_data():
    with pytest.raises(ConfigError):
        ImageTensor(2, 2, np.zeros((2, 4)))  # 2 channels is not 1 or 3
    with pytest.raises(ConfigError):
        ImageTensor(2, 2, np.zeros((1, 5)))  # pixel count mismatch
    with pytest.raises(ConfigError):
        ImageTensor(2, 2, np.full((1, 4), np.nan))
    with pytest.raises(ConfigError):
        from_unit(np.zeros((4, 4, 2)))


def test_image_data_is_read_only():
    img = from_unit(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        img.data[0, 0] = 1.0


def test_to_uint8_shapes():
    gray = from_unit(np.zeros((3, 5)))
    assert gray.to_uint8().shape == (3, 5)
    color = from_unit(np.zeros((3, 5, 3)))
    assert color.to_uint8().shape == (3, 5, 3)


def test_png_roundtrip_is_byte_identical(tmp_path, rng):
    arr = rng.integers(0, 256, size=(9, 7)).astype(np.float64) / 255.0
    img = from_unit(arr)
    first = tmp_path / "a.png"
    second = tmp_path / "b.png"
    save_png(img, first)
    save_png(load_png(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_png_roundtrip_color(tmp_path, rng):
    arr = rng.integers(0, 256, size=(6, 8, 3)).astype(np.float64) / 255.0
    img = from_unit(arr)
    path = tmp_path / "c.png"
    save_png(img, path)
    loaded = load_png(path)
    assert loaded.channels == 3
    np.testing.assert_allclose(loaded.data, img.data, atol=1e-12)


def test_psnr_known_value():
    ref = ImageTensor(4, 4, np.zeros((1, 16)))
    est = ImageTensor(4, 4, np.full((1, 16), 0.1))
    # unit-range MSE is exactly 0.01, so the ratio is 20 dB
    assert psnr(est, ref) == pytest.approx(20.0, abs=1e-12)


def test_psnr_sentinel_and_shape_check():
    ref = ImageTensor(4, 4, np.zeros((1, 16)))
    assert psnr(ref, ref) == PSNR_CAP_DB
    other = ImageTensor(2, 8, np.zeros((1, 16)))
    with pytest.raises(ConfigError):
        psnr(ref, other)


def test_psnr_measures_after_clipping():
    ref = ImageTensor(2, 2, np.zeros((1, 4)))
    # values pushed past the displayable range clip to the same endpoint
    a = ImageTensor(2, 2, np.full((1, 4), 2.0))
    b = ImageTensor(2, 2, np.full((1, 4), 5.0))
    assert psnr(a, ref) == pytest.approx(psnr(b, ref))


def test_noise_model_units_and_validation():
    assert NoiseModel(sigma=25.0).sigma_unit == pytest.approx(25.0 / 255.0)
    with pytest.raises(ConfigError):
        NoiseModel(sigma=-1.0)


def test_noise_is_seed_deterministic(house16):
    a = add_gaussian_noise(house16, NoiseModel(sigma=25.0, seed=7))
    b = add_gaussian_noise(house16, NoiseModel(sigma=25.0, seed=7))
    c = add_gaussian_noise(house16, NoiseModel(sigma=25.0, seed=8))
    np.testing.assert_array_equal(a.data, b.data)
    assert np.max(np.abs(a.data - c.data)) > 1e-3


def test_noisy_psnr_tracks_sigma(house64):
    noisy = add_gaussian_noise(house64, NoiseModel(sigma=25.0, seed=0))
    # -20 log10(25/255) = 20.17 dB; clipping at the range ends buys a little
    measured = psnr(noisy, house64)
    assert 19.8 < measured < 21.5


def test_synthetic_house_is_deterministic():
    a = synthetic_house(64, 64)
    b = synthetic_house(64, 64)
    np.testing.assert_array_equal(a.data, b.data)
    assert a.channels == 1
    # the scene spans most of the displayable range
    assert a.data.min() < -0.2 and a.data.max() > 0.3
