"""Image containers, noise injection, and PSNR accounting.

Images are stored as float64 arrays of shape (channels, pixels) in a centered
range: an 8-bit value v becomes v/255 - 0.5, so all downstream linear algebra
sees values in [-0.5, 0.5]. PSNR undoes the centering and clips to [0, 1]
before measuring, which matches how the denoised outputs are meant to be
viewed.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from PIL import Image

from .errors import ConfigError

# PSNR of a perfect reconstruction is unbounded; report this sentinel instead.
PSNR_CAP_DB = 999.0


@dataclasses.dataclass(frozen=True)
class ImageTensor:
    """A centered image: `data` has shape (channels, height*width), row-major."""

    height: int
    width: int
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ConfigError(f"image data must be 2-d (channels, pixels), got shape {arr.shape}")
        if arr.shape[0] not in (1, 3):
            raise ConfigError(f"expected 1 (gray) or 3 (rgb) channels, got {arr.shape[0]}")
        if arr.shape[1] != self.height * self.width:
            raise ConfigError(
                f"pixel count {arr.shape[1]} does not match {self.height}x{self.width}"
            )
        if not np.all(np.isfinite(arr)):
            raise ConfigError("image data contains non-finite values")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def pixels(self) -> int:
        return self.height * self.width

    def planes(self) -> np.ndarray:
        """Return the image as (channels, height, width)."""
        return self.data.reshape(self.channels, self.height, self.width)

    def to_unit(self) -> np.ndarray:
        """Undo the centering: (channels, pixels) clipped to [0, 1]."""
        return np.clip(self.data + 0.5, 0.0, 1.0)

    def to_uint8(self) -> np.ndarray:
        """Quantize back to 8-bit, shape (height, width) or (height, width, 3)."""
        flat = np.rint(self.to_unit() * 255.0).astype(np.uint8)
        planes = flat.reshape(self.channels, self.height, self.width)
        if self.channels == 1:
            return planes[0]
        return np.moveaxis(planes, 0, -1)


def from_unit(array: np.ndarray) -> ImageTensor:
    """Build an ImageTensor from values in [0, 1], shape (H, W) or (H, W, 3)."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 2:
        planes = arr[None, :, :]
    elif arr.ndim == 3 and arr.shape[2] in (1, 3):
        planes = np.moveaxis(arr, -1, 0)
    else:
        raise ConfigError(f"expected (H, W) or (H, W, C) with C in {{1, 3}}, got {arr.shape}")
    h, w = planes.shape[1], planes.shape[2]
    return ImageTensor(h, w, planes.reshape(planes.shape[0], h * w) - 0.5)


def load_png(path) -> ImageTensor:
    """Load an 8-bit PNG (grayscale or RGB) into centered float form."""
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB" if img.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(img, dtype=np.float64) / 255.0
    return from_unit(arr)


def save_png(image: ImageTensor, path) -> None:
    """Write the image back out as 8-bit PNG. load(save(x)) is byte-identical."""
    arr = image.to_uint8()
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


@dataclasses.dataclass(frozen=True)
class NoiseModel:
    """Additive white Gaussian noise, sigma in 8-bit units (25 means 25/255)."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"noise sigma must be non-negative, got {self.sigma}")

    @property
    def sigma_unit(self) -> float:
        """Noise standard deviation on the centered [-0.5, 0.5] scale."""
        return self.sigma / 255.0


def add_gaussian_noise(image: ImageTensor, model: NoiseModel) -> ImageTensor:
    """Corrupt the image with seeded iid Gaussian noise."""
    rng = np.random.default_rng(model.seed)
    noise = rng.normal(0.0, model.sigma_unit, size=image.data.shape)
    return ImageTensor(image.height, image.width, image.data + noise)


def psnr(estimate: ImageTensor, reference: ImageTensor) -> float:
    """Peak signal-to-noise ratio in dB after de-centering and clipping to [0, 1].

    Identical inputs (or MSE underflow) return the PSNR_CAP_DB sentinel.
    """
    if (estimate.height, estimate.width, estimate.channels) != (
        reference.height,
        reference.width,
        reference.channels,
    ):
        raise ConfigError(
            f"shape mismatch: {estimate.channels}x{estimate.height}x{estimate.width} vs "
            f"{reference.channels}x{reference.height}x{reference.width}"
        )
    mse = float(np.mean((estimate.to_unit() - reference.to_unit()) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def synthetic_house(height: int = 64, width: int = 64) -> ImageTensor:
    """Deterministic piecewise-smooth test scene (sky, roof line, wall, windows).

    Serves as a stand-in benchmark image: smooth regions, strong edges, and a
    little repeating texture, the regimes a denoiser has to balance.
    """
    y = np.linspace(0.0, 1.0, height)[:, None]
    x = np.linspace(0.0, 1.0, width)[None, :]

    img = 0.82 - 0.25 * y + 0.03 * np.sin(2 * np.pi * x * 1.5)  # sky gradient
    sun = ((x - 0.78) ** 2 + (y - 0.18) ** 2) < 0.006
    img = np.where(sun, 0.97, img)

    wall = (y > 0.45) & (y < 0.92) & (x > 0.18) & (x < 0.72)
    img = np.where(wall, 0.55 + 0.02 * np.sin(2 * np.pi * y * 12), img)

    roof = (y > 0.28) & (y < 0.47) & (np.abs(x - 0.45) < (y - 0.26) * 0.85)
    img = np.where(roof, 0.30, img)

    for wx in (0.28, 0.50):
        win = (y > 0.55) & (y < 0.70) & (x > wx) & (x < wx + 0.10)
        img = np.where(win, 0.18, img)
    door = (y > 0.72) & (y < 0.92) & (x > 0.60) & (x < 0.68)
    img = np.where(door, 0.25, img)

    ground = y > 0.92
    img = np.where(ground, 0.40 + 0.04 * np.sin(2 * np.pi * x * 6), img)

    return from_unit(np.clip(img, 0.0, 1.0))
