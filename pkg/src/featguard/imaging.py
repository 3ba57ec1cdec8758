"""Pixel-domain image model, lossless persistence and distance/quality metrics.

Images live in the 0-255 float domain with layout H x W x C. Any per-model
normalization happens inside the model adapter, never here.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import correlate1d

from .errors import ContractError, FormatError

__all__ = [
    "ImageTensor",
    "LabeledImage",
    "load_image",
    "save_image_lossless",
    "quantize",
    "linf_distance",
    "ssim",
    "gaussian_window",
]


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """Immutable H x W x C pixel array with values in [0, 255]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64, copy=True)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise ContractError(f"expected H x W x C pixels, got shape {px.shape}")
        if px.shape[2] not in (1, 3):
            raise FormatError(f"unsupported channel count {px.shape[2]}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ContractError("image must have positive height and width")
        if not np.all(np.isfinite(px)):
            raise ContractError("pixels must be finite")
        if px.min() < 0.0 or px.max() > 255.0:
            raise ContractError(
                f"pixels outside [0, 255]: min={px.min():.4f} max={px.max():.4f}"
            )
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.pixels, other.pixels))

    def __hash__(self):
        return hash((self.shape, self.pixels.tobytes()))

    @classmethod
    def clipped(cls, pixels) -> "ImageTensor":
        """Build from an array that may stray slightly outside [0, 255]."""
        return cls(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 255.0))


@dataclass(frozen=True)
class LabeledImage:
    image: ImageTensor
    label: int
    source_id: str

    def __post_init__(self):
        if int(self.label) < 0:
            raise ContractError(f"label must be non-negative, got {self.label}")
        object.__setattr__(self, "label", int(self.label))


def load_image(path, target_size=None) -> ImageTensor:
    """Decode a PNG/JPEG file into an ImageTensor, optionally resizing to (H, W).

    Grayscale files give one channel and RGB files three. Palette images are
    expanded to RGB. Resizing is bilinear.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGB")
                mode = "RGB"
            elif mode in ("I;16", "I"):
                raise FormatError(f"{path}: unsupported bit depth mode {mode!r}")
            if mode not in ("L", "RGB"):
                raise FormatError(f"{path}: unsupported channel layout {mode!r}")
            if target_size is not None:
                h, w = target_size
                if (im.height, im.width) != (h, w):
                    im = im.resize((w, h), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64)
    except (UnidentifiedImageError, SyntaxError) as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    return ImageTensor(arr)


def quantize(img: ImageTensor) -> np.ndarray:
    """Nearest-integer 8-bit pixels, as they would be written to disk."""
    return np.clip(np.rint(img.pixels), 0, 255).astype(np.uint8)


def save_image_lossless(img: ImageTensor, path) -> None:
    """Write ``img`` as an 8-bit PNG. Lossy formats are refused."""
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise FormatError(f"protected images are stored as PNG only, got {path.suffix!r}")
    arr = quantize(img)
    if arr.shape[2] == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(arr, mode="RGB")
    pil.save(path, format="PNG")


def _check_same_shape(a: ImageTensor, b: ImageTensor):
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")


def linf_distance(a: ImageTensor, b: ImageTensor) -> float:
    _check_same_shape(a, b)
    return float(np.max(np.abs(a.pixels - b.pixels)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is its outer product."""
    r = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - r
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _valid_filter(plane: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # Separable filter, then keep only positions where the window fits.
    half = len(taps) // 2
    out = correlate1d(plane, taps, axis=0, mode="constant")
    out = correlate1d(out, taps, axis=1, mode="constant")
    return out[half : plane.shape[0] - half, half : plane.shape[1] - half]


def ssim_map(x: np.ndarray, y: np.ndarray, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=255.0):
    """Local SSIM values of two 2-D planes over all fully-contained windows."""
    taps = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x = _valid_filter(x, taps)
    mu_y = _valid_filter(y, taps)
    sxx = _valid_filter(x * x, taps) - mu_x**2
    syy = _valid_filter(y * y, taps) - mu_y**2
    sxy = _valid_filter(x * y, taps) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(a: ImageTensor, b: ImageTensor, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 255.0) -> float:
    """Mean structural similarity, computed per channel and averaged.

    Gaussian-weighted local statistics (population variances) over every
    window that fits entirely inside the image.
    """
    _check_same_shape(a, b)
    if a.height < window or a.width < window:
        raise ContractError(f"image {a.height}x{a.width} smaller than {window}x{window} window")
    if a is b or np.array_equal(a.pixels, b.pixels):
        return 1.0
    vals = [
        ssim_map(a.pixels[:, :, c], b.pixels[:, :, c], window, sigma, k1, k2, data_range).mean()
        for c in range(a.channels)
    ]
    return float(np.mean(vals))
