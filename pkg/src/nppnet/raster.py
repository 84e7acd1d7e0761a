"""Image and mask containers, colour conversion, blurring and file I/O.

Images are ``(H, W, C)`` float arrays in ``[0, 1]`` with ``C`` in ``{1, 3}``.
Masks are ``(H, W)`` boolean arrays where ``True`` marks a known pixel.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])


class ImageFormatError(ValueError):
    """Raised for unreadable, truncated or unsupported image files."""


def as_image(arr) -> np.ndarray:
    """Validate and normalise an array into ``(H, W, C)`` float64 layout."""
    img = np.asarray(arr, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ValueError("image values must be finite and lie in [0, 1]")
    return img


def check_mask(mask, shape) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape[:2]):
        raise ValueError(f"mask shape {mask.shape} does not match image {tuple(shape[:2])}")
    return mask


# --- file I/O ---------------------------------------------------------------

def _read_netpbm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError("only binary PGM (P5) and PPM (P6) are supported")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated netpbm header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError as exc:
            raise ImageFormatError("malformed netpbm header") from exc
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"unsupported bit depth (maxval {maxval})")
    channels = 1 if magic == b"P5" else 3
    n = width * height * channels
    body = data[pos : pos + n]
    if len(body) != n:
        raise ImageFormatError("truncated netpbm pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)


def load_image(path) -> np.ndarray:
    """Load a PNG or binary PGM/PPM file as an ``(H, W, C)`` array scaled by 1/255."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from exc
    if data[:2] in (b"P5", b"P6"):
        raw = _read_netpbm(data)
    else:
        try:
            with Image.open(path) as im:
                im.load()
                if im.mode in ("I;16", "I;16B", "I", "F"):
                    raise ImageFormatError(f"unsupported bit depth (mode {im.mode})")
                if im.mode not in ("L", "RGB"):
                    im = im.convert("RGBA" if "A" in im.mode else "RGB")
                    if im.mode == "RGBA":
                        im = im.convert("RGB")
                raw = np.asarray(im)
        except ImageFormatError:
            raise
        except Exception as exc:  # PIL raises a zoo of exception types
            raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
        if raw.ndim == 2:
            raw = raw[:, :, None]
    return raw.astype(float) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write an image; the format follows the suffix (``.png``, ``.pgm``, ``.ppm``)."""
    path = Path(path)
    raw = to_uint8(img)
    h, w, c = raw.shape
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm"):
        if (suffix == ".pgm") != (c == 1):
            raise ValueError(f"{suffix} needs {'1' if suffix == '.pgm' else '3'} channel(s), got {c}")
        header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode()
        path.write_bytes(header + raw.tobytes())
    else:
        Image.fromarray(raw[:, :, 0] if c == 1 else raw).save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    """Load a known-pixel mask; a grey value >= 128 means known."""
    img = load_image(path)
    return to_grayscale(img)[:, :, 0] * 255.0 >= 127.5


def save_mask(mask: np.ndarray, path) -> None:
    save_image(np.asarray(mask, dtype=float)[:, :, None], path)


# --- pixel operations -------------------------------------------------------

def to_grayscale(img: np.ndarray) -> np.ndarray:
    """BT.601 luma; single-channel input is returned unchanged."""
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        return img
    return (img @ LUMA)[:, :, None]


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1D Gaussian with radius ceil(3*sigma)."""
    radius = max(int(math.ceil(3.0 * sigma)), 1)
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with a symmetric (reflective) border."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    img = np.asarray(img, dtype=float)
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(img, k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize (used for figure thumbnails and scale studies)."""
    img = np.asarray(img, dtype=float)
    zoom = (height / img.shape[0], width / img.shape[1]) + ((1,) if img.ndim == 3 else ())
    return np.clip(ndimage.zoom(img, zoom, order=1, mode="nearest"), 0.0, 1.0)
