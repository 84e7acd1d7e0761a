"""Synthetic near-periodic images, benchmark mask protocols and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import DisplacementPair

MOTIFS = ("checker", "blobs", "brick", "stripes")
OCCLUDERS = ("none", "rectangle", "disk")
MASK_PROTOCOLS = ("nrtdb", "dtd", "facade", "center")
_SNAP = 10**9


@dataclass(frozen=True)
class SynthSpec:
    motif: str = "blobs"
    pair: DisplacementPair = field(default_factory=lambda: DisplacementPair((16, 0), (0, 16)))
    width: int = 128
    height: int = 128
    ramp: float = 0.0
    jitter: float = 0.0
    occluder: str = "none"
    seed: int = 0
    channels: int = 3

    def __post_init__(self):
        if self.motif not in MOTIFS:
            raise ValueError(f"unknown motif {self.motif!r}; choose from {MOTIFS}")
        if self.occluder not in OCCLUDERS:
            raise ValueError(f"unknown occluder {self.occluder!r}; choose from {OCCLUDERS}")
        if self.ramp < 0 or self.jitter < 0:
            raise ValueError("ramp and jitter amplitudes must be non-negative")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")


def _palette(rng: np.random.Generator, n: int, channels: int) -> np.ndarray:
    cols = rng.uniform(0.15, 0.85, size=(n, channels))
    # keep neighbouring palette entries visually distinct
    for i in range(1, n):
        while np.abs(cols[i] - cols[i - 1]).max() < 0.3:
            cols[i] = rng.uniform(0.15, 0.85, size=channels)
    return cols


def _wrapped(t):
    return t - np.round(t)


def _motif(kind: str, u: np.ndarray, v: np.ndarray, rng: np.random.Generator, channels: int) -> np.ndarray:
    """Colour of a unit-cell motif at fractional lattice coordinates ``(u, v)``."""
    pal = _palette(rng, 4, channels)
    shape = u.shape + (channels,)
    if kind == "checker":
        on = (u < 0.5) ^ (v < 0.5)
        return np.where(on[..., None], pal[0], pal[1]) * np.ones(shape)
    if kind == "blobs":
        out = np.ones(shape) * pal[0]
        for k in range(1, 4):
            cu, cv = rng.uniform(0, 1, 2)
            r = rng.uniform(0.12, 0.22)
            dist2 = _wrapped(u - cu) ** 2 + _wrapped(v - cv) ** 2
            weight = np.exp(-0.5 * dist2 / (0.5 * r) ** 2)[..., None]
            out = out * (1 - weight) + pal[k] * weight
        return out
    if kind == "brick":
        mortar = (np.abs(_wrapped(v)) < 0.1) | (np.abs(_wrapped(u)) < 0.06)
        shade = 0.08 * np.cos(2 * np.pi * u)[..., None]
        return np.where(mortar[..., None], pal[2], np.clip(pal[0] + shade, 0.1, 0.9))
    # stripes: a soft band plus a sharp line, periodic along u only
    soft = 0.5 + 0.5 * np.cos(2 * np.pi * u)
    line = (np.abs(_wrapped(u - 0.3)) < 0.08).astype(float)
    return pal[0] * (1 - soft[..., None]) + pal[1] * soft[..., None] * (1 - line[..., None]) + pal[2] * line[..., None]


def synth(spec: SynthSpec, origin=(0.0, 0.0)):
    """Render a synthetic near-periodic image.

    Returns:
        ``(image, pair, nonperiodic)`` where ``nonperiodic`` marks occluder pixels.
    """
    pair = spec.pair
    w, h = spec.width, spec.height
    extent = np.abs(np.array([pair.d1, pair.d2])).sum(axis=0)
    if extent[0] > w or extent[1] > h:
        raise ValueError(f"motif cell {tuple(extent)} is larger than the {w}x{h} image")
    rng = np.random.default_rng(spec.seed)
    basis = np.array([pair.d1, pair.d2], dtype=float).T
    inv = np.linalg.inv(basis)
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    rel = np.stack([xs - origin[0], ys - origin[1]])
    uv = np.einsum("ij,jhw->ihw", inv, rel)
    # snap lattice coordinates so exact lattice translates land on identical fractions
    # (integer arithmetic, so the fractional part is bit-identical across translates)
    ticks = np.round(uv * _SNAP).astype(np.int64)
    tile = np.floor_divide(ticks, _SNAP)
    frac = (ticks - tile * _SNAP) / float(_SNAP)
    u, v = frac[0], frac[1]
    tile = tile.astype(int)
    img = _motif(spec.motif, u, v, np.random.default_rng(rng.integers(2**32)), spec.channels)
    if spec.jitter > 0:
        lo = tile.reshape(2, -1).min(axis=1)
        span = tile.reshape(2, -1).max(axis=1) - lo + 1
        offsets = np.random.default_rng(rng.integers(2**32)).normal(0, spec.jitter, size=(span[0], span[1], spec.channels))
        img = img + offsets[tile[0] - lo[0], tile[1] - lo[1]]
    if spec.ramp > 0:
        img = img * ramp_field(w, h, spec.ramp)[:, :, None]
    nonperiodic = np.zeros((h, w), bool)
    if spec.occluder != "none":
        orng = np.random.default_rng(rng.integers(2**32))
        oh, ow = max(h // 5, 2), max(w // 5, 2)
        y0 = int(orng.integers(0, h - oh + 1))
        x0 = int(orng.integers(0, w - ow + 1))
        if spec.occluder == "rectangle":
            nonperiodic[y0 : y0 + oh, x0 : x0 + ow] = True
        else:
            cy, cx, r = y0 + oh / 2, x0 + ow / 2, min(oh, ow) / 2
            nonperiodic = (ys + 0.5 - cy) ** 2 + (xs + 0.5 - cx) ** 2 <= r * r
        noise = ndimage.gaussian_filter(orng.uniform(0, 1, size=(h, w, spec.channels)), (1.0, 1.0, 0))
        noise = (noise - noise.mean()) * 4 + orng.uniform(0.2, 0.8, spec.channels)
        img = np.where(nonperiodic[:, :, None], noise, img)
    return np.clip(img, 0.0, 1.0), pair, nonperiodic


def ramp_field(width: int, height: int, amplitude: float) -> np.ndarray:
    """Smooth multiplicative illumination ramp along the image diagonal."""
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    t = 0.5 * (xs / max(width - 1, 1) + ys / max(height - 1, 1))
    return 1.0 + amplitude * (t - 0.5)


# --- masks ------------------------------------------------------------------

def box_mask(width: int, height: int, top: int, left: int, box_h: int, box_w: int) -> np.ndarray:
    """Known-pixel mask with a rectangular unknown box (clipped to the image)."""
    known = np.ones((height, width), bool)
    known[max(top, 0) : max(top + box_h, 0), max(left, 0) : max(left + box_w, 0)] = False
    return known


def make_mask(protocol: str, width: int, height: int, seed: int = 0, frac: float = 0.5) -> np.ndarray:
    """Unknown-region masks following the benchmark protocols; returns a known-pixel mask.

    ``nrtdb``: random box with sides in [100, 500] px and top-left corner within
    250 px of the image centre (constants scaled by ``min(W, H)/1000`` for images
    smaller than 500 px).  ``dtd``: 70% x 70% box anchored at the bottom right.
    ``facade``: centred box of ``(H/6, W/3)``.  ``center``: centred box covering
    ``frac`` of each side.
    """
    if protocol not in MASK_PROTOCOLS:
        raise ValueError(f"unknown mask protocol {protocol!r}; choose from {MASK_PROTOCOLS}")
    if width < 2 or height < 2:
        raise ValueError("image too small for a mask protocol")
    if protocol == "nrtdb":
        scale = 1.0 if min(width, height) >= 500 else min(width, height) / 1000.0
        lo, hi, spread = 100 * scale, 500 * scale, 250 * scale
        rng = np.random.default_rng(seed)
        box_h = int(round(rng.uniform(lo, hi)))
        box_w = int(round(rng.uniform(lo, hi)))
        top = int(round(rng.uniform(height / 2 - spread, height / 2 + spread)))
        left = int(round(rng.uniform(width / 2 - spread, width / 2 + spread)))
        top = min(max(top, 0), height - 1)
        left = min(max(left, 0), width - 1)
        if box_h < 1 or box_w < 1:
            raise ValueError("image too small for the nrtdb protocol")
        return box_mask(width, height, top, left, box_h, box_w)
    if protocol == "dtd":
        box_h, box_w = int(round(0.7 * height)), int(round(0.7 * width))
        return box_mask(width, height, height - box_h, width - box_w, box_h, box_w)
    if protocol == "facade":
        box_h, box_w = int(round(height / 6)), int(round(width / 3))
        if box_h < 1 or box_w < 1:
            raise ValueError("image too small for the facade protocol")
        return box_mask(width, height, (height - box_h) // 2, (width - box_w) // 2, box_h, box_w)
    if not 0 < frac <= 1:
        raise ValueError("center mask fraction must lie in (0, 1]")
    box_h, box_w = int(round(frac * height)), int(round(frac * width))
    return box_mask(width, height, (height - box_h) // 2, (width - box_w) // 2, box_h, box_w)


# --- metrics ----------------------------------------------------------------

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_WIN = 11


def rmse(pred, truth, region=None) -> float:
    """Root mean squared error on the 0-255 scale."""
    diff = (np.asarray(pred, float) - np.asarray(truth, float)) * 255.0
    if diff.ndim == 2:
        diff = diff[:, :, None]
    if region is not None:
        diff = diff[np.asarray(region, bool)]
    return float(np.sqrt(np.mean(diff * diff)))


def psnr_from_rmse(value: float) -> float:
    return math.inf if value == 0 else 20.0 * math.log10(255.0 / value)


def ssim_map(pred, truth, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM averaged over channels (Gaussian 11x11 window, sigma 1.5)."""
    x = np.asarray(pred, float)
    y = np.asarray(truth, float)
    if x.ndim == 2:
        x, y = x[:, :, None], y[:, :, None]
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    trunc = (SSIM_WIN // 2) / SSIM_SIGMA

    def filt(a):
        return ndimage.gaussian_filter(a, SSIM_SIGMA, mode="reflect", truncate=trunc)

    maps = []
    for c in range(x.shape[2]):
        a, b = x[:, :, c], y[:, :, c]
        mu_a, mu_b = filt(a), filt(b)
        saa = filt(a * a) - mu_a * mu_a
        sbb = filt(b * b) - mu_b * mu_b
        sab = filt(a * b) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
        maps.append(num / den)
    return np.mean(maps, axis=0)


@dataclass(frozen=True)
class EvalReport:
    rmse: float
    psnr: float
    ssim: float
    region: str = "full"
    periodicity_error: float | None = None

    def to_json(self) -> dict:
        out = {"rmse": self.rmse, "psnr": self.psnr, "ssim": self.ssim, "region": self.region}
        if self.periodicity_error is not None:
            out["periodicity_error"] = self.periodicity_error
        return out


def evaluate(pred, truth, known=None, periodicity_error: float | None = None) -> dict[str, EvalReport]:
    """RMSE / PSNR / SSIM over the full image and over the unknown region.

    ``known`` is the known-pixel mask of the completion task; the ``unknown``
    report is omitted when it is ``None`` or has no unknown pixel.
    """
    pred = np.asarray(pred, float)
    truth = np.asarray(truth, float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    smap = ssim_map(pred, truth)
    reports = {}
    full_rmse = rmse(pred, truth)
    reports["full"] = EvalReport(full_rmse, psnr_from_rmse(full_rmse), float(smap.mean()), "full",
                                 periodicity_error)
    if known is not None:
        unknown = ~np.asarray(known, bool)
        if unknown.shape != pred.shape[:2]:
            raise ValueError("mask shape does not match image")
        if unknown.any():
            r = rmse(pred, truth, unknown)
            reports["unknown"] = EvalReport(r, psnr_from_rmse(r), float(smap[unknown].mean()), "unknown",
                                            periodicity_error)
    return reports
