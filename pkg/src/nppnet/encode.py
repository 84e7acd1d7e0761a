"""Periodicity-aware input warping and positional encoding of pixel coordinates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PeriodicityVector

DEFAULT_FREQUENCIES = 10


def warp(p: PeriodicityVector, x, y=None):
    """Phase of a coordinate along ``p``: ``(x cos t + y sin t) mod period`` in ``[0, period)``.

    Accepts a point ``(x, y)`` or separate (broadcastable) ``x`` and ``y`` arrays.
    """
    if y is None:
        x, y = x[0], x[1]
    proj = np.asarray(x, dtype=float) * np.cos(p.theta) + np.asarray(y, dtype=float) * np.sin(p.theta)
    out = np.mod(proj, p.period)
    # np.mod can round up to exactly ``period`` for tiny negative inputs
    out = np.where(out >= p.period, 0.0, out)
    return float(out) if out.ndim == 0 else out


def positional_encode(v, d: int = DEFAULT_FREQUENCIES) -> np.ndarray:
    """``[sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(d-1) pi v), cos(2^(d-1) pi v)]``.

    Vectorised over the leading dimensions of ``v``; output has a trailing axis of length 2d.
    """
    v = np.asarray(v, dtype=float)
    freqs = np.pi * 2.0 ** np.arange(d)
    ang = v[..., None] * freqs
    out = np.empty(v.shape + (2 * d,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


@dataclass(frozen=True)
class AugmentedWarpSet:
    """Offset-augmented periodicity vectors split between the two MLP branches."""

    top1_group: tuple[PeriodicityVector, ...] = ()
    rest_group: tuple[PeriodicityVector, ...] = ()

    @property
    def vectors(self) -> tuple[PeriodicityVector, ...]:
        return self.top1_group + self.rest_group

    def __len__(self) -> int:
        return len(self.top1_group) + len(self.rest_group)

    def to_json(self) -> dict:
        return {
            "top1_group": [p.to_json() for p in self.top1_group],
            "rest_group": [p.to_json() for p in self.rest_group],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AugmentedWarpSet":
        return cls(tuple(PeriodicityVector.from_json(p) for p in obj["top1_group"]),
                   tuple(PeriodicityVector.from_json(p) for p in obj["rest_group"]))


@dataclass(frozen=True)
class EncodingConfig:
    width: int
    height: int
    num_frequencies: int = DEFAULT_FREQUENCIES
    use_coordinates: bool = True
    # zero every frequency whose period along the pixel grid is shorter than two pixels
    antialias: bool = True


def alias_free_frequencies(span: float, d: int) -> int:
    """How many of the frequencies ``2^k pi`` (k < d) have a period of at least 2 px.

    ``span`` is the number of pixels that covers the whole normalised range
    [-1, 1]: ``W - 1`` for a coordinate, the period for a warp.  Frequency k
    then repeats every ``span / 2^k`` pixels.
    """
    k = 0
    while k < d and span / 2.0**k >= 2.0:
        k += 1
    return k


@dataclass
class Encoder:
    """Maps integer pixel coordinates to the two branch input vectors.

    Layout of branch A: ``PE(x) | PE(y) | PE(warp_p) for p in top1_group``;
    branch B: ``PE(warp_p) for p in rest_group``.  Coordinates are scaled to
    [-1, 1] by the image size and each warp by its own period.
    """

    warps: AugmentedWarpSet
    cfg: EncodingConfig
    dtype: type = np.float32
    layout: dict = field(init=False)

    def __post_init__(self):
        d2 = 2 * self.cfg.num_frequencies
        slots_a = (["x", "y"] if self.cfg.use_coordinates else []) + [
            f"top1[{i}]" for i in range(len(self.warps.top1_group))
        ]
        slots_b = [f"rest[{i}]" for i in range(len(self.warps.rest_group))]
        self.layout = {
            "branch_a": [(name, i * d2, (i + 1) * d2) for i, name in enumerate(slots_a)],
            "branch_b": [(name, i * d2, (i + 1) * d2) for i, name in enumerate(slots_b)],
        }

    @property
    def dim_a(self) -> int:
        return 2 * self.cfg.num_frequencies * len(self.layout["branch_a"])

    @property
    def dim_b(self) -> int:
        return 2 * self.cfg.num_frequencies * len(self.layout["branch_b"])

    def _scalars(self, xs, ys, group) -> list[np.ndarray]:
        return [2.0 * warp(p, xs, ys) / p.period - 1.0 for p in group]

    def spans(self) -> tuple[list[float], list[float]]:
        """Pixel span of the normalised range of every scalar, per branch."""
        spans_a = [float(max(self.cfg.width - 1, 1)), float(max(self.cfg.height - 1, 1))] if self.cfg.use_coordinates else []
        spans_a += [p.period for p in self.warps.top1_group]
        return spans_a, [p.period for p in self.warps.rest_group]

    def _encode_group(self, scalars, spans, n) -> np.ndarray:
        d = self.cfg.num_frequencies
        if not scalars:
            return np.zeros((n, 0))
        out = positional_encode(np.stack(scalars, axis=1), d)
        if self.cfg.antialias:
            for i, span in enumerate(spans):
                out[:, i, 2 * alias_free_frequencies(span, d) :] = 0.0
        return out.reshape(n, -1)

    def encode(self, xs, ys) -> tuple[np.ndarray, np.ndarray]:
        """Encode arrays of pixel columns ``xs`` and rows ``ys``; returns ``(n, dim_a), (n, dim_b)``."""
        xs = np.asarray(xs, dtype=float).ravel()
        ys = np.asarray(ys, dtype=float).ravel()
        scal_a = []
        if self.cfg.use_coordinates:
            w, h = self.cfg.width, self.cfg.height
            scal_a.append(2.0 * xs / max(w - 1, 1) - 1.0)
            scal_a.append(2.0 * ys / max(h - 1, 1) - 1.0)
        scal_a += self._scalars(xs, ys, self.warps.top1_group)
        scal_b = self._scalars(xs, ys, self.warps.rest_group)
        n = len(xs)
        spans_a, spans_b = self.spans()
        xa = self._encode_group(scal_a, spans_a, n)
        xb = self._encode_group(scal_b, spans_b, n)
        return xa.astype(self.dtype), xb.astype(self.dtype)

    def encode_pixel(self, x) -> tuple[np.ndarray, np.ndarray]:
        xa, xb = self.encode([x[0]], [x[1]])
        return xa[0], xb[0]


def encode_pixel(x, warps: AugmentedWarpSet, cfg: EncodingConfig) -> tuple[np.ndarray, np.ndarray]:
    """Branch A and branch B input vectors for a single pixel (float64)."""
    return Encoder(warps, cfg, dtype=np.float64).encode_pixel(x)
