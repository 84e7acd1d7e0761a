"""Brute-force lattice detection over the candidate displacement ring R(q).

Every displacement ``d`` gets a score: the mean cosine similarity between the
feature vectors at ``x`` and ``x + d`` over all pixel pairs where both ends are
known.  All displacements are scored at once with zero-padded FFT
correlations; :func:`score_pair` is the direct (slow) definition and is kept
as the reference the fast table is tested against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .features import extract
from .geometry import DisplacementPair, cross2

MIN_PAIRS = 64
TOP_SINGLES = 32
_ZERO_NORM = 1e-6
_SCORE_DECIMALS = 9


class DetectionError(ValueError):
    """No usable lattice could be found for the requested candidate range."""


@dataclass(frozen=True)
class ScoredDisplacement:
    pair: DisplacementPair
    score: float

    def to_json(self) -> dict:
        return {**self.pair.to_json(), "score": self.score}


def candidate_set(q: int, width: int, height: int) -> list[tuple[int, int]]:
    """Integer displacements inside the q box but outside the (q+1) box, excluding (0, 0)."""
    if q < 1:
        raise ValueError("q must be >= 1")
    if q >= min(width, height):
        raise DetectionError(f"image {width}x{height} is too small for q={q}")
    out = []
    wq, hq = width / q, height / q
    wq1, hq1 = width / (q + 1), height / (q + 1)
    for y in range(0, math.ceil(hq)):
        if not y < hq:
            continue
        for x in range(-math.ceil(wq), math.ceil(wq) + 1):
            if not -wq < x < wq:
                continue
            if -wq1 < x < wq1 and y < hq1:
                continue
            if x == 0 and y == 0:
                continue
            out.append((x, y))
    return out


def unit_features(features: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per-pixel unit feature vectors; invalid or degenerate pixels become zero."""
    norm = np.sqrt((features * features).sum(axis=-1, keepdims=True))
    ok = (norm > _ZERO_NORM) & np.asarray(valid, bool)[:, :, None]
    return np.where(ok, features / np.where(ok, norm, 1.0), 0.0)


def single_score(features: np.ndarray, valid: np.ndarray, d) -> float:
    """Direct mean cosine similarity between ``F(x)`` and ``F(x + d)`` over valid pairs."""
    dx, dy = int(d[0]), int(d[1])
    h, w = valid.shape
    if abs(dx) >= w or abs(dy) >= h:
        return -math.inf
    u = unit_features(features, valid)
    ys0, ys1 = max(0, -dy), min(h, h - dy)
    xs0, xs1 = max(0, -dx), min(w, w - dx)
    a = u[ys0:ys1, xs0:xs1]
    b = u[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx]
    both = valid[ys0:ys1, xs0:xs1] & valid[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx]
    n = int(both.sum())
    if n < MIN_PAIRS:
        return -math.inf
    return float((a * b).sum(axis=-1)[both].sum() / n)


def score_pair(features: np.ndarray, valid: np.ndarray, d: DisplacementPair) -> float:
    """Average of the single-displacement scores of ``d1`` and ``d2``."""
    valid = np.asarray(valid, bool)
    return 0.5 * (single_score(features, valid, d.d1) + single_score(features, valid, d.d2))


class ScoreTable:
    """Scores of every displacement ``(dx, dy)`` with ``|dx| < W`` and ``|dy| < H``."""

    def __init__(self, features: np.ndarray, valid: np.ndarray):
        valid = np.asarray(valid, bool)
        h, w = valid.shape
        self.height, self.width = h, w
        u = unit_features(features, valid)
        shape = (2 * h, 2 * w)
        corr = np.zeros(shape)
        for c in range(u.shape[-1]):
            fa = np.fft.rfft2(u[:, :, c], s=shape)
            corr += np.fft.irfft2(np.conj(fa) * fa, s=shape)
        fv = np.fft.rfft2(valid.astype(float), s=shape)
        count = np.rint(np.fft.irfft2(np.conj(fv) * fv, s=shape))
        with np.errstate(invalid="ignore", divide="ignore"):
            table = np.where(count >= MIN_PAIRS, corr / np.maximum(count, 1), -np.inf)
        # roll so that displacement (0, 0) sits at index (h, w)
        self.table = np.round(np.roll(table, (h, w), axis=(0, 1)), _SCORE_DECIMALS)
        finite = np.where(np.isfinite(self.table), self.table, -np.inf)
        peak = ndimage.maximum_filter(finite, size=3, mode="constant", cval=-np.inf)
        self.local_max = np.isfinite(finite) & (finite >= peak)

    def score(self, d) -> float:
        dx, dy = int(d[0]), int(d[1])
        if abs(dx) >= self.width or abs(dy) >= self.height:
            return -math.inf
        return float(self.table[dy + self.height, dx + self.width])

    def is_local_max(self, d) -> bool:
        return bool(self.local_max[int(d[1]) + self.height, int(d[0]) + self.width])


def detection_features(img: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Standardised features with unknown pixels filled by the mean known colour."""
    valid = np.asarray(valid, bool)
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    if not valid.any():
        return np.zeros(valid.shape + (9,))
    fill = img[valid].mean(axis=0)
    clean = np.where(valid[:, :, None], img, fill)
    clean = np.nan_to_num(clean, nan=0.0)
    return extract(clean, valid)


def _order_key(d) -> tuple:
    return (d[1], d[0])


def best_pair(table: ScoreTable, candidates, top: int = TOP_SINGLES, use_peaks: bool = True) -> ScoredDisplacement:
    """Best non-parallel pair drawn from the ``top`` strongest candidates.

    With ``use_peaks`` only local maxima of the score map compete, which keeps
    the near-duplicates of a strong displacement (its 1-pixel neighbours) from
    forming degenerate, almost collinear pairs.
    """
    scored = [(table.score(d), d) for d in candidates]
    scored = [(s, d) for s, d in scored if math.isfinite(s)]
    if not scored:
        raise DetectionError("no candidate displacement has enough valid pixel pairs")
    if use_peaks:
        pool = [(s, d) for s, d in scored if table.is_local_max(d)]
        if not pool:
            raise DetectionError("no local maximum of the similarity score inside the candidate ring")
    else:
        pool = scored

    def single_key(item):
        s, d = item
        return (-s, math.hypot(*d), _order_key(d))

    pool = sorted(pool, key=single_key)[:top]
    best = None
    best_key = None
    for i in range(len(pool)):
        for j in range(i + 1, len(pool)):
            (si, di), (sj, dj) = pool[i], pool[j]
            if cross2(di, dj) == 0:
                continue
            d1, d2 = sorted((di, dj), key=_order_key)
            s = round(0.5 * (si + sj), _SCORE_DECIMALS)
            key = (-s, math.hypot(*d1) + math.hypot(*d2), _order_key(d1), _order_key(d2))
            if best_key is None or key < best_key:
                best_key, best = key, (DisplacementPair(d1, d2), s)
    if best is None:
        raise DetectionError("no two non-parallel score peaks inside the candidate ring")
    return ScoredDisplacement(*best)


def detect(img: np.ndarray, valid: np.ndarray, q: int, table: ScoreTable | None = None,
           return_score: bool = False):
    """Displacement pair in ``R(q) x R(q)`` with the highest similarity score.

    Args:
        img: ``(H, W, C)`` image.
        valid: known-pixel mask.
        q: candidate-ring index (larger q means shorter displacements).
        table: precomputed :class:`ScoreTable` (reused across q).
        return_score: return a :class:`ScoredDisplacement` instead of the pair.
    """
    valid = np.asarray(valid, bool)
    h, w = valid.shape
    candidates = candidate_set(q, w, h)
    if not candidates:
        raise DetectionError(f"empty candidate set for q={q}")
    if table is None:
        table = ScoreTable(detection_features(img, valid), valid)
    result = best_pair(table, candidates)
    return result if return_score else result.pair
