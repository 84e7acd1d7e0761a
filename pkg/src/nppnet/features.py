"""Hand-crafted dense features and the feature-space distances used by the losses.

Features are a multi-scale pyramid: for every scale ``s`` the image is smoothed
with a Gaussian of sigma ``s`` and three channels are kept (smoothed intensity,
horizontal and vertical central differences).  Each channel is standardised to
zero mean and unit variance over the valid pixels.

The patch losses need gradients with respect to the rendered patch, so the
linear part of the pyramid is also available as small dense operator matrices
(:func:`extract_with_vjp`), which makes the adjoint exact at the borders.
"""

from __future__ import annotations

import functools

import numpy as np
from scipy import ndimage

from .raster import LUMA, gaussian_kernel, to_grayscale

DEFAULT_SCALES = (1, 2, 4)
STD_EPS = 1e-8
NORM_EPS = 1e-12
CTX_EPS = 1e-5
CTX_BANDWIDTH = 0.5
CTX_MAX_POINTS = 4096
_DIFF = np.array([-0.5, 0.0, 0.5])


def _pyramid_raw(gray: np.ndarray, scales) -> np.ndarray:
    chans = []
    for s in scales:
        k = gaussian_kernel(float(s))
        sm = ndimage.correlate1d(gray, k, axis=0, mode="reflect")
        sm = ndimage.correlate1d(sm, k, axis=1, mode="reflect")
        chans.append(sm)
        chans.append(ndimage.correlate1d(sm, _DIFF, axis=1, mode="reflect"))
        chans.append(ndimage.correlate1d(sm, _DIFF, axis=0, mode="reflect"))
    return np.stack(chans, axis=-1)


def _standardize(raw: np.ndarray, valid: np.ndarray | None):
    flat = raw.reshape(-1, raw.shape[-1])
    sel = flat if valid is None else flat[np.asarray(valid, bool).ravel()]
    if len(sel) == 0:
        sel = flat
    mu = sel.mean(axis=0)
    sd = np.sqrt(sel.var(axis=0) + STD_EPS)
    return (raw - mu) / sd, sd


def extract(img: np.ndarray, valid: np.ndarray | None = None, scales=DEFAULT_SCALES,
            standardize: bool = True) -> np.ndarray:
    """Dense ``(H, W, 3*len(scales))`` feature map of an image.

    Args:
        img: ``(H, W)`` or ``(H, W, C)`` image in [0, 1].
        valid: optional known-pixel mask; standardisation statistics are
            taken over these pixels only.
        scales: Gaussian sigmas of the pyramid levels.
        standardize: disable to get the raw (translation-equivariant) pyramid.
    """
    gray = to_grayscale(img)[:, :, 0]
    raw = _pyramid_raw(gray, scales)
    if not standardize:
        return raw
    return _standardize(raw, valid)[0]


@functools.lru_cache(maxsize=64)
def _operators(n: int, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Blur and blur-then-difference operators as ``(n, n)`` matrices along one axis."""
    eye = np.eye(n)
    blur = ndimage.correlate1d(eye, gaussian_kernel(scale), axis=0, mode="reflect")
    diff = ndimage.correlate1d(blur, _DIFF, axis=0, mode="reflect")
    blur.setflags(write=False)
    diff.setflags(write=False)
    return blur, diff


def extract_with_vjp(gray: np.ndarray, scales=DEFAULT_SCALES, valid: np.ndarray | None = None):
    """Standardised features of a 2D grey patch plus a function mapping dL/dF to dL/dgray."""
    h, w = gray.shape
    chans = []
    ops = []
    for s in scales:
        by, dy = _operators(h, float(s))
        bx, dx = _operators(w, float(s))
        ops.append((by, dy, bx, dx))
        rows = by @ gray
        chans.append(rows @ bx.T)
        chans.append(rows @ dx.T)
        chans.append(dy @ gray @ bx.T)
    raw = np.stack(chans, axis=-1)
    v = np.ones((h, w), bool) if valid is None else np.asarray(valid, bool)
    if not v.any():
        v = np.ones((h, w), bool)
    n = v.sum()
    feats, sd = _standardize(raw, v)
    vf = v[:, :, None].astype(raw.dtype)

    def vjp(g_feats: np.ndarray) -> np.ndarray:
        sum_g = g_feats.sum(axis=(0, 1))
        sum_gy = (g_feats * feats).sum(axis=(0, 1))
        g_raw = (g_feats - vf * (sum_g + feats * sum_gy) / n) / sd
        g_gray = np.zeros_like(gray, dtype=float)
        for i, (by, dy, bx, dx) in enumerate(ops):
            g_gray += by.T @ (g_raw[:, :, 3 * i] @ bx + g_raw[:, :, 3 * i + 1] @ dx)
            g_gray += dy.T @ g_raw[:, :, 3 * i + 2] @ bx
        return g_gray

    return feats, vjp


def rgb_patch_features(patch: np.ndarray, mask: np.ndarray, scales=DEFAULT_SCALES):
    """Features of ``patch * mask`` and the VJP back to the RGB patch."""
    m = np.asarray(mask, dtype=float)
    if patch.shape[2] == 3:
        gray = (patch @ LUMA) * m
        weights = LUMA
    else:
        gray = patch[:, :, 0] * m
        weights = np.ones(1)
    feats, vjp = extract_with_vjp(gray, scales)

    def back(g_feats):
        return vjp(g_feats)[:, :, None] * m[:, :, None] * weights

    return feats, back


# --- distances --------------------------------------------------------------

def _unit(f: np.ndarray):
    norm = np.sqrt((f * f).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, NORM_EPS)
    return f / norm, norm


def perceptual_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel squared distance between unit-normalised feature vectors."""
    if a.shape != b.shape:
        raise ValueError(f"feature map shapes differ: {a.shape} vs {b.shape}")
    ua, _ = _unit(a)
    ub, _ = _unit(b)
    return ((ua - ub) ** 2).sum(axis=-1)


def perceptual_distance(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean of :func:`perceptual_map` over the masked pixels (0 for an empty mask)."""
    dmap = perceptual_map(a, b)
    if mask is None:
        return float(dmap.mean())
    mask = np.asarray(mask, bool)
    if mask.shape != dmap.shape:
        raise ValueError("mask shape does not match feature maps")
    if not mask.any():
        return 0.0
    return float(dmap[mask].mean())


def perceptual_distance_grad(a: np.ndarray, b: np.ndarray, mask: np.ndarray):
    """Loss and gradient with respect to ``a``."""
    mask = np.asarray(mask, bool)
    n = mask.sum()
    if n == 0:
        return 0.0, np.zeros_like(a)
    ua, na = _unit(a)
    ub, _ = _unit(b)
    diff = ua - ub
    dmap = (diff * diff).sum(axis=-1)
    loss = float(dmap[mask].mean())
    g_u = 2.0 * diff * (mask[:, :, None] / n)
    g_a = (g_u - ua * (ua * g_u).sum(axis=-1, keepdims=True)) / na
    return loss, g_a


def _subsample(idx: np.ndarray, limit: int = CTX_MAX_POINTS) -> np.ndarray:
    if len(idx) <= limit:
        return idx
    step = -(-len(idx) // limit)
    return idx[::step]


def _contextual(x: np.ndarray, y: np.ndarray, need_grad: bool):
    xh, xn = _unit(x)
    yh, _ = _unit(y)
    d = xh @ yh.T
    np.subtract(1.0, d, out=d)
    rows = np.arange(len(d))
    kmin = np.argmin(d, axis=1)
    dmin = d[rows, kmin]
    denom = dmin + CTX_EPS
    # the row maximum of a = (1 - d/denom) / h sits at kmin, so it is known in closed form
    scale = -1.0 / (CTX_BANDWIDTH * denom)
    cx = d * scale[:, None]
    cx -= (dmin * scale)[:, None]
    np.exp(cx, out=cx)
    cx /= cx.sum(axis=1, keepdims=True)
    # argmax along rows of the transposed copy is much faster than a strided column reduction
    m = cx.shape[1]
    cols = np.arange(m)
    imax = np.argmax(np.ascontiguousarray(cx.T), axis=1)
    cmax = cx[imax, cols]
    score = cmax.mean()
    loss = float(-np.log(max(score, 1e-300)))
    if not need_grad:
        return loss, None
    # dL/dcx has a single entry per column, at (imax[j], j)
    gval = -1.0 / (score * m)
    r = np.bincount(imax, weights=cmax * gval, minlength=len(d))
    g_a = cx
    g_a *= -r[:, None]
    g_a[imax, cols] += cmax * gval
    g_min = np.einsum("ij,ij->i", g_a, d) / (CTX_BANDWIDTH * denom**2)
    g_d = g_a
    g_d *= scale[:, None]
    g_d[rows, kmin] += g_min
    g_xh = -(g_d @ yh)
    g_x = (g_xh - xh * (xh * g_xh).sum(axis=1, keepdims=True)) / xn
    return loss, g_x


def contextual_loss(pred: np.ndarray, target: np.ndarray, target_valid: np.ndarray | None = None) -> float:
    """Contextual (alignment-free) loss between two feature maps.

    Both maps are treated as sets of per-pixel vectors; the target set is
    restricted to ``target_valid``.  Sets larger than 4096 points are
    subsampled with a fixed stride.
    """
    return contextual_loss_grad(pred, target, target_valid, need_grad=False)[0]


def contextual_loss_grad(pred: np.ndarray, target: np.ndarray, target_valid: np.ndarray | None = None,
                         need_grad: bool = True):
    """Loss and gradient with respect to ``pred`` (same shape as ``pred``)."""
    depth = pred.shape[-1]
    if target.shape[-1] != depth:
        raise ValueError("feature depths differ")
    x_all = pred.reshape(-1, depth)
    y_all = target.reshape(-1, depth)
    if target_valid is None:
        tidx = np.arange(len(y_all))
    else:
        tidx = np.flatnonzero(np.asarray(target_valid, bool).ravel())
    if len(tidx) == 0:
        raise ValueError("contextual loss needs at least one valid target pixel")
    pidx = _subsample(np.arange(len(x_all)))
    tidx = _subsample(tidx)
    loss, g = _contextual(x_all[pidx], y_all[tidx], need_grad)
    if g is None:
        return loss, None
    g_full = np.zeros_like(x_all)
    g_full[pidx] = g
    return loss, g_full.reshape(pred.shape)


def contextual_loss_reference(pred: np.ndarray, target: np.ndarray) -> float:
    """Plain double-loop contextual loss over two ``(n, D)`` vector sets (test oracle)."""
    n, m = len(pred), len(target)
    d = [[0.0] * m for _ in range(n)]
    for i in range(n):
        xi = pred[i] / max(np.linalg.norm(pred[i]), NORM_EPS)
        for j in range(m):
            yj = target[j] / max(np.linalg.norm(target[j]), NORM_EPS)
            d[i][j] = 1.0 - float(np.dot(xi, yj))
    cx = [[0.0] * m for _ in range(n)]
    for i in range(n):
        dmin = min(d[i])
        w = [np.exp((1.0 - d[i][j] / (dmin + CTX_EPS)) / CTX_BANDWIDTH) for j in range(m)]
        tot = sum(w)
        for j in range(m):
            cx[i][j] = w[j] / tot
    score = sum(max(cx[i][j] for i in range(n)) for j in range(m)) / m
    return -float(np.log(score))
