"""Applications built on completion: segmentation, classification, remapping and refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.cluster.vq import kmeans2

from .features import extract
from .proposal import augment, search_periodicities
from .raster import as_image, check_mask, gaussian_blur, to_grayscale
from .train import Trainer, TrainConfig, complete, composite

SEGMENT_BLUR = 1.5
SEGMENT_LAMBDA_C = 5.0
REMAP_LAMBDA_C = 10.0
REFINE_RATIO = 0.4
# box used to initialise the non-periodic region for classification
CLASSIFY_BOX = 0.7
# pooling scale for the per-pixel feature distance
S2_POOL = 2.0


@dataclass
class SegmentationResult:
    periodic: np.ndarray        # True = periodic
    s1: np.ndarray
    s2: np.ndarray
    initial: np.ndarray         # initial non-periodic region
    relabeled: np.ndarray
    rendered: np.ndarray | None = None

    @property
    def relabeled_fraction(self) -> float:
        n = int(self.initial.sum())
        return float(self.relabeled.sum()) / n if n else 0.0

    def label_map(self) -> np.ndarray:
        """uint8 map with 255 for periodic and 0 for non-periodic pixels."""
        return np.where(self.periodic, 255, 0).astype(np.uint8)


def auto_initial_region(img, seed: int = 0, k: int = 3) -> np.ndarray:
    """Crude non-periodic initialiser: k-means on opponent colour plus position; the largest cluster is periodic."""
    img = as_image(img)
    h, w, c = img.shape
    if c == 3:
        r, g, b = img[..., 0], img[..., 1], img[..., 2]
        chans = [0.299 * r + 0.587 * g + 0.114 * b, r - g, 0.5 * (r + g) - b]
    else:
        chans = [img[..., 0]]
    ys, xs = np.mgrid[0:h, 0:w]
    feats = np.stack([ch.ravel() for ch in chans] + [xs.ravel() / max(w - 1, 1), ys.ravel() / max(h - 1, 1)], axis=1)
    feats = (feats - feats.mean(axis=0)) / (feats.std(axis=0) + 1e-8)
    _, labels = kmeans2(feats, k, seed=seed, minit="++")
    largest = np.bincount(labels, minlength=k).argmax()
    return (labels != largest).reshape(h, w)


def feature_distance_map(pred, ref, pool: float = S2_POOL) -> np.ndarray:
    """Locally pooled squared distance between first-scale features.

    Both maps are standardised with the channel statistics of ``ref`` so that
    flat regions do not blow up the way a per-pixel unit normalisation would.
    """
    fp = extract(pred, scales=(1,), standardize=False)
    fr = extract(ref, scales=(1,), standardize=False)
    sd = fr.reshape(-1, fr.shape[-1]).std(axis=0) + 1e-8
    dist = (((fp - fr) / sd) ** 2).mean(axis=-1)
    return ndimage.gaussian_filter(dist, pool) if pool > 0 else dist


def segment(img, initial_nonperiodic=None, eps1: float = 0.15, eps2: float = 0.3, cfg: TrainConfig | None = None,
            unknown=None, blur_sigma: float = SEGMENT_BLUR, proposals=None) -> SegmentationResult:
    """Relabel wrongly non-periodic pixels as periodic where the completion reproduces them.

    Args:
        img: input image.
        initial_nonperiodic: initial non-periodic region (auto-initialised when None).
        eps1: threshold on the grey-level reconstruction error ``S1``.
        eps2: threshold on the first-scale feature distance ``S2``.
        cfg: training configuration (``lambda_c`` is set to 5 unless already customised).
        unknown: optional pixels that are neither supervised nor relabelled.
    """
    cfg = cfg or TrainConfig(lambda_c=SEGMENT_LAMBDA_C)
    img = as_image(img)
    shape = img.shape[:2]
    unknown = np.zeros(shape, bool) if unknown is None else check_mask(unknown, shape)
    if initial_nonperiodic is None:
        initial = auto_initial_region(img, cfg.seed)
    else:
        initial = check_mask(initial_nonperiodic, shape)
    initial = initial & ~unknown
    zeros = np.zeros(shape)
    if not initial.any():
        return SegmentationResult(~unknown, zeros, zeros, initial, np.zeros(shape, bool))
    hidden = initial | unknown
    if hidden.all():
        raise ValueError("initial periodic region is empty")
    blurred = gaussian_blur(img, blur_sigma)
    res = complete(blurred, hidden, cfg, proposals=proposals, return_details=True)
    rendered = res.rendered
    s1 = np.abs(to_grayscale(rendered)[..., 0] - to_grayscale(blurred)[..., 0])
    s2 = feature_distance_map(rendered, blurred)
    relabeled = initial & (s1 < eps1) & (s2 < eps2)
    periodic = (~initial & ~unknown) | relabeled
    return SegmentationResult(periodic, s1, s2, initial, relabeled, rendered)


@dataclass
class ClassificationResult:
    decision: str
    relabeled_fraction: float
    segmentation: SegmentationResult

    def to_json(self) -> dict:
        return {"decision": self.decision, "relabeled_fraction": self.relabeled_fraction}


def classification_box(height: int, width: int, frac: float = CLASSIFY_BOX) -> np.ndarray:
    """Bottom-right box covering ``frac`` of each dimension."""
    box = np.zeros((height, width), bool)
    box[height - int(round(frac * height)):, width - int(round(frac * width)):] = True
    return box


def decide(relabeled_fraction: float) -> str:
    return "npp" if relabeled_fraction > 0.5 else "non_npp"


def classify(img, unknown_mask=None, cfg: TrainConfig | None = None, eps1: float = 0.15,
             eps2: float = 0.3) -> ClassificationResult:
    """NPP if more than half of the initial non-periodic box gets relabelled periodic."""
    img = as_image(img)
    h, w = img.shape[:2]
    unknown = np.zeros((h, w), bool) if unknown_mask is None else check_mask(unknown_mask, (h, w))
    initial = classification_box(h, w) & ~unknown
    seg = segment(img, initial, eps1, eps2, cfg, unknown=unknown)
    frac = seg.relabeled_fraction
    return ClassificationResult(decide(frac), frac, seg)


def laplacian_variance(img, window: int = 16) -> np.ndarray:
    """Local variance of the grey-level Laplacian over a sliding ``window``."""
    gray = to_grayscale(as_image(img))[..., 0]
    lap = ndimage.laplace(gray, mode="reflect")
    mean = ndimage.uniform_filter(lap, window, mode="reflect")
    mean2 = ndimage.uniform_filter(lap * lap, window, mode="reflect")
    return np.maximum(mean2 - mean * mean, 0.0)


def blur_threshold(img, window: int = 16, fraction: float = 0.25) -> float:
    """Default threshold: a fraction of the median window variance of ``img``."""
    return fraction * float(np.median(laplacian_variance(img, window)))


def detect_blur(img, window: int = 16, threshold: float | None = None) -> np.ndarray:
    """True where the local Laplacian variance is at or below ``threshold``.

    Flat areas (zero variance) always count as blurry.
    """
    if window < 4:
        raise ValueError("window must be >= 4")
    var = laplacian_variance(img, window)
    if threshold is None:
        threshold = 0.25 * float(np.median(var))
    return var <= max(threshold, 1e-12)


def remap_recover(img, blur=None, sigma_weight: float = 0.3, cfg: TrainConfig | None = None, proposals=None,
                  return_details: bool = False):
    """Re-synthesise blurry regions: patches come from clear areas only, pixels everywhere with weight sigma."""
    cfg = cfg or TrainConfig(lambda_c=REMAP_LAMBDA_C)
    img = as_image(img)
    blur = detect_blur(img) if blur is None else check_mask(blur, img.shape[:2])
    clear = ~blur
    if not clear.any():
        raise ValueError("no clear region to learn from")
    if proposals is None:
        proposals = search_periodicities(img, clear, cfg)
    warps, d_top1 = None, None
    if proposals.k_effective(cfg.top_k):
        warps = augment(proposals, cfg.top_k, cfg.offsets)
        d_top1 = proposals.ranked[0].pair
    from .encode import AugmentedWarpSet

    weights = clear + sigma_weight * blur
    trainer = Trainer(img, clear, warps or AugmentedWarpSet(), d_top1, cfg, pixel_weights=weights,
                      patch_mode="lattice" if d_top1 is not None else "random")
    result = trainer.fit()
    rendered = trainer.render()
    out = composite(img, rendered, clear)
    return (out, trainer, result) if return_details else out


@dataclass
class RefineResult:
    image: np.ndarray
    passes: int
    ratio: float
    first: np.ndarray
    proposals: object = None


def refine(img, unknown_mask, cfg: TrainConfig | None = None, proposals=None) -> RefineResult:
    """Complete once; for large masks re-detect on the completion and train again on the original pixels."""
    cfg = cfg or TrainConfig()
    img = as_image(img)
    unknown = check_mask(unknown_mask, img.shape[:2])
    ratio = float(unknown.mean())
    first = complete(img, unknown, cfg, proposals=proposals)
    if ratio <= REFINE_RATIO:
        return RefineResult(first, 1, ratio, first, proposals)
    # periodicities are searched on the completed image, but training below
    # only ever sees the originally known pixels
    full = np.ones(unknown.shape, bool)
    second_props = search_periodicities(first, full, cfg)
    second = complete(img, unknown, cfg, proposals=second_props)
    return RefineResult(second, 2, ratio, first, second_props)
