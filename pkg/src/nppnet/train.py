"""Single-image optimisation: robust pixel loss, lattice-guided patch loss, samplers and the schedule.

The model is fitted to one image.  Every step draws a batch of known pixels
(robust per-pixel loss) and a couple of patches (perceptual loss against the
ground truth at the same position, contextual loss against ground-truth
patches shifted by whole lattice steps).  :func:`complete` runs the full
pipeline: periodicity proposal, augmentation, training and rendering.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .encode import AugmentedWarpSet, Encoder, EncodingConfig
from .features import contextual_loss_grad, perceptual_distance_grad, rgb_patch_features
from .geometry import DisplacementPair, to_periodicity_vectors
from .model import Adam, ModelLayout, NppModel, Tape
from .raster import as_image, check_mask

ABLATIONS = ("no-periodicity", "pixel-only", "patch-only", "pixel-random")
ROLE_KNOWN = "known"
ROLE_UNKNOWN = "unknown"
# encoded inputs of the whole image are cached when they fit in this many bytes
_CACHE_BYTES = 512 * 2**20


@dataclass
class TrainConfig:
    """Hyper-parameters of one fit.  Field names double as the JSON config keys."""

    lambda1: float = 1.0
    lambda2: float = 0.001
    batch_pixels: int = 8192
    batch_patches: int = 2
    lambda_p: float = 0.4
    lambda_c: float = 1.0
    n_shifted: int = 3
    patch_sizes: tuple = (64, 96, 128, 160)
    known_threshold: float = 0.7
    epochs: int = 4000
    seed: int = 0
    robust_alpha: float = 1.0
    robust_scale: float = 0.03
    lr: float = 5e-4
    lr_decay_every: int = 500
    lr_decay: float = 0.5
    patch_shrink_every: int = 2000
    min_patch: int = 8
    shift_window: int = 8
    width: int = 512
    snake_a: float = 1.0
    num_frequencies: int = 10
    antialias: bool = True
    top_k: int = 3
    offsets: tuple = (0.0, -0.5, 0.5, -1.0, 1.0)
    q_max: int = 9
    pseudo_masks: int = 3
    proposal_width: int = 128
    proposal_epochs: int = 300
    proposal_batch: int = 2048
    render_tile: int = 64
    threads: int = 1
    ablation: str | None = None

    def __post_init__(self):
        self.patch_sizes = tuple(int(s) for s in self.patch_sizes)
        self.offsets = tuple(float(o) for o in self.offsets)
        self.validate()

    def validate(self) -> None:
        for name in ("lambda1", "lambda2", "lambda_p", "lambda_c", "robust_alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 < self.known_threshold <= 1:
            raise ValueError("known_threshold must be in (0, 1]")
        if self.robust_scale <= 0:
            raise ValueError("robust_scale must be > 0")
        if self.batch_pixels < 1 or self.batch_patches < 0 or self.n_shifted < 0:
            raise ValueError("batch sizes must be positive")
        if not self.patch_sizes or min(self.patch_sizes) < 1:
            raise ValueError("patch_sizes must be a non-empty list of positive sizes")
        if self.top_k < 1 or self.epochs < 0 or self.width < 1:
            raise ValueError("top_k and width must be >= 1, epochs >= 0")
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["patch_sizes"] = list(self.patch_sizes)
        out["offsets"] = list(self.offsets)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**obj)


# --- losses -------------------------------------------------------------------

def robust_kernel(e, alpha: float = 1.0, c: float = 0.03):
    """General robust kernel rho(e; alpha, c) with the quadratic (2) and log (0) limits."""
    x2 = (np.asarray(e, dtype=float) / c) ** 2
    if alpha == 2:
        return 0.5 * x2
    if alpha == 0:
        return np.log1p(0.5 * x2)
    b = abs(alpha - 2.0)
    return (b / alpha) * ((x2 / b + 1.0) ** (alpha / 2.0) - 1.0)


def robust_kernel_grad(e, alpha: float = 1.0, c: float = 0.03):
    e = np.asarray(e)
    x = e / c
    if alpha == 2:
        return x / c
    if alpha == 0:
        return 2.0 * e / (e * e + 2.0 * c * c)
    b = abs(alpha - 2.0)
    return (x / c) * (x * x / b + 1.0) ** (alpha / 2.0 - 1.0)


def robust_pixel_loss(pred, truth, alpha: float = 1.0, c: float = 0.03) -> float:
    """Robust loss of one pixel, summed over channels."""
    e = np.asarray(pred, dtype=float) - np.asarray(truth, dtype=float)
    return float(np.sum(robust_kernel(e, alpha, c)))


# --- samplers -----------------------------------------------------------------

@dataclass(frozen=True)
class PatchSample:
    center: tuple[int, int]
    size: int
    role: str


def sample_pixel_batch(valid: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` flat pixel indices drawn uniformly with replacement from ``valid``."""
    idx = np.flatnonzero(np.asarray(valid, bool))
    if len(idx) == 0:
        raise ValueError("cannot sample pixels from an empty region")
    return idx[rng.integers(0, len(idx), size=n)]


def sample_patch_centers(valid: np.ndarray, n: int, rng: np.random.Generator, size: int = 0) -> list[PatchSample]:
    """Half known-role, half unknown-role patch centres (all from one side if the other is empty)."""
    valid = np.asarray(valid, bool)
    w = valid.shape[1]
    known = np.flatnonzero(valid)
    unknown = np.flatnonzero(~valid)
    n_unknown = n // 2
    if len(unknown) == 0:
        n_unknown = 0
    elif len(known) == 0:
        n_unknown = n
    out = []
    for role, pool, count in ((ROLE_KNOWN, known, n - n_unknown), (ROLE_UNKNOWN, unknown, n_unknown)):
        for flat in pool[rng.integers(0, len(pool), size=count)] if count else []:
            out.append(PatchSample((int(flat % w), int(flat // w)), size, role))
    return out


def patch_origin(center, size: int, width: int, height: int) -> tuple[int, int]:
    """Top-left corner of the ``size`` patch around ``center``, shifted to lie inside the image."""
    x0 = min(max(int(center[0]) - size // 2, 0), width - size)
    y0 = min(max(int(center[1]) - size // 2, 0), height - size)
    return x0, y0


def _integral(valid: np.ndarray) -> np.ndarray:
    ii = np.zeros((valid.shape[0] + 1, valid.shape[1] + 1))
    ii[1:, 1:] = np.cumsum(np.cumsum(valid, axis=0), axis=1)
    return ii


def _box_sum(ii: np.ndarray, x0, y0, s):
    return ii[y0 + s, x0 + s] - ii[y0, x0 + s] - ii[y0 + s, x0] + ii[y0, x0]


def shifted_gt_centers(x, d: DisplacementPair, valid: np.ndarray, s: int, n: int, threshold: float,
                       exclude_origin: bool = False, window: int = 8, integral=None) -> list[tuple[int, int]]:
    """Nearest ``n`` lattice translates ``x + a d1 + b d2`` whose ``s``-patch is in bounds and mostly known."""
    if s <= 0:
        raise ValueError("patch size must be positive")
    valid = np.asarray(valid, bool)
    h, w = valid.shape
    if s > min(h, w):
        return []
    ii = _integral(valid) if integral is None else integral
    r = np.arange(-window, window + 1)
    al, be = np.meshgrid(r, r, indexing="ij")
    al, be = al.ravel(), be.ravel()
    cx = int(x[0]) + al * d.d1[0] + be * d.d2[0]
    cy = int(x[1]) + al * d.d1[1] + be * d.d2[1]
    x0, y0 = cx - s // 2, cy - s // 2
    ok = (x0 >= 0) & (y0 >= 0) & (x0 + s <= w) & (y0 + s <= h)
    if exclude_origin:
        ok &= ~((al == 0) & (be == 0))
    if not ok.any():
        return []
    cx, cy, x0, y0, al, be = cx[ok], cy[ok], x0[ok], y0[ok], al[ok], be[ok]
    frac = _box_sum(ii, x0, y0, s) / float(s * s)
    keep = frac >= threshold - 1e-12
    cx, cy, al, be = cx[keep], cy[keep], al[keep], be[keep]
    dist = np.hypot(cx - x[0], cy - x[1])
    order = np.lexsort((be, al, dist))[:n]
    return [(int(cx[i]), int(cy[i])) for i in order]


def random_gt_centers(valid: np.ndarray, s: int, n: int, threshold: float, rng: np.random.Generator,
                      integral=None) -> list[tuple[int, int]]:
    """Centres of ``n`` ground-truth patches placed uniformly over fully known positions.

    Falls back to positions meeting ``threshold`` when no fully known ``s`` patch exists.
    """
    valid = np.asarray(valid, bool)
    h, w = valid.shape
    if s > min(h, w):
        return []
    ii = _integral(valid) if integral is None else integral
    ys, xs = np.mgrid[0 : h - s + 1, 0 : w - s + 1]
    frac = _box_sum(ii, xs, ys, s) / float(s * s)
    pos = np.flatnonzero(frac >= 1.0 - 1e-12)
    if len(pos) == 0:
        pos = np.flatnonzero(frac >= threshold - 1e-12)
    if len(pos) == 0:
        return []
    pick = pos[rng.integers(0, len(pos), size=n)]
    cols = w - s + 1
    return [(int(p % cols) + s // 2, int(p // cols) + s // 2) for p in pick]


# --- schedule -----------------------------------------------------------------

def base_patch_size(periods, sizes) -> int:
    """Smallest size that covers two periods, clamped to the available sizes."""
    sizes = sorted(sizes)
    if not periods:
        return sizes[0]
    need = 2.0 * max(periods)
    for s in sizes:
        if s >= need:
            return s
    return sizes[-1]


def schedule(epoch: int, base_size: int, base_count: int, every: int = 2000, min_size: int = 8) -> tuple[int, int]:
    """Patch size and patch count in effect at ``epoch`` (halve size, double count per stage)."""
    t = epoch // every if every else 0
    return max(base_size // 2**t, min_size), base_count * 2**t


# --- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    model: NppModel
    encoder: Encoder
    history: list = field(default_factory=list)
    audit: dict = field(default_factory=dict)


class Trainer:
    """Owns the data, encodings, samplers and optimiser of one fit.

    Args:
        image: ``(H, W, C)`` image; only pixels in ``known`` are ever read.
        known: pixels whose values supervise the pixel loss and ground-truth patches.
        warps: augmented periodicity vectors (empty for the no-periodicity variant).
        d_top1: Top-1 displacement pair used to place shifted ground-truth patches.
        cfg: hyper-parameters.
        pixel_weights: optional per-pixel weights; when given the pixel batch is
            drawn over the whole image and each pixel's loss is scaled by its weight.
        patch_mode: ``"lattice"`` (shifted by d_top1) or ``"random"`` ground-truth patches.
    """

    def __init__(self, image, known, warps: AugmentedWarpSet, d_top1: DisplacementPair | None, cfg: TrainConfig,
                 pixel_weights=None, patch_mode: str = "lattice", dtype=np.float32):
        image = as_image(image)
        self.height, self.width, self.channels = image.shape
        self.known = check_mask(known, image.shape[:2])
        if not self.known.any():
            raise ValueError("known region is empty")
        # provenance: unknown pixels are NaN so that any accidental read poisons the loss
        self.target = np.where(self.known[:, :, None], image, np.nan)
        self.flat_target = self.target.reshape(-1, self.channels)
        self.cfg = cfg
        self.d_top1 = d_top1
        if patch_mode == "lattice" and d_top1 is None:
            patch_mode = "random"
        self.patch_mode = patch_mode
        if pixel_weights is None:
            self.weights = None
        else:
            self.weights = np.asarray(pixel_weights, dtype=float).reshape(self.height, self.width)
            if (self.weights[~self.known] != 0).any():
                # weighted pixels outside the known set still need a value: use the input
                self.target = np.where(self.weights[:, :, None] > 0, image, self.target)
                self.flat_target = self.target.reshape(-1, self.channels)
        self.encoder = Encoder(warps, EncodingConfig(self.width, self.height, cfg.num_frequencies, antialias=cfg.antialias), dtype=dtype)
        layout = ModelLayout.scaled(self.encoder.dim_a, self.encoder.dim_b, cfg.width, snake_a=cfg.snake_a,
                                    out_dim=self.channels)
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self.rng_init, self.rng_pixels, self.rng_patches = (np.random.default_rng(s) for s in seeds)
        self.model = NppModel.init(layout, self.rng_init, dtype=dtype)
        self.opt = Adam(lr=cfg.lr, decay_every=cfg.lr_decay_every, decay=cfg.lr_decay)
        self._cache = None
        n = self.height * self.width
        if n * (self.encoder.dim_a + self.encoder.dim_b) * np.dtype(dtype).itemsize <= _CACHE_BYTES:
            ys, xs = np.divmod(np.arange(n), self.width)
            self._cache = self.encoder.encode(xs, ys)
        periods = []
        if d_top1 is not None:
            per = to_periodicity_vectors(d_top1)
            periods = [per.p1.period, per.p2.period]
        self.base_size = min(base_patch_size(periods, cfg.patch_sizes), self.height, self.width)
        self._integral = _integral(self.known)
        self.audit = {"shifted_below_threshold": 0, "unknown_role_lp_nonzero": 0, "unknown_reads": 0}

    # encoded inputs for flat pixel indices
    def inputs(self, flat: np.ndarray):
        if self._cache is not None:
            return self._cache[0][flat], self._cache[1][flat]
        ys, xs = np.divmod(flat, self.width)
        return self.encoder.encode(xs, ys)

    def pixel_step(self, flat: np.ndarray, lambda1: float | None = None):
        """Pixel-loss value and gradients for a batch of flat indices."""
        xa, xb = self.inputs(flat)
        tape = Tape()
        pred = self.model.forward(xa, xb, tape)
        loss, g = self._pixel_loss(flat, pred, lambda1)
        return loss, self.model.backward(tape, g)

    def _pixel_loss(self, flat: np.ndarray, pred: np.ndarray, lambda1: float | None = None):
        """Pixel-loss value and its gradient with respect to the predictions."""
        cfg = self.cfg
        lambda1 = cfg.lambda1 if lambda1 is None else lambda1
        truth = self.flat_target[flat]
        w = None if self.weights is None else self.weights.reshape(-1)[flat][:, None]
        if w is None:
            bad = np.isnan(truth).any(axis=1)
        else:
            bad = np.isnan(truth).any(axis=1) & (w[:, 0] > 0)
            truth = np.where(w > 0, truth, 0.0)
        if bad.any():
            self.audit["unknown_reads"] += int(bad.sum())
            raise RuntimeError("pixel loss tried to read an unknown pixel")
        e = pred.astype(float) - truth
        rho = robust_kernel(e, cfg.robust_alpha, cfg.robust_scale)
        g = robust_kernel_grad(e, cfg.robust_alpha, cfg.robust_scale)
        if w is not None:
            rho = rho * w
            g = g * w
        scale = lambda1 / len(flat)
        return scale * float(rho.sum()), scale * g

    def _gt_patch(self, x0, y0, s):
        m = self.known[y0 : y0 + s, x0 : x0 + s]
        gt = np.where(m[:, :, None], self.target[y0 : y0 + s, x0 : x0 + s], 0.0)
        return gt, m

    def _patch_pixels(self, sample: PatchSample):
        s = sample.size
        x0, y0 = patch_origin(sample.center, s, self.width, self.height)
        ys, xs = np.mgrid[y0 : y0 + s, x0 : x0 + s]
        return x0, y0, (ys * self.width + xs).ravel()

    def patch_step(self, sample: PatchSample):
        """Patch loss ``lambda_p gamma L_p + lambda_c L_c`` of one sample and its gradients."""
        x0, y0, flat = self._patch_pixels(sample)
        xa, xb = self.inputs(flat)
        tape = Tape()
        out = self.model.forward(xa, xb, tape)
        total, g_pred = self._patch_loss(sample, x0, y0, out)
        return total, g_pred, tape

    def _patch_loss(self, sample: PatchSample, x0: int, y0: int, out: np.ndarray):
        """Patch loss and its gradient with respect to the rendered ``(s, s, C)`` patch."""
        cfg = self.cfg
        s = sample.size
        pred = out.astype(float).reshape(s, s, self.channels)
        g_pred = np.zeros_like(pred)
        lp = lc = 0.0
        gamma = 1.0 if sample.role == ROLE_KNOWN else 0.0
        if gamma and cfg.lambda_p:
            gt, m = self._gt_patch(x0, y0, s)
            if m.any():
                fp, back = rgb_patch_features(pred, m)
                fg, _ = rgb_patch_features(gt, m)
                lp, gf = perceptual_distance_grad(fp, fg, m)
                g_pred += cfg.lambda_p * gamma * back(gf)
        if cfg.lambda_c and cfg.n_shifted:
            center = (x0 + s // 2, y0 + s // 2)
            if self.patch_mode == "lattice":
                centers = shifted_gt_centers(center, self.d_top1, self.known, s, cfg.n_shifted,
                                             cfg.known_threshold, exclude_origin=sample.role == ROLE_UNKNOWN,
                                             window=cfg.shift_window, integral=self._integral)
            else:
                centers = random_gt_centers(self.known, s, cfg.n_shifted, cfg.known_threshold,
                                            self.rng_patches, integral=self._integral)
            for c in centers:
                gx0, gy0 = c[0] - s // 2, c[1] - s // 2
                gt, m = self._gt_patch(gx0, gy0, s)
                if m.mean() < cfg.known_threshold - 1e-12:
                    self.audit["shifted_below_threshold"] += 1
                fp, back = rgb_patch_features(pred, m)
                fg, _ = rgb_patch_features(gt, m)
                loss, gf = contextual_loss_grad(fp, fg, m)
                lc += loss / len(centers)
                g_pred += (cfg.lambda_c / len(centers)) * back(gf)
        total = cfg.lambda_p * gamma * lp + cfg.lambda_c * lc
        return total, g_pred

    def loss_and_grads(self, epoch: int):
        """Loss breakdown and summed parameter gradients of one step (no update)."""
        cfg = self.cfg
        lam1, lam2 = cfg.lambda1, cfg.lambda2
        if cfg.ablation == "pixel-only":
            lam2 = 0.0
        elif cfg.ablation == "patch-only":
            lam1 = 0.0
        # the pixel batch and all patches share one forward and one backward pass
        parts = []
        if lam1:
            region = self.known if self.weights is None else np.ones_like(self.known)
            parts.append((None, 0, 0, sample_pixel_batch(region, cfg.batch_pixels, self.rng_pixels)))
        count = 0
        if lam2 and cfg.batch_patches:
            size, count = schedule(epoch, self.base_size, cfg.batch_patches, cfg.patch_shrink_every, cfg.min_patch)
            size = min(size, self.height, self.width)
            for sample in sample_patch_centers(self.known, count, self.rng_patches, size):
                parts.append((sample, *self._patch_pixels(sample)))
        grads = None
        pix = patch = 0.0
        if parts:
            flat = np.concatenate([part[3] for part in parts])
            xa, xb = self.inputs(flat)
            tape = Tape()
            out = self.model.forward(xa, xb, tape)
            g_out = np.empty(out.shape)
            start = 0
            for sample, x0, y0, idx in parts:
                stop = start + len(idx)
                if sample is None:
                    pix, g_out[start:stop] = self._pixel_loss(idx, out[start:stop], lam1)
                else:
                    loss, g_pred = self._patch_loss(sample, x0, y0, out[start:stop])
                    scale = lam2 / count
                    patch += scale * loss
                    g_out[start:stop] = scale * g_pred.reshape(-1, self.channels)
                start = stop
            grads = self.model.backward(tape, g_out)
        rec = {"epoch": epoch, "pixel": pix, "patch": patch, "total": pix + patch}
        return rec, grads

    def step(self, epoch: int) -> dict:
        """One optimisation step; returns the loss breakdown."""
        rec, grads = self.loss_and_grads(epoch)
        if grads is not None:
            rec["lr"] = self.opt.step(self.model.params, grads)
        return rec

    def fit(self, epochs: int | None = None, callback=None) -> TrainResult:
        epochs = self.cfg.epochs if epochs is None else epochs
        history = []
        for epoch in range(epochs):
            rec = self.step(epoch)
            history.append(rec)
            if callback is not None:
                callback(rec)
        return TrainResult(self.model, self.encoder, history, dict(self.audit))

    def render(self, tile: int | None = None) -> np.ndarray:
        return render(self.model, self.encoder, self.height, self.width, tile or self.cfg.render_tile, self)


def total_loss_step(trainer: Trainer, epoch: int = 0):
    """Loss and summed gradients of one step without applying the update."""
    rec, grads = trainer.loss_and_grads(epoch)
    return rec["total"], grads


def render(model: NppModel, encoder: Encoder, height: int, width: int, tile: int = 64, trainer=None) -> np.ndarray:
    """Evaluate the model at every pixel, ``tile x tile`` pixels at a time."""
    out = np.empty((height, width, model.layout.out_dim))
    for y0 in range(0, height, tile):
        for x0 in range(0, width, tile):
            ys, xs = np.mgrid[y0 : min(y0 + tile, height), x0 : min(x0 + tile, width)]
            if trainer is not None:
                xa, xb = trainer.inputs((ys * width + xs).ravel())
            else:
                xa, xb = encoder.encode(xs.ravel(), ys.ravel())
            out[ys, xs] = model.forward(xa, xb).reshape(ys.shape + (-1,))
    return out


# --- completion driver --------------------------------------------------------

@dataclass
class CompletionResult:
    image: np.ndarray
    rendered: np.ndarray
    proposals: object
    warps: AugmentedWarpSet
    train: TrainResult | None
    variant: str


def composite(image, rendered, known) -> np.ndarray:
    """Known pixels from the input, the rest from the rendering."""
    image = as_image(image)
    return np.where(np.asarray(known, bool)[:, :, None], image, rendered)


def complete(img, unknown_mask, cfg: TrainConfig | None = None, proposals=None,
             return_details: bool = False):
    """Fill the unknown pixels of ``img`` by fitting the model to the rest.

    Args:
        img: ``(H, W, C)`` image in [0, 1].
        unknown_mask: True where the pixel must be synthesised.
        cfg: training configuration (``cfg.ablation`` selects a variant).
        proposals: precomputed :class:`~nppnet.proposal.ProposalSet`; searched when omitted.
        return_details: return a :class:`CompletionResult` instead of the image.
    """
    from . import proposal as proposal_mod

    cfg = cfg or TrainConfig()
    img = as_image(img)
    unknown = check_mask(unknown_mask, img.shape[:2])
    known = ~unknown
    if not known.any():
        raise ValueError("known region is empty")
    if not unknown.any():
        out = img.copy()
        if return_details:
            return CompletionResult(out, out, proposals, AugmentedWarpSet(), None, "identity")
        return out
    variant = cfg.ablation or "full"
    warps = AugmentedWarpSet()
    d_top1 = None
    if variant != "no-periodicity":
        if proposals is None:
            proposals = proposal_mod.search_periodicities(img, known, cfg)
        if proposals.k_effective(cfg.top_k) == 0:
            variant = "no-periodicity"
        else:
            warps = proposal_mod.augment(proposals, cfg.top_k, cfg.offsets)
            d_top1 = proposals.ranked[0].pair
    mode = "random" if variant in ("no-periodicity", "pixel-random") else "lattice"
    trainer = Trainer(img, known, warps, d_top1, cfg, patch_mode=mode)
    result = trainer.fit()
    rendered = trainer.render()
    out = composite(img, rendered, known)
    if return_details:
        return CompletionResult(out, rendered, proposals, warps, result, variant)
    return out
