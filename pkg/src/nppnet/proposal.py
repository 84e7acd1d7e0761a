"""Periodicity proposal: rank detections across q by pseudo-mask reconstruction, then augment.

Each q gives one detected displacement pair.  To rank them, a few square
"pseudo masks" are carved out of the known region, a small branch-A-only model
is fitted to the rest with every candidate, and the candidate whose model best
reconstructs the pseudo-masked pixels wins.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .detect import DetectionError, ScoreTable, best_pair, candidate_set, detection_features
from .encode import AugmentedWarpSet
from .geometry import DisplacementPair, Periodicity, to_periodicity_vectors
from .raster import as_image, check_mask

DEFAULT_OFFSETS = (0.0, -0.5, 0.5, -1.0, 1.0)
MIN_MASK_SIDE = 8.0
# shorter periods cannot survive the -1 px offset and do not describe a visible lattice
MIN_PERIOD = 2.0
SIDE_FACTOR = 5.0 / (6.0 * math.sqrt(2.0))


class ProposalError(ValueError):
    pass


# --- pseudo masks ---------------------------------------------------------------

@dataclass(frozen=True)
class PseudoMask:
    center: tuple[int, int]
    side: float
    clearance: float

    def bounds(self) -> tuple[float, float, float, float]:
        h = self.side / 2.0
        return self.center[0] - h, self.center[1] - h, self.center[0] + h, self.center[1] + h

    def overlaps(self, other: "PseudoMask") -> bool:
        reach = (self.side + other.side) / 2.0
        return abs(self.center[0] - other.center[0]) < reach and abs(self.center[1] - other.center[1]) < reach

    def pixels(self, height: int, width: int) -> np.ndarray:
        x0, y0, x1, y1 = self.bounds()
        ys, xs = np.mgrid[0:height, 0:width]
        return (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)


@dataclass
class PseudoMaskPlan:
    masks: list
    M: int

    def mask(self, height: int, width: int) -> np.ndarray:
        out = np.zeros((height, width), bool)
        for m in self.masks:
            out |= m.pixels(height, width)
        return out

    def to_json(self) -> dict:
        return {"M": self.M, "masks": [{"center": list(m.center), "side": m.side} for m in self.masks]}


def clearance_map(valid: np.ndarray) -> np.ndarray:
    """Distance from each known pixel to the nearest unknown pixel or the outside of the image."""
    padded = np.pad(np.asarray(valid, bool), 1, constant_values=False)
    return ndimage.distance_transform_edt(padded)[1:-1, 1:-1]


def plan_pseudo_masks(valid: np.ndarray, M: int = 3) -> PseudoMaskPlan:
    """Greedy placement of up to ``M`` disjoint squares deep inside the known region.

    Centres are visited in order of decreasing clearance ``L`` (row-major among
    ties); a square of side ``5L / (6 sqrt 2)`` is kept when it does not overlap
    the ones already chosen.  Since the half-diagonal of such a square is below
    ``L``, it never touches an unknown pixel.
    """
    valid = np.asarray(valid, bool)
    if not valid.any():
        raise ProposalError("known region is empty")
    dist = clearance_map(valid)
    if SIDE_FACTOR * dist.max() < MIN_MASK_SIDE:
        raise ProposalError("known region is too small to host a pseudo mask")
    w = valid.shape[1]
    flat = dist.ravel()
    order = np.lexsort((np.arange(flat.size), -flat))
    chosen: list[PseudoMask] = []
    for idx in order:
        L = float(flat[idx])
        side = SIDE_FACTOR * L
        if side < MIN_MASK_SIDE or len(chosen) == M:
            break
        cand = PseudoMask((int(idx % w), int(idx // w)), side, L)
        if not any(cand.overlaps(c) for c in chosen):
            chosen.append(cand)
    return PseudoMaskPlan(chosen, M)


# --- ranking ----------------------------------------------------------------------

@dataclass(frozen=True)
class Candidate:
    pair: DisplacementPair
    periodicity: Periodicity
    q: int
    score: float
    error: float | None = None

    def to_json(self) -> dict:
        return {**self.pair.to_json(), "error": self.error, "q": self.q, "score": self.score,
                "p1": self.periodicity.p1.to_json(), "p2": self.periodicity.p2.to_json()}


@dataclass
class ProposalSet:
    ranked: list
    offsets: tuple = DEFAULT_OFFSETS
    method: str = "pseudo-mask"
    plan: PseudoMaskPlan | None = None
    skipped: dict = field(default_factory=dict)

    def k_effective(self, K: int) -> int:
        return min(K, len(self.ranked))

    def to_json(self) -> list:
        return [c.to_json() for c in self.ranked]


def is_duplicate(a: Periodicity, b: Periodicity, period_tol: float = 0.5, angle_tol: float = 0.02) -> bool:
    return a.is_close(b, period_tol, angle_tol)


def detect_candidates(img, valid, q_max: int = 9) -> tuple[list, dict]:
    """One detection per q in ``1..q_max`` (first occurrence kept among duplicates)."""
    img = as_image(img)
    valid = check_mask(valid, img.shape[:2])
    h, w = valid.shape
    table = ScoreTable(detection_features(img, valid), valid)
    found, skipped = [], {}
    for q in range(1, q_max + 1):
        try:
            cands = candidate_set(q, w, h)
            if not cands:
                raise DetectionError(f"empty candidate set for q={q}")
            sd = best_pair(table, cands)
        except DetectionError as exc:
            skipped[q] = str(exc)
            continue
        per = to_periodicity_vectors(sd.pair)
        if min(per.p1.period, per.p2.period) < MIN_PERIOD:
            skipped[q] = "periodicity shorter than 2 px"
            continue
        if any(is_duplicate(per, c.periodicity) for c in found):
            continue
        found.append(Candidate(sd.pair, per, q, sd.score))
    return found, skipped


def reconstruction_error(img, valid, pseudo: np.ndarray, per: Periodicity, cfg) -> float:
    """RMSE (0-255) on the pseudo-masked pixels of a lightweight fit that never saw them."""
    from .train import Trainer

    light = cfg.replace(width=cfg.proposal_width, epochs=cfg.proposal_epochs, lambda2=0.0,
                        batch_pixels=cfg.proposal_batch, ablation=None)
    warps = AugmentedWarpSet((per.p1, per.p2), ())
    trainer = Trainer(img, valid & ~pseudo, warps, None, light)
    trainer.fit()
    ys, xs = np.nonzero(pseudo)
    flat = ys * trainer.width + xs
    pred = trainer.model.forward(*trainer.inputs(flat)).astype(float)
    diff = pred - as_image(img)[ys, xs]
    return float(np.sqrt(np.mean(diff * diff)) * 255.0)


def search_periodicities(img, valid, cfg=None, threads: int | None = None) -> ProposalSet:
    """Ranked, de-duplicated periodicity candidates for ``img`` (lowest pseudo-mask error first).

    When the known region cannot host a pseudo mask the candidates are ranked by
    detection score instead (``method == "score"``).
    """
    from .train import TrainConfig

    cfg = cfg or TrainConfig()
    img = as_image(img)
    valid = check_mask(valid, img.shape[:2])
    found, skipped = detect_candidates(img, valid, cfg.q_max)
    try:
        plan = plan_pseudo_masks(valid, cfg.pseudo_masks)
    except ProposalError:
        plan = None
    if plan is None or not found:
        ranked = sorted(found, key=lambda c: (-c.score, c.q))
        return ProposalSet(ranked, cfg.offsets, "score", plan, skipped)
    pseudo = plan.mask(*valid.shape)
    threads = cfg.threads if threads is None else threads

    def run(c: Candidate) -> Candidate:
        return Candidate(c.pair, c.periodicity, c.q, c.score, reconstruction_error(img, valid, pseudo, c.periodicity, cfg))

    if threads and threads > 1 and len(found) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scored = list(pool.map(run, found))
    else:
        scored = [run(c) for c in found]
    scored.sort(key=lambda c: (c.error, c.q))
    return ProposalSet(scored, cfg.offsets, "pseudo-mask", plan, skipped)


def augment(proposals: ProposalSet, K: int = 3, offsets=DEFAULT_OFFSETS) -> AugmentedWarpSet:
    """Top-K periodicities, each vector expanded by radial offsets; Top-1 feeds branch A."""
    if K < 1:
        raise ValueError("K must be >= 1")
    groups = []
    for cand in proposals.ranked[:K]:
        vecs = []
        for p in (cand.periodicity.p1, cand.periodicity.p2):
            vecs.extend(p.offset(d) for d in offsets)
        groups.append(tuple(vecs))
    if not groups:
        return AugmentedWarpSet()
    return AugmentedWarpSet(groups[0], tuple(v for g in groups[1:] for v in g))
