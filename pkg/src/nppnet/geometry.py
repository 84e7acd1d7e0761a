"""Lattice geometry: displacement pairs, periodicity vectors and lattice point clouds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


def cross2(a, b) -> float:
    """Scalar 2D cross product (z component of the 3D cross product)."""
    return float(a[0]) * float(b[1]) - float(a[1]) * float(b[0])


@dataclass(frozen=True)
class DisplacementPair:
    """Two integer lattice basis vectors ``d1`` and ``d2`` in pixels (x, y)."""

    d1: tuple[int, int]
    d2: tuple[int, int]

    def __post_init__(self):
        d1 = tuple(int(v) for v in self.d1)
        d2 = tuple(int(v) for v in self.d2)
        object.__setattr__(self, "d1", d1)
        object.__setattr__(self, "d2", d2)
        if d1[1] < 0 or d2[1] < 0:
            raise ValueError(f"displacement y components must be >= 0, got {d1}, {d2}")
        if cross2(d1, d2) == 0:
            raise ValueError(f"displacement vectors are parallel or zero: {d1}, {d2}")

    @property
    def area(self) -> float:
        return abs(cross2(self.d1, self.d2))

    def to_json(self) -> dict:
        return {"d1": list(self.d1), "d2": list(self.d2)}

    @classmethod
    def from_json(cls, obj: dict) -> "DisplacementPair":
        return cls(tuple(obj["d1"]), tuple(obj["d2"]))


@dataclass(frozen=True)
class PeriodicityVector:
    period: float
    theta: float

    def __post_init__(self):
        if not self.period > 0:
            raise ValueError(f"period must be positive, got {self.period}")
        if not 0.0 <= self.theta < math.pi:
            raise ValueError(f"theta must lie in [0, pi), got {self.theta}")

    @property
    def direction(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta)])

    @property
    def vector(self) -> np.ndarray:
        return self.period * self.direction

    def offset(self, delta: float) -> "PeriodicityVector":
        """Shift the period by ``delta`` pixels along the vector's own direction."""
        return PeriodicityVector(self.period + delta, self.theta)

    def to_json(self) -> dict:
        return {"period": self.period, "theta": self.theta}

    @classmethod
    def from_json(cls, obj: dict) -> "PeriodicityVector":
        return cls(float(obj["period"]), float(obj["theta"]))


@dataclass(frozen=True)
class Periodicity:
    p1: PeriodicityVector
    p2: PeriodicityVector

    def __post_init__(self):
        if self.p1.theta == self.p2.theta:
            raise ValueError("periodicity vectors must have distinct directions")

    def vectors(self) -> tuple[PeriodicityVector, PeriodicityVector]:
        return (self.p1, self.p2)

    def is_close(self, other: "Periodicity", period_tol: float = 0.5, angle_tol: float = 0.02) -> bool:
        """True when both vectors match ``other`` (in either order) within tolerance."""

        def same(a: PeriodicityVector, b: PeriodicityVector) -> bool:
            dtheta = abs(a.theta - b.theta)
            dtheta = min(dtheta, math.pi - dtheta)
            return abs(a.period - b.period) < period_tol and dtheta < angle_tol

        return (same(self.p1, other.p1) and same(self.p2, other.p2)) or (
            same(self.p1, other.p2) and same(self.p2, other.p1)
        )


def _fold_angle(theta: float) -> float:
    theta = math.fmod(theta, math.pi)
    if theta < 0:
        theta += math.pi
    if theta >= math.pi:
        theta -= math.pi
    return theta


def _perpendicular_vector(d_from, d_perp_to) -> PeriodicityVector:
    # orientation perpendicular to d_perp_to, magnitude |d_from x d_perp_to| / |d_perp_to|
    dx, dy = d_perp_to
    if dy == 0:
        theta = math.pi / 2
    else:
        theta = _fold_angle(math.atan(-dx / dy))
    period = abs(cross2(d_from, d_perp_to)) / math.hypot(dx, dy)
    return PeriodicityVector(period, theta)


def to_periodicity_vectors(d: DisplacementPair) -> Periodicity:
    """Convert a lattice basis into the periodicity vector pair used for warping.

    ``p1`` is perpendicular to ``d2`` and ``p2`` perpendicular to ``d1``; each
    magnitude is the lattice cell area divided by the length of the other
    displacement, so that ``|p1 x d2| = |d1 x d2|``.
    """
    return Periodicity(_perpendicular_vector(d.d1, d.d2), _perpendicular_vector(d.d2, d.d1))


@dataclass(frozen=True)
class LatticeCloud:
    points: np.ndarray  # (n, 2) x, y
    width: int
    height: int

    def __len__(self) -> int:
        return len(self.points)


def lattice_cloud(d: DisplacementPair, origin=(0.0, 0.0), width: int = 0, height: int = 0) -> LatticeCloud:
    """All points ``origin + a*d1 + b*d2`` (integer a, b) inside ``[0,W) x [0,H)``."""
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    basis = np.array([d.d1, d.d2], dtype=float).T  # columns d1, d2
    inv = np.linalg.inv(basis)
    origin = np.asarray(origin, dtype=float)
    corners = np.array([[0, 0], [width, 0], [0, height], [width, height]], dtype=float) - origin
    coeffs = inv @ corners.T
    lo = np.floor(coeffs.min(axis=1)).astype(int) - 1
    hi = np.ceil(coeffs.max(axis=1)).astype(int) + 1
    a, b = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing="ij")
    pts = origin + a.reshape(-1, 1) * np.array(d.d1, float) + b.reshape(-1, 1) * np.array(d.d2, float)
    keep = (pts[:, 0] >= 0) & (pts[:, 0] < width) & (pts[:, 1] >= 0) & (pts[:, 1] < height)
    pts = pts[keep]
    order = np.lexsort((pts[:, 0], pts[:, 1]))
    return LatticeCloud(pts[order], width, height)


def chamfer_periodicity_error(proposed: LatticeCloud, truth: LatticeCloud) -> float:
    """Mean distance from each proposed point to its nearest truth point (one-directional)."""
    if len(proposed) == 0 or len(truth) == 0:
        raise ValueError("chamfer error needs two non-empty point clouds")
    dist, _ = cKDTree(truth.points).query(proposed.points)
    return float(np.mean(dist))


@dataclass(frozen=True)
class CircularPeriodicity:
    centroid: tuple[float, float]
    angular_period: float

    def __post_init__(self):
        if not 0.0 < self.angular_period <= 2 * math.pi:
            raise ValueError("angular period must lie in (0, 2*pi]")


def circular_warp(c: CircularPeriodicity, x) -> tuple[float, float]:
    """Radial distance and angular phase of ``x`` around the rotation centroid.

    The angle at the centroid itself is undefined; it is reported as 0.
    """
    dx = float(x[0]) - c.centroid[0]
    dy = float(x[1]) - c.centroid[1]
    radial = math.hypot(dx, dy)
    if radial == 0.0:
        return 0.0, 0.0
    angle = math.fmod(math.atan2(dy, dx) + 2 * math.pi, 2 * math.pi)
    angular = math.fmod(angle, c.angular_period)
    if angular >= c.angular_period:
        angular = 0.0
    return radial, angular
