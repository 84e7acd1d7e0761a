import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nppnet.geometry import (
    CircularPeriodicity,
    DisplacementPair,
    LatticeCloud,
    Periodicity,
    PeriodicityVector,
    chamfer_periodicity_error,
    circular_warp,
    cross2,
    lattice_cloud,
    to_periodicity_vectors,
)


def dual_oracle(d1, d2):
    """Independent oracle: rows of the inverse basis are the reciprocal lattice vectors.

    r1 . d1 = 1 and r1 . d2 = 0, so r1 is perpendicular to d2 and the lattice
    repeats every 1/|r1| pixels along it.
    """
    basis = np.array([d1, d2], dtype=float)
    r = np.linalg.solve(basis, np.eye(2))  # columns r1, r2
    out = []
    for col in r.T:
        period = 1.0 / np.linalg.norm(col)
        theta = math.atan2(col[1], col[0]) % math.pi
        out.append((period, theta))
    return out


def angle_close(a, b, tol=1e-9):
    d = abs(a - b) % math.pi
    return min(d, math.pi - d) < tol


pairs = st.tuples(
    st.integers(-40, 40), st.integers(0, 40), st.integers(-40, 40), st.integers(0, 40)
).filter(lambda t: t[0] * t[3] - t[1] * t[2] != 0)


def test_square_lattice():
    per = to_periodicity_vectors(DisplacementPair((16, 0), (0, 16)))
    assert per.p1.period == pytest.approx(16) and per.p1.theta == pytest.approx(0)
    assert per.p2.period == pytest.approx(16) and per.p2.theta == pytest.approx(math.pi / 2)


def test_skew_lattice_example():
    per = to_periodicity_vectors(DisplacementPair((2, 0), (1, 1)))
    assert per.p1.period == pytest.approx(math.sqrt(2), abs=1e-12)
    assert per.p1.theta == pytest.approx(3 * math.pi / 4, abs=1e-12)
    v = per.p1.vector
    assert np.allclose(v, [-1, 1])
    assert abs(np.dot(v, [1, 1])) < 1e-12
    assert abs(cross2(v, (1, 1))) == pytest.approx(2)


def test_rectangular_lattice():
    per = to_periodicity_vectors(DisplacementPair((3, 0), (0, 5)))
    assert (per.p1.period, per.p1.theta) == pytest.approx((3, 0))
    assert (per.p2.period, per.p2.theta) == pytest.approx((5, math.pi / 2))


def test_horizontal_d2_gives_vertical_p1():
    per = to_periodicity_vectors(DisplacementPair((3, 4), (7, 0)))
    assert per.p1.theta == pytest.approx(math.pi / 2)
    assert per.p1.period == pytest.approx(4)


@pytest.mark.parametrize("d1,d2", [((1, 0), (2, 0)), ((0, 0), (1, 1)), ((2, 2), (4, 4))])
def test_parallel_pairs_rejected(d1, d2):
    with pytest.raises(ValueError):
        DisplacementPair(d1, d2)


def test_negative_dy_rejected():
    with pytest.raises(ValueError):
        DisplacementPair((1, -1), (0, 3))


def test_json_round_trip():
    d = DisplacementPair((5, 1), (-2, 7))
    assert DisplacementPair.from_json(d.to_json()) == d
    p = PeriodicityVector(3.5, 1.0)
    assert PeriodicityVector.from_json(p.to_json()) == p


def test_periodicity_vector_invariants():
    with pytest.raises(ValueError):
        PeriodicityVector(0.0, 0.1)
    with pytest.raises(ValueError):
        PeriodicityVector(1.0, math.pi)
    with pytest.raises(ValueError):
        Periodicity(PeriodicityVector(1, 0.2), PeriodicityVector(2, 0.2))


@settings(max_examples=300, deadline=None)
@given(pairs)
def test_matches_dual_lattice_oracle(t):
    d1, d2 = (t[0], t[1]), (t[2], t[3])
    per = to_periodicity_vectors(DisplacementPair(d1, d2))
    (q1, a1), (q2, a2) = dual_oracle(d1, d2)
    assert per.p1.period == pytest.approx(q1, rel=1e-9)
    assert per.p2.period == pytest.approx(q2, rel=1e-9)
    assert angle_close(per.p1.theta, a1, 1e-9) and angle_close(per.p2.theta, a2, 1e-9)
    assert 0 <= per.p1.theta < math.pi and 0 <= per.p2.theta < math.pi


@settings(max_examples=300, deadline=None)
@given(pairs)
def test_orthogonality_and_cross_equality(t):
    d1, d2 = (t[0], t[1]), (t[2], t[3])
    per = to_periodicity_vectors(DisplacementPair(d1, d2))
    area = abs(cross2(d1, d2))
    assert abs(np.dot(per.p1.vector, d2)) < 1e-9
    assert abs(np.dot(per.p2.vector, d1)) < 1e-9
    assert abs(abs(cross2(per.p1.vector, d2)) - area) < 1e-9
    assert abs(abs(cross2(d1, per.p2.vector)) - area) < 1e-9


def test_lattice_cloud_examples():
    pts = lattice_cloud(DisplacementPair((16, 0), (0, 16)), (0, 0), 32, 32).points
    assert {tuple(p) for p in pts} == {(0, 0), (16, 0), (0, 16), (16, 16)}
    pts = lattice_cloud(DisplacementPair((16, 0), (8, 16)), (0, 0), 32, 32).points
    assert {tuple(p) for p in pts} == {(0, 0), (16, 0), (8, 16), (24, 16)}
    pts = lattice_cloud(DisplacementPair((100, 0), (0, 100)), (0, 0), 32, 32).points
    assert [tuple(p) for p in pts] == [(0, 0)]


@settings(max_examples=60, deadline=None)
@given(pairs, st.floats(0, 30), st.floats(0, 30))
def test_lattice_cloud_matches_brute_force(t, ox, oy):
    d = DisplacementPair((t[0], t[1]), (t[2], t[3]))
    w, h = 48, 40
    got = {tuple(np.round(p, 9)) for p in lattice_cloud(d, (ox, oy), w, h).points}
    # lattice points are origin + integer offsets (i, j) whose Cramer coefficients are integers
    det = d.d1[0] * d.d2[1] - d.d1[1] * d.d2[0]
    want = set()
    for i in range(math.floor(-ox) - 1, w + 1):
        for j in range(math.floor(-oy) - 1, h + 1):
            x, y = ox + i, oy + j
            if not (0 <= x < w and 0 <= y < h):
                continue
            if (i * d.d2[1] - j * d.d2[0]) % det == 0 and (d.d1[0] * j - d.d1[1] * i) % det == 0:
                want.add((round(x, 9), round(y, 9)))
    assert got == want


def cloud(points, w=64, h=64):
    return LatticeCloud(np.asarray(points, dtype=float), w, h)


def test_chamfer_examples():
    base = lattice_cloud(DisplacementPair((16, 0), (0, 16)), (0, 0), 64, 64)
    assert chamfer_periodicity_error(base, base) == 0.0
    shifted = cloud(base.points + [1, 0])
    assert chamfer_periodicity_error(shifted, base) == pytest.approx(1.0)
    assert chamfer_periodicity_error(cloud([[3, 4]]), cloud([[0, 0]])) == pytest.approx(5.0)


def test_chamfer_is_not_symmetric():
    # a coarse lattice sits on a fine one, but not the other way round
    fine = lattice_cloud(DisplacementPair((8, 0), (0, 8)), (0, 0), 64, 64)
    coarse = lattice_cloud(DisplacementPair((16, 0), (0, 16)), (0, 0), 64, 64)
    assert chamfer_periodicity_error(coarse, fine) == 0.0
    assert chamfer_periodicity_error(fine, coarse) > 0.0


def test_chamfer_rejects_empty():
    with pytest.raises(ValueError):
        chamfer_periodicity_error(cloud(np.zeros((0, 2))), cloud([[0, 0]]))


def test_circular_warp_examples():
    c = CircularPeriodicity((0.0, 0.0), math.pi / 2)
    assert circular_warp(c, (1, 0)) == pytest.approx((1, 0))
    r, a = circular_warp(c, (0, 2))
    assert r == pytest.approx(2) and a == pytest.approx(0, abs=1e-12)
    r, a = circular_warp(CircularPeriodicity((0.0, 0.0), 2 * math.pi), (-1, 0))
    assert (r, a) == pytest.approx((1, math.pi))
    assert circular_warp(c, (0, 0)) == (0.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.01, 2 * math.pi))
def test_circular_angular_range(x, y, p):
    _, a = circular_warp(CircularPeriodicity((1.5, -2.0), p), (x, y))
    assert 0 <= a < p
