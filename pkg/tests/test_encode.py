import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nppnet.encode import (
    AugmentedWarpSet,
    EncodingConfig,
    Encoder,
    alias_free_frequencies,
    encode_pixel,
    positional_encode,
    warp,
)
from nppnet.geometry import DisplacementPair, PeriodicityVector, to_periodicity_vectors
from nppnet.proposal import DEFAULT_OFFSETS


def circ_close(a, b, p, tol=1e-9):
    d = abs(a - b) % p
    return min(d, p - d) < tol


def test_warp_examples():
    p = PeriodicityVector(4.0, 0.0)
    assert warp(p, (5, 7)) == pytest.approx(1.0)
    assert warp(p, (-1, 3)) == pytest.approx(3.0)


def test_warp_range_million():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        p = PeriodicityVector(rng.uniform(0.1, 100), rng.uniform(0, math.pi))
        xs, ys = rng.uniform(-1e4, 1e4, (2, 1000))
        v = warp(p, xs, ys)
        assert np.all((v >= 0) & (v < p.period))
    assert 0 <= warp(PeriodicityVector(3.0, 0.0), -1e-18, 0.0) < 3.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0.5, 50), st.floats(0, math.pi - 1e-6), st.floats(-500, 500), st.floats(-500, 500),
       st.integers(-5, 5))
def test_warp_periodicity_identity(period, theta, x, y, k):
    p = PeriodicityVector(period, theta)
    shifted = (x + k * period * math.cos(theta), y + k * period * math.sin(theta))
    assert circ_close(warp(p, shifted), warp(p, (x, y)), period, 1e-9)


def test_positional_encode_examples():
    assert np.allclose(positional_encode(0.0, 4), [0, 1, 0, 1, 0, 1, 0, 1])
    assert np.allclose(positional_encode(1.0, 1), [0, -1], atol=1e-15)
    assert positional_encode(0.3).shape == (20,)
    v = 0.37
    want = []
    for k in range(10):
        want += [math.sin(2**k * math.pi * v), math.cos(2**k * math.pi * v)]
    assert np.allclose(positional_encode(v), want, atol=1e-12)


def warp_set(K, offsets=DEFAULT_OFFSETS):
    pairs = [DisplacementPair((14, 0), (3, 14)), DisplacementPair((20, 0), (0, 9)), DisplacementPair((11, 2), (-4, 13))]
    groups = []
    for pair in pairs[:K]:
        per = to_periodicity_vectors(pair)
        groups.append(tuple(q.offset(d) for q in (per.p1, per.p2) for d in offsets))
    return AugmentedWarpSet(groups[0], tuple(v for g in groups[1:] for v in g))


def test_layout_lengths():
    cfg = EncodingConfig(128, 128)
    a, b = encode_pixel((3, 4), warp_set(3), cfg)
    assert len(a) == 2 * 10 * 12 == 240 and len(b) == 2 * 10 * 20 == 400
    a, b = encode_pixel((3, 4), warp_set(1, (0.0,)), cfg)
    assert len(a) == 2 * 10 * 4 and len(b) == 0


def test_exact_formula_without_antialiasing():
    ws = warp_set(2, (0.0, 1.0))
    cfg = EncodingConfig(64, 48, antialias=False)
    x = (17, 30)
    a, b = encode_pixel(x, ws, cfg)
    scal = [2 * 17 / 63 - 1, 2 * 30 / 47 - 1]
    for p in ws.top1_group:
        proj = x[0] * math.cos(p.theta) + x[1] * math.sin(p.theta)
        scal.append(2 * (proj % p.period) / p.period - 1)
    want_a = np.concatenate([positional_encode(s) for s in scal])
    want_b = []
    for p in ws.rest_group:
        proj = x[0] * math.cos(p.theta) + x[1] * math.sin(p.theta)
        want_b.append(positional_encode(2 * (proj % p.period) / p.period - 1))
    assert np.allclose(a, want_a, atol=1e-12)
    assert np.allclose(b, np.concatenate(want_b), atol=1e-12)


def test_alias_free_frequency_count():
    # frequency k repeats every span / 2^k pixels; keep those of at least 2 px
    def oracle(span, d):
        return sum(1 for k in range(d) if span / 2**k >= 2)

    for span in (1.0, 1.9, 2.0, 3.9, 4.0, 14.0, 127.0, 1023.0, 5000.0):
        assert alias_free_frequencies(span, 10) == oracle(span, 10)
    assert alias_free_frequencies(127, 10) == 6
    assert alias_free_frequencies(1023, 10) == 9


def test_antialiasing_zeroes_only_high_frequencies():
    ws = warp_set(1, (0.0,))
    on = Encoder(ws, EncodingConfig(128, 128), dtype=np.float64)
    off = Encoder(ws, EncodingConfig(128, 128, antialias=False), dtype=np.float64)
    xa_on, _ = on.encode([5, 70], [9, 100])
    xa_off, _ = off.encode([5, 70], [9, 100])
    spans = [127, 127] + [p.period for p in ws.top1_group]
    for i, span in enumerate(spans):
        keep = 2 * alias_free_frequencies(span, 10)
        sl = slice(20 * i, 20 * i + keep)
        assert np.array_equal(xa_on[:, sl], xa_off[:, sl])
        assert not np.any(xa_on[:, 20 * i + keep : 20 * (i + 1)])


def test_lattice_translation_invariance():
    pair = DisplacementPair((14, 0), (3, 14))
    ws = warp_set(1, (0.0,))
    cfg = EncodingConfig(128, 128, antialias=False)
    for base in [(10, 20), (40, 7)]:
        for step in (pair.d1, pair.d2, (pair.d1[0] + pair.d2[0], pair.d2[1])):
            other = (base[0] + step[0], base[1] + step[1])
            for p in ws.top1_group:
                assert circ_close(warp(p, base), warp(p, other), p.period)
            a1, _ = encode_pixel(base, ws, cfg)
            a2, _ = encode_pixel(other, ws, cfg)
            assert np.allclose(a1[40:], a2[40:], atol=1e-9)
            assert not np.allclose(a1[:40], a2[:40])


def test_encode_deterministic_and_batched():
    ws = warp_set(3)
    enc = Encoder(ws, EncodingConfig(50, 40), dtype=np.float64)
    xs, ys = np.array([0, 3, 49]), np.array([0, 39, 12])
    a, b = enc.encode(xs, ys)
    for i in range(3):
        pa, pb = encode_pixel((xs[i], ys[i]), ws, EncodingConfig(50, 40))
        assert np.array_equal(a[i], pa) and np.array_equal(b[i], pb)
    assert enc.encode(xs, ys)[0].tobytes() == a.tobytes()


def test_warp_set_json():
    ws = warp_set(2)
    assert AugmentedWarpSet.from_json(ws.to_json()) == ws
    assert len(ws) == 20
