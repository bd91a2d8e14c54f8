import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpgame.channel import Schedule, Upload
from cpgame.coalition import Partition
from cpgame.perception import (
    StructuralViolation,
    UtilityCurve,
    fuse_effective_density,
    late_fusion,
    late_fusion_utility,
    per_vehicle_utility,
    system_utility,
    utility,
    vehicle_utility,
)
from cpgame.world import DensityField

from helpers import naive_late_utility

F = UtilityCurve()


def test_curve_fixtures():
    assert F.lam == pytest.approx(math.log(20) / 2)
    assert F(0.0) == 0.0
    assert F(2.0) == pytest.approx(0.95, abs=1e-12)
    assert F(1.0) == pytest.approx(1 - math.exp(-math.log(20) / 2), abs=1e-12)
    assert F(1.0) == pytest.approx(0.77639, abs=1e-5)
    assert utility(2.0) == pytest.approx(0.95)


def test_curve_rejects_negative_and_bad_params():
    with pytest.raises(ValueError):
        F(-0.1)
    with pytest.raises(ValueError):
        UtilityCurve(epsilon=1.0)
    with pytest.raises(ValueError):
        UtilityCurve(rho_th=0)


# beyond ~20 points/m^2 the curve is within float64 rounding of f_max
@given(st.floats(0, 20), st.floats(0, 20))
def test_curve_strictly_increasing_and_bounded(a, b):
    lo, hi = sorted((a, b))
    if hi - lo > 1e-6:
        assert F(lo) < F(hi)
    assert 0 <= F(hi) < F.f_max


@given(st.floats(0.1, 10), st.floats(0.001, 0.5), st.floats(0.5, 3))
def test_saturation_calibration(rho_th, eps, fmax):
    c = UtilityCurve(f_max=fmax, rho_th=rho_th, epsilon=eps)
    assert abs(c(rho_th) - (1 - eps) * fmax) <= 1e-12


def field(rows):
    rho = np.asarray(rows, dtype=float)
    return DensityField(tuple(range(len(rho))), rho)


def test_fusion_additivity_and_identity():
    d = field([[0.8, 0.0], [1.2, 0.5]])
    assert np.array_equal(fuse_effective_density(Schedule(), d), d.rho)
    p = Partition((frozenset({0, 1}),), (0,))
    fused = fuse_effective_density(Schedule([Upload(1, 0, 0, 0)]), d, p)
    assert fused[0, 0] == pytest.approx(2.0)
    assert np.array_equal(fused[1], d.rho[1])


def test_fusion_rejects_structural_violations():
    d = field([[1, 0], [1, 0], [1, 0]])
    p = Partition((frozenset({0, 1}), frozenset({2})), (0, 2))
    with pytest.raises(StructuralViolation):
        fuse_effective_density(Schedule([Upload(0, 1, 0, 0)]), d, p)  # to a non-leader
    with pytest.raises(StructuralViolation):
        fuse_effective_density(Schedule([Upload(1, 2, 0, 0)]), d, p)  # across coalitions


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_fusion_matches_triple_loop(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 10_000)))
    n, G, K = 5, 6, 3
    d = field(rng.uniform(0, 2, (n, G)) * (rng.random((n, G)) < 0.6))
    ups = {Upload(int(i), int(j), int(g), int(rng.integers(K)))
           for i, j, g in zip(rng.integers(n, size=8), rng.integers(n, size=8), rng.integers(G, size=8)) if i != j}
    fused = fuse_effective_density(Schedule(ups), d)
    naive = d.rho.copy()
    for j in range(n):
        for g in range(G):
            for u in ups:
                if u.receiver == j and u.grid == g:
                    naive[j, g] += d.rho[u.sender, g]
    assert np.allclose(fused, naive)


def test_late_fusion_examples():
    assert late_fusion_utility(0, np.zeros((3, 2)), F) == 0.0
    assert late_fusion_utility(0, np.array([[2.0]]), F) == pytest.approx(0.95)
    assert late_fusion_utility(0, np.array([[1.0], [2.0]]), F) == pytest.approx(0.95)
    assert late_fusion_utility(0, np.zeros((0, 1)), F) == 0.0


@given(st.lists(st.floats(0, 5), min_size=1, max_size=6))
def test_max_over_all_equals_max_over_observers(col):
    fused = np.array(col)[:, None]
    observers = fused[fused[:, 0] > 0]
    expected = F(observers.max()) if len(observers) else 0.0
    assert late_fusion_utility(0, fused, F) == pytest.approx(expected)


def test_vehicle_utility_examples():
    n = 7
    fused = np.ones((1, n))
    req = np.ones((1, n), bool)
    assert vehicle_utility(0, fused, req, F) == pytest.approx(n * 0.776393, abs=1e-5)
    assert vehicle_utility(0, fused, np.zeros((1, n), bool), F) == 0.0


def test_system_utility_examples():
    rng = np.random.default_rng(0)
    fused = rng.uniform(0, 3, (4, 10))
    req = rng.random((4, 10)) < 0.5
    assert system_utility(fused, req, F) == pytest.approx(naive_late_utility(fused, req, F))
    assert system_utility(fused[:1], req[:1], F) == pytest.approx(vehicle_utility(0, fused[:1], req[:1], F))
    # disjoint requirement regions, no overlap in sensing: per-vehicle values add up
    iso = np.array([[1.0, 1.0, 0, 0], [0, 0, 2.0, 2.0]])
    r = iso > 0
    assert system_utility(iso, r, F) == pytest.approx(2 * F(1.0) + 2 * F(2.0))
    # no-cooperation accounting uses each CAV's own density only
    assert system_utility(fused, req, F, late=False) == pytest.approx(float(np.where(req, F(fused), 0).sum()))


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_adding_an_upload_never_hurts(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 10_000)))
    n, G = 4, 8
    d = field(rng.uniform(0, 2, (n, G)) * (rng.random((n, G)) < 0.5))
    req = rng.random((n, G)) < 0.6
    base = {Upload(1, 0, int(g), 0) for g in rng.integers(G, size=3)}
    extra = Upload(int(rng.integers(1, n)), 0, int(rng.integers(G)), 1)
    before = fuse_effective_density(Schedule(base), d)
    after = fuse_effective_density(Schedule(base | {extra}), d)
    assert (after >= before).all()
    assert (late_fusion(after, F) >= late_fusion(before, F) - 1e-15).all()
    assert (per_vehicle_utility(after, req, F) >= per_vehicle_utility(before, req, F) - 1e-12).all()
    assert system_utility(after, req, F) >= system_utility(before, req, F) - 1e-12
    # cooperation never falls below working alone
    assert system_utility(after, req, F) >= system_utility(d.rho, req, F, late=False) - 1e-12
