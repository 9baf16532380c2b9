import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpsr.numerics import ConfigError, DomainError, cosine
from lpsr.steering import (SteeringBasis, adaptive_alpha, build_basis, concentration_bound,
                           extract_delta, select_delta, select_toward)

from oracles import BOUND_D64_EXPONENT, BOUND_D64_VALUE, objective_argmin, scan_argmax


def unit_rows(rng, k, d):
    v = rng.standard_normal((k, d))
    return (v / np.linalg.norm(v, axis=1, keepdims=True)).astype(np.float32)


def test_select_axis_aligned():
    basis = SteeringBasis(np.eye(4), layer=0)
    i, v = select_delta(basis, [0.1, 0.9, 0.0, 0.0])
    assert i == 1  # zero-based index of e2
    assert select_delta(basis, np.zeros(4))[0] == 0


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.integers(1, 64), st.integers(1, 64), st.floats(1e-3, 1e3))
def test_select_matches_scan_and_scale_invariant(seed, k, d, scale):
    rng = np.random.default_rng(seed)
    basis = SteeringBasis(unit_rows(rng, k, d), layer=0)
    h = rng.standard_normal(d)
    i, _ = select_delta(basis, h)
    assert i == scan_argmax(basis.vectors, h)
    assert select_delta(basis, scale * h)[0] == i


def test_greedy_optimality_identity_1000():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k, d = int(rng.integers(1, 65)), int(rng.integers(1, 65))
        basis = SteeringBasis(unit_rows(rng, k, d), layer=0)
        h, hs = rng.standard_normal(d), rng.standard_normal(d)
        alpha = float(rng.uniform(1e-3, 1.0))
        assert select_toward(basis, h, hs)[0] == objective_argmin(basis.vectors, h, hs, alpha)


def test_adaptive_alpha_examples():
    assert adaptive_alpha(-0.9, 0.6, 0.1) == 0.1
    assert adaptive_alpha(-0.3, 0.6, 0.1) == pytest.approx(0.05)
    assert adaptive_alpha(0.0, 0.6, 0.1) == 0.0
    with pytest.raises(ConfigError):
        adaptive_alpha(0.5, 0.6, 0.0)


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.05, 0.95), st.floats(0.01, 1.0))
def test_adaptive_alpha_monotone_lipschitz(c1, c2, tp, am):
    a1, a2 = adaptive_alpha(c1, tp, am), adaptive_alpha(c2, tp, am)
    if abs(c1) <= abs(c2):
        assert a1 <= a2
    assert abs(a1 - a2) <= am / tp * abs(abs(c1) - abs(c2)) + 1e-12


def reflect_trajectory(d=16, n=10, at=5, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(d)
    hs = []
    for t in range(1, n + 1):
        u = u + 0.05 * rng.standard_normal(d)
        if t == at:
            u = -u
        hs.append(u.copy())
    return hs


def test_extract_delta_cases():
    hs = reflect_trajectory()
    assert not extract_delta(hs, hs, 0.6).delta.any()
    assert extract_delta(hs, hs, 0.6).t_star == 5
    right = [h + 1.0 for h in hs]
    d = extract_delta(hs, right, 0.6, "p")
    np.testing.assert_allclose(d.delta, np.ones(16), atol=1e-6)
    smooth = [np.ones(4) + 0.01 * i for i in range(6)]
    assert extract_delta(smooth, smooth, 0.6) is None


def test_extract_delta_brute_force_tstar():
    for seed in range(20):
        at = 2 + seed % 7
        hs = reflect_trajectory(at=at, seed=seed)
        cs = [0.0] + [cosine(a, b) for a, b in zip(hs, hs[1:])]
        expected = next(i + 1 for i, c in enumerate(cs) if c < -0.6)
        assert extract_delta(hs, hs, 0.6).t_star == expected == at


def test_extract_delta_shift_beyond_oracle():
    hs = reflect_trajectory(at=8)
    assert extract_delta(hs, hs[:3], 0.6) is None


def test_build_basis_k1_is_normalised_mean():
    rng = np.random.default_rng(1)
    deltas = rng.standard_normal((10, 6)) + 2.0
    b = build_basis(deltas, 1)
    m = deltas.mean(axis=0)
    np.testing.assert_allclose(b.vectors[0], m / np.linalg.norm(m), atol=1e-6)


def test_build_basis_no_pruning_at_threshold_one():
    rng = np.random.default_rng(2)
    deltas = rng.standard_normal((40, 8))
    b = build_basis(deltas, 5, ortho_threshold=1.0)
    assert b.count == 5
    np.testing.assert_allclose(np.linalg.norm(b.vectors, axis=1), 1.0, atol=1e-6)


def test_build_basis_antipodal_pruned():
    rng = np.random.default_rng(3)
    axis = np.array([1.0, 0.0, 0.0])
    a = axis + 0.01 * rng.standard_normal((6, 3))
    deltas = np.vstack([a, -a])
    b = build_basis(deltas, 2, ortho_threshold=0.5)
    assert b.count == 1
    assert b.info["cluster_sizes"] == [6]


def test_build_basis_errors():
    with pytest.raises(ConfigError):
        build_basis(np.ones((3, 2)), 4)
    with pytest.raises(ConfigError):
        build_basis(np.ones((3, 2)), 1, ortho_threshold=0.0)


def test_basis_rejects_non_unit():
    with pytest.raises(DomainError):
        SteeringBasis(np.ones((2, 3)), layer=0)
    SteeringBasis(np.zeros((2, 3)), layer=0, check_unit=False)


def test_concentration_bound_values():
    b = concentration_bound(4096, 0.6)
    assert b.exponent == pytest.approx(-737.28, abs=0.01)
    assert b.log10_bound == pytest.approx(-737.28 / math.log(10))
    assert float(concentration_bound(2, 1.0).bound) == pytest.approx(math.exp(-1))
    b64 = concentration_bound(64, 0.6)
    assert b64.exponent == pytest.approx(BOUND_D64_EXPONENT)
    assert float(b64.bound) == pytest.approx(BOUND_D64_VALUE, rel=1e-2)
    with pytest.raises(DomainError):
        concentration_bound(0, 0.6)
