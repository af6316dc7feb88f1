import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from staticext.fields import (AngularGrid, Grid, RadialGrid, ScalarField, SymTensorField,
                              WeightedNormSpec, reflect, reflection_project, symmetric_harmonics,
                              transform_from_modes, transform_to_modes, weighted_norm)


@pytest.fixture(scope="module")
def grid():
    return Grid.make(16, 4)


def test_radial_grid_layout():
    rad = RadialGrid(12)
    assert rad.s[0] == 1.0 and rad.s[-1] == 0.0
    assert np.all(np.diff(rad.s) < 0)
    # spectral derivative is exact on polynomials
    u = rad.s**5 - 2 * rad.s**2
    assert np.allclose(rad.D @ u, 5 * rad.s**4 - 4 * rad.s, atol=1e-12)
    assert abs(rad.weights @ rad.s**3 - 0.25) < 1e-14


def test_radial_grid_minimum():
    with pytest.raises(ValueError):
        RadialGrid(7)


@pytest.mark.parametrize("alpha", [-0.5, 0.0, 0.5, 0.9])
def test_power_weights(alpha):
    rad = RadialGrid(16)
    W = rad.power_weights(alpha)
    for p in range(5):
        assert abs(W @ rad.s**p - 1.0 / (p + alpha + 1)) < 1e-12


def test_angular_quadrature_and_harmonic_norms():
    ang = AngularGrid(6)
    assert abs(ang.weights.sum() - 4 * math.pi) < 1e-12
    H = ang.harmonics
    # Schmidt semi-normalization: |Y_lm|^2 integrates to 4 pi / (2l + 1)
    assert np.allclose(H.norm, 4 * math.pi / (2 * H.l + 1), rtol=1e-12)
    G = (H.Y * ang.weights) @ H.Y.T
    assert np.allclose(G - np.diag(np.diag(G)), 0.0, atol=1e-12)


def test_degree_one_harmonics_are_coordinates():
    ang = AngularGrid(4)
    H = ang.harmonics
    n = ang.n
    assert np.allclose(H.Y[H.find(1, 1)], n[2], atol=1e-14)
    assert np.allclose(H.Y[H.find(1, 2)], n[0], atol=1e-14)
    assert np.allclose(H.Y[H.find(1, 3)], n[1], atol=1e-14)


def test_sphere_hessian_trace_is_laplacian():
    ang = AngularGrid(6)
    H = ang.harmonics
    tr = np.einsum("hiiw->hw", H.hess)
    assert np.allclose(tr, -(H.l * (H.l + 1))[:, None] * H.Y, atol=1e-10)


def test_scaled_derivatives_of_dipole(grid):
    # u = z / r^3 = s^2 cos(theta), so d_i u = s^3 (e_z - 3 n_z n_i)
    s = grid.radial.s[:, None]
    n = grid.angular.n
    u = s**2 * n[2]
    Q, Hs = grid.hess1(u)
    ez = np.array([0.0, 0.0, 1.0])[:, None, None]
    assert np.allclose(Q, s * (ez - 3 * n[2] * n[:, None, :]), atol=1e-11)
    lap = np.einsum("ii...->...", Hs)
    assert np.max(np.abs(lap)) < 1e-9


def test_weighted_norm_of_monopole():
    grid = Grid.make(24, 4)
    f = ScalarField(grid, np.tile(grid.radial.s[:, None], (1, grid.angular.n_omega)))
    for delta in (-0.75, -0.5):
        base = math.sqrt(4 * math.pi / (2 * delta + 2))
        assert abs(weighted_norm(f, WeightedNormSpec(0, delta)) - base) < 1e-10
        assert abs(weighted_norm(f, WeightedNormSpec(1, delta)) - 2 * base) < 1e-10
        expect = 2 * base + math.sqrt(6) * base
        assert abs(weighted_norm(f, WeightedNormSpec(2, delta)) - expect) < 1e-9


def test_weighted_norm_spec_validation():
    with pytest.raises(ValueError):
        WeightedNormSpec(2, -0.4)
    with pytest.raises(ValueError):
        WeightedNormSpec(2, -1.0)
    with pytest.raises(ValueError):
        WeightedNormSpec(3, -0.75)


def test_weighted_norm_rejects_non_decaying(grid):
    with pytest.raises(ValueError):
        weighted_norm(ScalarField(grid, np.ones(grid.shape)), WeightedNormSpec(0, -0.75))


def _random_tensor(grid, rng, lmax):
    ang = grid.angular
    H = ang.harmonics
    s = grid.radial.s[:, None]
    keep = H.l <= lmax
    T = np.zeros((3, 3) + grid.shape)
    for i in range(3):
        for j in range(i, 3):
            T[i, j] = T[j, i] = s * (rng.standard_normal(keep.sum()) @ H.Y[keep]) \
                + s**2 * (rng.standard_normal(keep.sum()) @ H.Y[keep])
    return T


def test_mode_round_trip(grid):
    rng = np.random.default_rng(3)
    f = SymTensorField.from_cartesian(grid, _random_tensor(grid, rng, 2))
    # Cartesian components of degree 2 need tensor modes up to degree 4
    spec = transform_to_modes(f, lmax=4)
    g = transform_from_modes(spec, grid)
    assert np.max(np.abs(g.values - f.values)) < 1e-11
    phi = ScalarField(grid, f.values[0])
    back = transform_from_modes(transform_to_modes(phi), grid)
    assert np.max(np.abs(back.values - phi.values)) < 1e-11


def test_symmetric_harmonics_are_invariant():
    grid = Grid.make(8, 6)
    ang = grid.angular
    H = ang.harmonics
    for L, M, parity in symmetric_harmonics(6):
        Y = H.Y[H.find(L, M)]
        for axis in range(3):
            Yr = Y[ang.reflection_index(axis)]
            # even modes carry invariant functions; odd ones are paired with the
            # orientation-reversing star, so the function itself flips sign
            sign = 1.0 if parity == "even" else -1.0
            assert np.allclose(Yr, sign * Y, atol=1e-13)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_reflection_projection_idempotent(seed):
    grid = Grid.make(8, 3)
    rng = np.random.default_rng(seed)
    f = SymTensorField.from_cartesian(grid, _random_tensor(grid, rng, 3))
    p = reflection_project(f)
    pp = reflection_project(p)
    assert np.max(np.abs(pp.values - p.values)) < 1e-13
    for axis in range(3):
        assert np.max(np.abs(reflect(p, axis).values - p.values)) < 1e-13


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), axis=st.integers(0, 2))
def test_reflection_is_an_involution(seed, axis):
    grid = Grid.make(8, 3)
    rng = np.random.default_rng(seed)
    f = SymTensorField.from_cartesian(grid, _random_tensor(grid, rng, 3))
    assert np.max(np.abs(reflect(reflect(f, axis), axis).values - f.values)) < 1e-13
