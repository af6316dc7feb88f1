import numpy as np
import pytest

from staticext.fields import Grid
from staticext.geometry import (BoundaryData, MetricState, ResidualVector, hessian, inverse3,
                                mean_curvature, reduction_residual, ricci, scalar_curvature,
                                static_residual)
from staticext.solver import schwarzschild_state


@pytest.fixture(scope="module")
def grid():
    return Grid.make(32, 4)


def test_inverse3():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 3, 5)) + 3 * np.eye(3)[:, :, None]
    B = inverse3(A)
    assert np.allclose(np.einsum("ijw,jkw->ikw", A, B), np.eye(3)[:, :, None], atol=1e-13)


def test_flat_state_is_a_fixed_point(grid):
    res = static_residual(MetricState.flat(grid), BoundaryData.round(grid))
    assert np.max(res.slot_norms()) < 1e-13


def test_mean_curvature_of_unit_sphere(grid):
    assert np.max(np.abs(mean_curvature(MetricState.flat(grid)) - 2.0)) < 1e-14


@pytest.mark.parametrize("m", [0.05, 0.2])
def test_isotropic_schwarzschild_is_static(grid, m):
    st = schwarzschild_state(grid, m)
    f = 1.0 + st.phi.values
    ric = ricci(st).cartesian()
    hess = hessian(st).cartesian()
    assert np.max(np.abs(f * ric - hess)) < 1e-9
    assert np.max(np.abs(scalar_curvature(st).values)) < 1e-9


@pytest.mark.parametrize("m", [0.05, 0.2, -0.1])
def test_schwarzschild_mean_curvature_closed_form(grid, m):
    # for u^4 delta: H = u^-2 (2 + 4 u_r / u) at r = 1 with u = 1 + m / 2
    u = 1.0 + 0.5 * m
    expect = (2.0 - 2.0 * m / u) / u**2
    assert np.max(np.abs(mean_curvature(schwarzschild_state(grid, m)) - expect)) < 1e-12


def test_conformal_scalar_curvature(grid):
    # R(u^4 delta) = -8 u^-5 Delta u, and Delta r^-3 = 6 r^-5
    eps = 0.1
    s = grid.radial.s[:, None]
    u = 1.0 + eps * s**3 + 0 * grid.angular.n[0]
    theta = (u**4 - 1.0)[None, None] * np.eye(3)[:, :, None, None]
    st = MetricState.from_cartesian(grid, theta, np.zeros(grid.shape))
    R = scalar_curvature(st).values
    expect = -8.0 * u**-5 * eps * 6.0 * s**5
    # second spectral derivatives at n_r = 32 carry ~1e-10 rounding error
    assert np.max(np.abs(R - expect)) < 1e-9


def test_residual_vector_algebra(grid):
    a = static_residual(schwarzschild_state(grid, 0.1), BoundaryData.round(grid))
    z = a - a
    assert np.max(z.slot_norms()) == 0.0
    b = a.scale(2.0) - a
    assert np.max((b - a).slot_norms()) == 0.0
    zero = ResidualVector.zeros(grid)
    assert np.max((a + zero - a).slot_norms()) == 0.0


def test_boundary_data_reflections(grid):
    sym = BoundaryData.from_modes(grid, [(2, 1, "even", "c", 1e-3), (4, 4, "even", "d", 2e-3)],
                                  [(2, 4, 1e-3)])
    assert sym.is_symmetric()
    assert max(sym.reflection_defects()) < 1e-14
    # cos(phi) P_2^1 ~ x z flips under x -> -x and z -> -z
    skew = BoundaryData.from_modes(grid, [(2, 2, "even", "c", 1e-3)])
    d = skew.reflection_defects()
    assert not skew.is_symmetric()
    assert d[0] > 1e-4 and d[1] < 1e-14 and d[2] > 1e-4


def test_boundary_modes_validation(grid):
    with pytest.raises(ValueError):
        BoundaryData.from_modes(grid, [(1, 1, "even", "c", 1.0)])
    with pytest.raises(ValueError):
        BoundaryData.from_modes(grid, [(3, 2, "odd", "d", 1.0)])
    with pytest.raises(ValueError):
        BoundaryData.from_modes(grid, [(9, 1, "even", "d", 1.0)])
    assert np.allclose(BoundaryData.from_modes(grid).h, 2.0)


def test_reduction_defects_vanish_on_flat_state(grid):
    red = reduction_residual(MetricState.flat(grid), -0.75)
    assert red.omega_norm == 0.0
    assert red.scalar_identity == 0.0
    assert red.gauge_equation == 0.0


def test_isotropic_schwarzschild_is_not_in_the_gauge(grid):
    # omega = -grad(u^4) / 2 for Theta = (u^4 - 1) delta, which is O(m / r^2)
    red = reduction_residual(schwarzschild_state(grid, 0.1), -0.75)
    assert red.omega_norm > 1e-2
