"""Acceptance criteria at the production resolution n_r = 48, lmax = 8.

Each test prints one PASS/FAIL line with the measured quantities.
"""

import time

import numpy as np
import pytest

from staticext.fields import (RadialGrid, ScalarField, SymTensorField, WeightedNormSpec,
                              weighted_norm)
from staticext.geometry import BoundaryData
from staticext.linear import (NonSymmetricError, adjoint_kernel, adjoint_system_defects, apply_T,
                              cokernel_basis, l1_deviation, pair_residual, solve_linearized)
from staticext.solver import (SolverConfig, adm_mass, linearization_probe, newton_solve,
                              random_perturbation, schwarzschild_boundary_data, shooting_oracle,
                              verify_static)

CFG = SolverConfig(lmax=8, n_r=48)
MASSES = (0.05, 0.1, 0.2)
SOLUTIONS = {}


@pytest.fixture(scope="module")
def grid():
    return CFG.grid()


def _report(capsys, k, ok, msg):
    with capsys.disabled():
        print(f"\ncriterion {k}: {'PASS' if ok else 'FAIL'} {msg}")


def _fields(grid, seed):
    theta, phi = random_perturbation(grid, seed)
    return SymTensorField.from_cartesian(grid, theta), ScalarField(grid, phi)


def _solve(key, bd):
    if key not in SOLUTIONS:
        t0 = time.perf_counter()
        sol = newton_solve(bd, CFG)
        SOLUTIONS[key] = (sol, time.perf_counter() - t0)
    return SOLUTIONS[key]


def test_criterion_1_linearization_fidelity(grid, capsys):
    t0 = time.perf_counter()
    reps = [linearization_probe(grid, seed) for seed in range(5)]
    dt = time.perf_counter() - t0
    worst = min(np.nanmin(np.where(r.exact_slots(), np.inf, r.orders)) for r in reps)
    exact = sorted({int(k) + 1 for r in reps for k in np.flatnonzero(r.exact_slots())})
    ok = all(r.passed for r in reps) and dt <= 60
    _report(capsys, 1, ok, f"min order {worst:.3f}, rounding-level slots {exact}, {dt:.1f} s")
    assert ok


def test_criterion_2_adjoint_ode_regression(capsys):
    rad = RadialGrid(CFG.n_r)
    t0 = time.perf_counter()
    dims, devs, gaps = {}, {}, []
    for L in range(7):
        for parity in ("even", "odd"):
            k = adjoint_kernel(L, parity, rad)
            dims[L, parity] = k.dimension
            gaps.append(k.gap)
            if L == 1:
                devs[parity] = l1_deviation(k, rad)
    dt = time.perf_counter() - t0
    expect = {key: int(key[0] == 1) for key in dims}
    ok = dims == expect and max(devs.values()) <= 1e-8 and dt <= 30
    _report(capsys, 2, ok, f"dims {'match' if dims == expect else dims}, L=1 deviation even "
            f"{devs['even']:.2e} odd {devs['odd']:.2e}, min gap {min(gaps):.1e}, {dt:.1f} s")
    assert ok


def test_criterion_3_cokernel_orthogonality(grid, capsys):
    cks = cokernel_basis(grid)
    spec = WeightedNormSpec(2, CFG.delta)
    worst = 0.0
    for seed in range(20):
        th, ph = _fields(grid, 100 + seed)
        size = weighted_norm(th, spec) + weighted_norm(ph, spec)
        res = apply_T(th, ph)
        for ck in cks:
            worst = max(worst, abs(pair_residual(res, ck)) / (size * ck.norm()))
    defect = max(max(adjoint_system_defects(ck).values()) for ck in cks)
    ok = worst <= 1e-8 and defect <= 1e-9
    _report(capsys, 3, ok, f"max normalized pairing {worst:.2e}, max adjoint-system defect {defect:.2e}")
    assert ok


def _random_rhs(grid, seed):
    """apply_T of random fields plus random boundary content in slots 3 to 5."""
    rng = np.random.default_rng(seed)
    th, ph = _fields(grid, 200 + seed)
    rhs = apply_T(th, ph)
    ang = grid.angular
    H = ang.harmonics
    Y = H.Y[H.l <= 4]

    def fn():
        return 0.1 * rng.standard_normal(Y.shape[0]) @ Y

    rhs.gauge = rhs.gauge + np.array([fn() for _ in range(3)])
    m = np.array([[fn() for _ in range(3)] for _ in range(3)])
    m = 0.5 * (m + np.swapaxes(m, 0, 1))
    rhs.metric = rhs.metric + np.einsum("iaw,abw,bjw->ijw", ang.P, m, ang.P)
    rhs.meancurv = rhs.meancurv + fn()
    return rhs


def test_criterion_4_symmetric_surjectivity(grid, capsys):
    rels = []
    for seed in range(20):
        _, _, rel = solve_linearized(_random_rhs(grid, seed).symmetrized())
        rels.append(rel)
    # the same kind of right-hand side without the projection
    skew = _random_rhs(grid, 99)
    pairing = max(abs(pair_residual(skew, ck)) for ck in cokernel_basis(grid))
    with pytest.raises(NonSymmetricError):
        solve_linearized(skew)
    ok = max(rels) <= 1e-8 and pairing >= 1e-3
    _report(capsys, 4, ok, f"max relative residual {max(rels):.2e} over 20 rhs, "
            f"non-symmetric pairing {pairing:.2e}")
    assert ok


def test_criterion_5_flat_fixed_point(grid, capsys):
    sol, dt = _solve("round", BoundaryData.round(grid))
    flat = not np.any(sol.x)
    ok = sol.converged and sol.iterations == 1 and sol.residual <= 1e-13 and flat
    _report(capsys, 5, ok, f"{sol.iterations} step, residual {sol.residual:.2e}, "
            f"exact flat state {flat}, {dt:.1f} s")
    assert ok


@pytest.mark.parametrize("m", MASSES)
def test_criterion_6_schwarzschild_recovery(grid, capsys, m):
    bd = schwarzschild_boundary_data(m, grid)
    sol, dt = _solve(("schw", m), bd)
    oracle = shooting_oracle(bd)
    mass = adm_mass(sol)
    rep = verify_static(sol, threshold=1e-8)
    checks = [sol.converged, sol.iterations <= 8, sol.residual <= 1e-10,
              abs(mass.value - oracle.mass) <= 1e-4, rep.static_defect <= 1e-8,
              rep.scalar_curvature <= 1e-8, rep.omega <= 1e-8, dt <= 300]
    ok = all(checks)
    _report(capsys, 6, ok, f"m={m}: {sol.iterations} iterations, residual {sol.residual:.2e}, "
            f"mass {mass.value:.10f} (oracle {oracle.mass:.10f}, spread {mass.spread:.1e}), "
            f"static {rep.static_defect:.2e}, R {rep.scalar_curvature:.2e}, "
            f"omega {rep.omega:.2e}, {dt:.1f} s")
    assert ok


def _l2_bd(grid):
    return BoundaryData.from_modes(grid, [(2, 1, "even", "c", 1e-3), (2, 4, "even", "d", 1e-3)])


def test_criterion_7_non_spherical_extension(grid, capsys):
    bd = _l2_bd(grid)
    assert bd.is_symmetric()
    sol, dt = _solve("l2", bd)
    sig, h = sol.boundary_achieved()
    match = max(np.max(np.abs(sig - bd.sigma)), np.max(np.abs(h - bd.h)))
    rep = verify_static(sol, threshold=1e-8)
    ok = sol.converged and match <= 1e-9 and rep.passed
    _report(capsys, 7, ok, f"{sol.iterations} iterations, residual {sol.residual:.2e}, boundary "
            f"match {match:.2e}, static {rep.static_defect:.2e}, R {rep.scalar_curvature:.2e}, "
            f"omega {rep.omega:.2e}, {dt:.1f} s")
    assert ok


def test_criterion_8_reduction_shadow(grid, capsys):
    cases = [("round", BoundaryData.round(grid))]
    cases += [(("schw", m), schwarzschild_boundary_data(m, grid)) for m in MASSES]
    cases += [("l2", _l2_bd(grid))]
    worst_w, worst_id = 0.0, 0.0
    for key, bd in cases:
        sol, _ = _solve(key, bd)
        rep = verify_static(sol)
        worst_w = max(worst_w, rep.omega / (1.0 + rep.theta_norm))
        worst_id = max(worst_id, rep.identity_defect)
    ok = worst_w <= 1e-8 and worst_id <= 1e-8
    _report(capsys, 8, ok, f"max omega / (1 + |Theta|) {worst_w:.2e}, "
            f"max identity defect {worst_id:.2e} over {len(cases)} solutions")
    assert ok
