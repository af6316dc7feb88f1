"""Newton iteration for the gauge-fixed static system, verification and mass.

The unknowns are the reflection-symmetric mode profiles of (Theta, phi).
Each Newton step solves J dx = -F by GMRES.  Jacobian-vector products use
the complex step Im F(x + i h v) / h, which is exact to rounding because all
residual operations are analytic.  The flat Jacobian (block diagonal in the
modes) is the right preconditioner.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize
from scipy.sparse.linalg import LinearOperator, gmres

from .fields import (Grid, ScalarField, SymTensorField, WeightedNormSpec, scaled_l2,
                     weighted_norm)
from .geometry import (BoundaryData, MetricState, _gauge_scaled, _geometry, _hess_scaled,
                       _residual_arrays, _ricci_scaled, mean_curvature, reduction_residual)
from .linear import NonSymmetricError, apply_DPhi, symmetric_system


@dataclass(frozen=True)
class SolverConfig:
    lmax: int = 8
    n_r: int = 48
    delta: float = -0.5
    newton_tol: float = 1e-10
    lin_tol: float = 1e-8
    max_iter: int = 12
    damping: float = 1.0

    def __post_init__(self):
        WeightedNormSpec(0, self.delta)  # validates delta
        if self.newton_tol <= 0 or self.lin_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must lie in (0, 1]")

    def grid(self):
        return Grid.make(self.n_r, self.lmax)


@dataclass(eq=False)
class StaticSolution:
    state: MetricState
    bd: BoundaryData
    cfg: SolverConfig
    x: np.ndarray
    history: list = field(default_factory=list)
    converged: bool = False
    gmres_iterations: list = field(default_factory=list)

    @property
    def residual(self):
        return self.history[-1]["res"] if self.history else float("nan")

    @property
    def iterations(self):
        return len(self.history) - 1

    def boundary_achieved(self):
        """(sigma, h) induced by the solution on the unit sphere."""
        g = self.state.grid
        P = g.angular.P
        th = self.state.theta.cartesian()[:, :, 0]
        sig = np.einsum("iaw,abw,bjw->ijw", P, np.eye(3)[:, :, None] + th, P)
        return sig, mean_curvature(self.state)


def residual_norm(basis, x, bd, delta):
    """(max, per-slot) residual norms of the unknown vector ``x``, as logged by the Newton loop."""
    theta, phi = basis.to_fields(x)
    F = basis.equations(_residual_arrays(basis.grid, theta, phi, bd.sigma, bd.h))
    slots = basis.slot_norms(F, delta)
    return float(np.max(slots)), slots


class _Problem:
    def __init__(self, bd, cfg):
        self.grid = bd.grid
        self.bd = bd
        self.cfg = cfg
        self.system = symmetric_system(self.grid, "DPhi")
        self.basis = self.system.basis

    def residual_vector(self, x):
        theta, phi = self.basis.to_fields(x)
        return _residual_arrays(self.grid, theta, phi, self.bd.sigma, self.bd.h)

    def F(self, x):
        return self.basis.equations(self.residual_vector(x))

    def jvp(self, x, v):
        nv = np.linalg.norm(v)
        if nv == 0:
            return np.zeros_like(v)
        h = 1e-20 / nv
        return self.F(x + 1j * h * v).imag / h

    def norms(self, F):
        slots = self.basis.slot_norms(F, self.cfg.delta)
        return float(np.max(slots)), slots

    def omega_norm(self, x):
        theta, _ = self.basis.to_fields(x)
        G = _geometry(self.grid, theta)
        w, dw = _gauge_scaled(self.grid, theta, G)
        return scaled_l2(self.grid, w, self.cfg.delta) + scaled_l2(self.grid, dw, self.cfg.delta)


def newton_solve(bd, cfg=SolverConfig(), log=None):
    """Solve the gauge-fixed static system for boundary data ``bd``.

    Starts from the flat state and always takes at least one step.  ``log``
    is an optional callable receiving each history record.
    """
    g = bd.grid
    if g.radial.n_r != cfg.n_r or g.lmax != cfg.lmax:
        raise ValueError("boundary data grid does not match the configuration")
    if not bd.is_symmetric():
        raise NonSymmetricError("boundary data is not reflection symmetric")
    prob = _Problem(bd, cfg)
    x = np.zeros(prob.basis.size)
    F = prob.F(x)
    res, slots = prob.norms(F)
    history = [dict(iter=0, res=res, slots=slots, omega=0.0)]
    if log:
        log(history[-1])
    sol = StaticSolution(None, bd, cfg, x, history)
    for k in range(1, cfg.max_iter + 1):
        if res <= cfg.newton_tol:
            dx, its = np.zeros_like(x), 0
        else:
            dx, its = _newton_step(prob, x, F, cfg)
        sol.gmres_iterations.append(its)
        x_new = x + cfg.damping * dx
        F_new = prob.F(x_new)
        res_new, slots = prob.norms(F_new)
        if not np.isfinite(res_new) or (res_new > 10 * res and cfg.damping == 1.0):
            # one fallback: halve the step
            x_new = x + 0.5 * dx
            F_new = prob.F(x_new)
            res_new, slots = prob.norms(F_new)
        x, F, res = x_new, F_new, res_new
        history.append(dict(iter=k, res=res, slots=slots, omega=prob.omega_norm(x)))
        if log:
            log(history[-1])
        if not np.isfinite(res):
            break
        if res <= cfg.newton_tol:
            sol.converged = True
            break
    theta, phi = prob.basis.to_fields(x)
    sol.state = MetricState.from_cartesian(g, theta, phi)
    sol.x = x
    return sol


def _newton_step(prob, x, F, cfg):
    n = F.size
    nF = np.linalg.norm(F)
    if nF == 0.0:
        return np.zeros_like(F), 0
    P = prob.system
    A = LinearOperator((n, n), matvec=lambda y: prob.jvp(x, P.solve(y)), dtype=float)
    count = [0]

    def cb(_):
        count[0] += 1

    y, info = gmres(A, -F, rtol=cfg.lin_tol, atol=0.0, restart=60, maxiter=4,
                    callback=cb, callback_type="pr_norm")
    return P.solve(y), count[0]


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


@dataclass
class VerifyReport:
    static_defect: float
    laplace_f: float
    scalar_curvature: float
    omega: float
    gauge_equation: float
    identity_defect: float
    theta_norm: float
    threshold: float

    @property
    def passed(self):
        # the omega equation needs third derivatives and is reported only
        vals = [self.static_defect, self.laplace_f, self.scalar_curvature, self.identity_defect]
        return all(v <= self.threshold for v in vals) and \
            self.omega <= self.threshold * (1.0 + self.theta_norm)

    def as_dict(self):
        return {k: getattr(self, k) for k in ("static_defect", "laplace_f", "scalar_curvature",
                                              "omega", "gauge_equation", "identity_defect",
                                              "theta_norm", "threshold")}


def verify_static(sol, threshold=None):
    """Weighted norms of the unmodified static equations and the gauge identities.

    The default threshold is 10 * newton_tol; omega is compared against
    threshold * (1 + |Theta|).  All norms are taken over every grid node,
    so they include truncation error away from the collocation points.
    """
    state = sol.state
    grid = state.grid
    delta = sol.cfg.delta
    theta = state.theta.cartesian()
    phi = state.phi.values
    G = _geometry(grid, theta)
    ric = _ricci_scaled(G)
    _, hess_f = _hess_scaled(grid, G, phi)
    f = 1.0 + phi
    static = f * ric - hess_f
    lap = np.einsum("ij...,ij...->...", G.ginv, hess_f)
    R = np.einsum("ij...,ij...->...", G.ginv, ric)
    red = reduction_residual(state, delta)
    spec = WeightedNormSpec(2, delta)
    tnorm = weighted_norm(state.theta, spec)
    thr = 10 * sol.cfg.newton_tol if threshold is None else threshold
    return VerifyReport(scaled_l2(grid, static, delta), scaled_l2(grid, lap, delta),
                        scaled_l2(grid, R, delta), red.omega_norm, red.gauge_equation,
                        red.scalar_identity, tnorm, thr)


# ---------------------------------------------------------------------------
# ADM mass
# ---------------------------------------------------------------------------


@dataclass
class MassEstimate:
    mode: float
    flux: float
    flux_alt: float = None

    @property
    def value(self):
        return self.flux

    @property
    def spread(self):
        """Disagreement of the two extractions, or the flux self-consistency if larger."""
        d = abs(self.mode - self.flux)
        if self.flux_alt is not None:
            d = max(d, abs(self.flux - self.flux_alt))
        return d

    def relative_spread(self):
        return self.spread / max(abs(self.flux), abs(self.mode), 1e-12)


def adm_mass(state):
    """ADM mass from the r^-1 coefficient of the L = 0 part of Theta_nn, and from the flux integral.

    The flux (1/16 pi) oint (d_j g_ij - d_i g_jj) n_i dA is evaluated on the
    outermost finite-radius shells and extrapolated linearly in 1/r from the
    two outermost; the same extrapolation from the next pair inward gives
    ``flux_alt``, whose distance from ``flux`` estimates the extrapolation error.
    """
    if isinstance(state, StaticSolution):
        state = state.state
    grid = state.grid
    ang = grid.angular
    rad = grid.radial
    n = ang.n
    theta = state.theta.cartesian()
    tnn = np.einsum("iw,jw,ijrw->rw", n, n, theta)
    a00 = ang.integrate(tnn) / (4 * np.pi)
    m1 = 0.5 * float(rad.D[-1] @ a00)
    Q = grid.grad1(theta.reshape((9,) + grid.shape)).reshape((3, 3, 3) + grid.shape)
    # Q[k, i, j] = d_k Theta_ij / s^2, and r^2 dA = dOmega
    integrand = (np.einsum("jijrw,iw->rw", Q, n) - np.einsum("ijjrw,iw->rw", Q, n))
    flux = ang.integrate(integrand) / (16 * np.pi)
    s = rad.s

    def extrap(a, b):
        return float((s[b] * flux[a] - s[a] * flux[b]) / (s[b] - s[a]))

    return MassEstimate(m1, extrap(-2, -3), extrap(-3, -4))


# ---------------------------------------------------------------------------
# Schwarzschild data and the spherically symmetric oracle
# ---------------------------------------------------------------------------


def schwarzschild_state(grid, m):
    """Isotropic Schwarzschild: Theta = (u^4 - 1) delta, f = (1 - m s / 2) / (1 + m s / 2)."""
    s = grid.radial.s[:, None]
    u = 1.0 + 0.5 * m * s
    theta = (u**4 - 1.0) * np.ones(grid.shape)
    theta = theta[None, None] * np.eye(3)[:, :, None, None]
    phi = (1.0 - 0.5 * m * s) / u - 1.0 + np.zeros(grid.shape)
    return MetricState.from_cartesian(grid, theta, phi)


def schwarzschild_boundary_data(m, grid=None):
    """Boundary data induced on the unit sphere by isotropic Schwarzschild of mass m."""
    if abs(m) > 0.3:
        raise ValueError("|m| must be at most 0.3")
    grid = Grid.make() if grid is None else grid
    st = schwarzschild_state(grid, m)
    sigma = (1.0 + 0.5 * m) ** 4 * grid.angular.P
    return BoundaryData(grid, sigma, mean_curvature(st))


@dataclass
class OracleResult:
    mass: float
    s: np.ndarray
    u: np.ndarray
    f: np.ndarray
    ode_residual: float


def shooting_oracle(bd, n_out=65):
    """Spherically symmetric static vacuum extension by shooting.

    In isotropic form g = u^4 delta with u harmonic, so u = u_inf + c s.
    The sphere data fix u(1) and u'(1).  The lapse solves
    (u^2 f_s)_s = 0 (with s = 1/r) and the tangential static equation at
    r = 1 fixes f'(1) / f(1); f(1) is found by shooting so that f = 1 at
    infinity.  The mass is read off after rescaling u to 1 at infinity.
    """
    ang = bd.grid.angular
    sig_c = np.einsum("ijw,ijw->w", bd.sigma, ang.P) / 2.0
    h = np.asarray(bd.h)
    if np.ptp(sig_c) > 1e-10 * abs(sig_c.mean()) or np.ptp(h) > 1e-10 * max(1.0, abs(h.mean())):
        raise ValueError("boundary data is not spherically symmetric")
    sc, hc = float(sig_c.mean()), float(h.mean())
    u1 = sc**0.25
    ur1 = (hc * u1**2 - 2.0) * u1 / 4.0        # h = u^-2 (2 + 4 u_r / u) at r = 1
    c = -ur1                                     # u_r = -s^2 u_s
    uinf = u1 - c
    if uinf <= 0:
        raise ValueError("data too far from round: no asymptotically flat end")
    # tangential static equation at r = 1 with w = 2 ln u
    wr = 2 * ur1 / u1
    wrr = 2 * (0.0 - ur1**2 / u1**2) + 2 * (2 * c) / u1   # u_rr = 2 c s^3 -> 2c at r = 1
    ric_t = -wr - (wrr + 2 * wr + wr**2)
    ratio = ric_t / (1.0 + wr)                   # f'(1) / f(1), derivative in r

    def rhs(s, y):
        u = uinf + c * s
        return [y[1], -2 * c * y[1] / u]

    def shoot(f1):
        fs1 = -ratio * f1                        # f_s = -r^2 f_r
        sol = integrate.solve_ivp(rhs, (1.0, 0.0), [f1, fs1], method="DOP853",
                                  rtol=1e-13, atol=1e-15, dense_output=True)
        return sol

    def miss(f1):
        return shoot(f1).y[0, -1] - 1.0

    lo, hi = 0.05, 2.0
    if miss(lo) * miss(hi) > 0:
        raise RuntimeError("shooting failed to bracket the lapse")
    f1 = optimize.brentq(miss, lo, hi, xtol=1e-15, rtol=1e-15)
    sol = shoot(f1)
    s = np.linspace(0.0, 1.0, n_out)
    y = sol.sol(s)
    u = uinf + c * s
    # first integral: u^2 f_s is constant for the radial Laplacian
    K = u**2 * y[1]
    resid = float(np.max(np.abs(K - K[0])))
    mass = 2.0 * c * uinf
    return OracleResult(mass, s, u / uinf, y[0], resid)


# ---------------------------------------------------------------------------
# finite-difference probe of the linearization
# ---------------------------------------------------------------------------

FD_STEPS = (1e-2, 1e-3, 1e-4)


def random_perturbation(grid, seed, lmax=4, with_theta=True):
    """Band-limited decaying (Theta, phi) with random harmonic content up to ``lmax``."""
    rng = np.random.default_rng(seed)
    ang = grid.angular
    H = ang.harmonics
    s = grid.radial.s[:, None]
    keep = H.l <= min(lmax, grid.lmax)
    Y = H.Y[keep]

    def scalar():
        c = rng.standard_normal((3, Y.shape[0]))
        prof = s * (c[0] @ Y) + s**2 * (c[1] @ Y) + s**3 * (c[2] @ Y)
        return 0.3 * prof

    theta = np.zeros((3, 3) + grid.shape)
    if with_theta:
        for i in range(3):
            for j in range(i, 3):
                theta[i, j] = theta[j, i] = scalar()
    return theta, scalar()


@dataclass
class ProbeReport:
    steps: tuple
    errors: np.ndarray        # (n_steps, 5)
    scale: np.ndarray         # slot norms of the linearization
    orders: np.ndarray        # fitted orders, nan for slots at rounding level

    def exact_slots(self, rtol=1e-9):
        return np.all(self.errors <= rtol * (1.0 + self.scale), axis=0)

    @property
    def passed(self):
        ok = self.exact_slots() | (self.orders >= 1.8)
        return bool(np.all(ok))


def linearization_probe(grid, seed=0, steps=FD_STEPS, with_theta=True):
    """Central differences of the residual map at the flat state against D'Phi, per slot."""
    theta, phi = random_perturbation(grid, seed, with_theta=with_theta)
    bd = BoundaryData.round(grid)
    lin = apply_DPhi(SymTensorField.from_cartesian(grid, theta), ScalarField(grid, phi))
    scale = lin.slot_norms()
    errs = []
    for t in steps:
        rp = _residual_arrays(grid, t * theta, t * phi, bd.sigma, bd.h)
        rm = _residual_arrays(grid, -t * theta, -t * phi, bd.sigma, bd.h)
        fd = (rp - rm).scale(1.0 / (2 * t))
        errs.append((fd - lin).slot_norms())
    errs = np.array(errs)
    rep = ProbeReport(tuple(steps), errs, scale, np.full(5, np.nan))
    if len(steps) > 1:
        exact = rep.exact_slots()
        lt = np.log(np.asarray(steps))
        for k in range(5):
            if not exact[k]:
                rep.orders[k] = np.polyfit(lt, np.log(np.maximum(errs[:, k], 1e-300)), 1)[0]
    return rep
