"""Curvature, gauge and boundary operators for metrics g = delta + Theta.

Everything is evaluated on Cartesian component arrays.  Interior quantities
come out divided by the power of s that their decay guarantees (Ricci and
Hessians by s^3, the gauge one-form by s^2), so nothing is divided by s
near infinity.  All operations are analytic in the field values, which keeps
complex-step differentiation exact.
"""

from dataclasses import dataclass

import numpy as np

from .fields import (Grid, ScalarField, SymTensorField, OneFormField, scaled_l2,
                     symmetrize_cart, tensor_pattern, _reflect_cart)

_I3 = np.eye(3)


@dataclass(frozen=True, eq=False)
class MetricState:
    """Perturbation Theta of the flat metric and the lapse perturbation phi (f = 1 + phi)."""

    theta: SymTensorField
    phi: ScalarField

    @property
    def grid(self):
        return self.theta.grid

    @classmethod
    def flat(cls, grid):
        return cls(SymTensorField(grid, np.zeros((6,) + grid.shape)),
                   ScalarField(grid, np.zeros(grid.shape)))

    @classmethod
    def from_cartesian(cls, grid, theta_c, phi):
        return cls(SymTensorField.from_cartesian(grid, theta_c), ScalarField(grid, phi))


@dataclass(frozen=True, eq=False)
class BoundaryData:
    """Target induced metric sigma (Cartesian, tangential) and mean curvature h on the unit sphere."""

    grid: Grid
    sigma: np.ndarray
    h: np.ndarray

    @classmethod
    def round(cls, grid):
        ang = grid.angular
        return cls(grid, ang.P.copy(), np.full(ang.n_omega, 2.0))

    @classmethod
    def from_modes(cls, grid, sigma_modes=(), h_modes=()):
        """Build data from harmonic coefficients.

        ``sigma_modes`` holds (L, M, parity, part, value) with part "c" for the
        Hessian term and "d" for the trace term of sigma - g_S2; odd parity
        only has "c".  ``h_modes`` holds (L, M, value) for h - 2.
        """
        ang = grid.angular
        H = ang.harmonics
        sig = ang.P.copy()
        for L, M, parity, part, val in sigma_modes:
            if L > grid.lmax:
                raise ValueError(f"sigma mode L={L} exceeds lmax")
            if part not in ("c", "d") or (parity == "odd" and part == "d"):
                raise ValueError(f"invalid sigma component {parity} {part}")
            if part == "c" and L < 2:
                raise ValueError("Hessian part of sigma needs L >= 2")
            sig = sig + val * tensor_pattern(ang, H.find(L, M), parity, part)
        h = np.full(ang.n_omega, 2.0)
        for L, M, val in h_modes:
            if L > grid.lmax:
                raise ValueError(f"h mode L={L} exceeds lmax")
            h = h + val * H.Y[H.find(L, M)]
        return cls(grid, sig, h)

    def reflection_defects(self):
        """Max deviation of (sigma, h) under x_k -> -x_k for k = 0, 1, 2."""
        g = self.grid
        out = []
        for axis in range(3):
            ds = np.max(np.abs(_reflect_cart(g, self.sigma, axis, 2) - self.sigma))
            dh = np.max(np.abs(_reflect_cart(g, self.h, axis, 0) - self.h))
            out.append(float(max(ds, dh)))
        return out

    def is_symmetric(self, tol=1e-12):
        g = self.grid
        ds = np.max(np.abs(symmetrize_cart(g, self.sigma, 2) - self.sigma))
        dh = np.max(np.abs(symmetrize_cart(g, self.h, 0) - self.h))
        return max(ds, dh) <= tol * max(1.0, np.max(np.abs(self.sigma)))


@dataclass(eq=False)
class ResidualVector:
    """Five-slot residual.

    Interior slots are stored multiplied by r^2 (``psi`` Cartesian tensor,
    ``chi`` scalar); boundary slots are the gauge one-form, the tangential
    metric defect and the mean-curvature defect on the unit sphere.
    """

    grid: Grid
    psi: np.ndarray
    chi: np.ndarray
    gauge: np.ndarray
    metric: np.ndarray
    meancurv: np.ndarray

    @property
    def interior_tensor(self):
        s2 = self.grid.radial.s[:, None] ** 2
        return SymTensorField.from_cartesian(self.grid, s2 * self.psi)

    @property
    def interior_scalar(self):
        s2 = self.grid.radial.s[:, None] ** 2
        return ScalarField(self.grid, s2 * self.chi)

    @property
    def bdry_gauge(self):
        return self.gauge

    @property
    def bdry_metric(self):
        return self.metric

    @property
    def bdry_meancurv(self):
        return self.meancurv

    def _map(self, fn, other=None):
        names = ("psi", "chi", "gauge", "metric", "meancurv")
        if other is None:
            vals = [fn(getattr(self, k)) for k in names]
        else:
            vals = [fn(getattr(self, k), getattr(other, k)) for k in names]
        return ResidualVector(self.grid, *vals)

    def __add__(self, o):
        return self._map(np.add, o)

    def __sub__(self, o):
        return self._map(np.subtract, o)

    def scale(self, c):
        return self._map(lambda a: c * a)

    def symmetrized(self):
        g = self.grid
        return ResidualVector(g, symmetrize_cart(g, self.psi, 2), symmetrize_cart(g, self.chi, 0),
                              symmetrize_cart(g, self.gauge, 1), symmetrize_cart(g, self.metric, 2),
                              symmetrize_cart(g, self.meancurv, 0))

    @classmethod
    def zeros(cls, grid):
        nr, no = grid.shape
        return cls(grid, np.zeros((3, 3, nr, no)), np.zeros((nr, no)), np.zeros((3, no)),
                   np.zeros((3, 3, no)), np.zeros(no))

    def slot_norms(self, interior_nodes=None):
        """L2 norms of the five slots: interior slots over (s, angle), boundary slots over the sphere.

        ``interior_nodes`` restricts the interior quadrature to a subset of radial nodes.
        """
        g = self.grid
        w = g.radial.weights.copy()
        if interior_nodes is not None:
            mask = np.zeros_like(w)
            mask[interior_nodes] = 1.0
            w = w * mask
        ang = g.angular

        def vol(a):
            dens = np.abs(a) ** 2
            dens = dens.reshape((-1,) + g.shape).sum(axis=0)
            return np.sqrt(max(float(w @ ang.integrate(dens)), 0.0))

        def surf(a):
            dens = (np.abs(a) ** 2).reshape((-1, ang.n_omega)).sum(axis=0)
            return np.sqrt(float(ang.integrate(dens)))

        return np.array([vol(self.psi), vol(self.chi), surf(self.gauge), surf(self.metric),
                         surf(self.meancurv)])

    def norm(self, interior_nodes=None):
        return float(np.max(self.slot_norms(interior_nodes)))


# ---------------------------------------------------------------------------
# pointwise algebra
# ---------------------------------------------------------------------------

def inverse3(g):
    """Cofactor inverse of a field of 3x3 matrices with the matrix axes first."""
    c = np.empty_like(g)
    c[0, 0] = g[1, 1] * g[2, 2] - g[1, 2] * g[2, 1]
    c[0, 1] = g[0, 2] * g[2, 1] - g[0, 1] * g[2, 2]
    c[0, 2] = g[0, 1] * g[1, 2] - g[0, 2] * g[1, 1]
    c[1, 0] = g[1, 2] * g[2, 0] - g[1, 0] * g[2, 2]
    c[1, 1] = g[0, 0] * g[2, 2] - g[0, 2] * g[2, 0]
    c[1, 2] = g[0, 2] * g[1, 0] - g[0, 0] * g[1, 2]
    c[2, 0] = g[1, 0] * g[2, 1] - g[1, 1] * g[2, 0]
    c[2, 1] = g[0, 1] * g[2, 0] - g[0, 0] * g[2, 1]
    c[2, 2] = g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
    det = g[0, 0] * c[0, 0] + g[0, 1] * c[1, 0] + g[0, 2] * c[2, 0]
    return c / det


def _unique_derivs(grid, theta_c):
    """Scaled first and second derivatives of the six independent components.

    Returns dg[k, i, j] = d_k Theta_ij / s^2 and ddg[l, k, i, j] = d_l d_k Theta_ij / s^3.
    """
    idx = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
    u = np.stack([theta_c[a, b] for a, b in idx])
    Q, H = grid.hess1(u)
    dg = np.empty((3, 3, 3) + u.shape[1:], dtype=Q.dtype)
    ddg = np.empty((3, 3, 3, 3) + u.shape[1:], dtype=H.dtype)
    for m, (a, b) in enumerate(idx):
        dg[:, a, b] = dg[:, b, a] = Q[:, m]
        hm = 0.5 * (H[:, :, m] + np.swapaxes(H[:, :, m], 0, 1))
        ddg[:, :, a, b] = ddg[:, :, b, a] = hm
    return dg, ddg


@dataclass(eq=False)
class _Geom:
    s: np.ndarray       # (nr, 1) broadcastable
    ginv: np.ndarray
    dg: np.ndarray      # d g / s^2
    ddg: np.ndarray     # d d g / s^3
    gam: np.ndarray     # Gamma^k_ij / s^2
    gam_low: np.ndarray


def _geometry(grid, theta_c):
    g = _I3[:, :, None, None] + theta_c
    ginv = inverse3(g)
    dg, ddg = _unique_derivs(grid, theta_c)
    gam_low = 0.5 * (np.einsum("ilj...->lij...", dg) + np.einsum("jli...->lij...", dg) - dg)
    gam = np.einsum("kl...,lij...->kij...", ginv, gam_low)
    s = grid.radial.s[:, None]
    return _Geom(s, ginv, dg, ddg, gam, gam_low)


def _ricci_scaled(G):
    """Ricci / s^3."""
    ginv, dg, ddg, gam, gam_low, s = G.ginv, G.dg, G.ddg, G.gam, G.gam_low, G.s
    dginv = -np.einsum("ka...,lb...,mab...->mkl...", ginv, ginv, dg)
    dgam_low = 0.5 * (np.einsum("milj...->mlij...", ddg) + np.einsum("mjli...->mlij...", ddg)
                      - ddg)
    lead = (np.einsum("kl...,klij...->ij...", ginv, dgam_low)
            - 0.5 * np.einsum("ab...,jiab...->ij...", ginv, ddg))
    quad = (np.einsum("kkl...,lij...->ij...", dginv, gam_low)
            - 0.5 * np.einsum("jab...,iab...->ij...", dginv, dg)
            + np.einsum("kkl...,lij...->ij...", gam, gam)
            - np.einsum("kjl...,lik...->ij...", gam, gam))
    R = lead + s * quad
    return 0.5 * (R + np.swapaxes(R, 0, 1))


def _hess_scaled(grid, G, phi):
    """(Q, Hess_g phi / s^3) for the lapse perturbation."""
    Q, H = grid.hess1(phi)
    H = 0.5 * (H + np.swapaxes(H, 0, 1))
    return Q, H - G.s * np.einsum("kij...,k...->ij...", G.gam, Q)


def _gauge_scaled(grid, theta_c, G):
    """(omega / s^2, d_i omega_j / s^3) with omega_i = d_j Theta_ij - d_i tr Theta / 2."""
    dg, ddg = G.dg, G.ddg
    w = np.einsum("jij...->i...", dg) - 0.5 * np.einsum("ijj...->i...", dg)
    dw = np.einsum("ikjk...->ij...", ddg) - 0.5 * np.einsum("ijkk...->ij...", ddg)
    return w, dw


def _mean_curvature_at_boundary(grid, G):
    """Mean curvature of r = 1 under g, from the boundary node of the geometry."""
    ang = grid.angular
    n = ang.n
    ginv = G.ginv[:, :, 0]
    gam = G.gam[:, :, :, 0]
    hess_r = ang.P - np.einsum("kij...,k...->ij...", gam, n)
    grad_r = np.einsum("ij...,j...->i...", ginv, n)
    norm2 = np.einsum("i...,i...->...", grad_r, n)
    lap = np.einsum("ij...,ij...->...", ginv, hess_r)
    hnn = np.einsum("i...,j...,ij...->...", grad_r, grad_r, hess_r) / norm2
    return (lap - hnn) / np.sqrt(norm2)


def _cart(state):
    return state.theta.cartesian(), state.phi.values


# ---------------------------------------------------------------------------
# public operators
# ---------------------------------------------------------------------------

def ricci(state):
    """Ricci tensor of g = delta + Theta."""
    grid = state.grid
    G = _geometry(grid, _cart(state)[0])
    s3 = grid.radial.s[:, None] ** 3
    return SymTensorField.from_cartesian(grid, s3 * _ricci_scaled(G))


def scalar_curvature(state):
    grid = state.grid
    G = _geometry(grid, _cart(state)[0])
    R = np.einsum("ij...,ij...->...", G.ginv, _ricci_scaled(G))
    return ScalarField(grid, grid.radial.s[:, None] ** 3 * R, decay=3.0)


def hessian(state, f=None):
    """Hessian of a scalar perturbation (default: the lapse perturbation) under g."""
    grid = state.grid
    theta_c, phi = _cart(state)
    G = _geometry(grid, theta_c)
    u = phi if f is None else f.values
    _, H = _hess_scaled(grid, G, u)
    return SymTensorField.from_cartesian(grid, grid.radial.s[:, None] ** 3 * H)


def gauge_one_form(state):
    """omega = div Theta - d tr Theta / 2 with respect to the flat background."""
    grid = state.grid
    theta_c = _cart(state)[0]
    G = _geometry(grid, theta_c)
    w, _ = _gauge_scaled(grid, theta_c, G)
    return OneFormField.from_cartesian(grid, grid.radial.s[:, None] ** 2 * w)


def mean_curvature(state):
    """Mean curvature of the unit sphere under g, on the angular nodes."""
    grid = state.grid
    return _mean_curvature_at_boundary(grid, _geometry(grid, _cart(state)[0]))


def _residual_arrays(grid, theta_c, phi, sigma, h):
    G = _geometry(grid, theta_c)
    ric = _ricci_scaled(G)
    Qf, hess_f = _hess_scaled(grid, G, phi)
    w, dw = _gauge_scaled(grid, theta_c, G)
    s = G.s
    nabla_w = dw - s * np.einsum("kij...,k...->ij...", G.gam, w)
    sym_nw = 0.5 * (nabla_w + np.swapaxes(nabla_w, 0, 1))
    f = 1.0 + phi
    slot1 = f * (ric - sym_nw) - hess_f
    slot2 = np.einsum("ij...,ij...->...", G.ginv, hess_f)
    P = grid.angular.P
    gtan = np.einsum("ia...,ab...,bj...->ij...", P, _I3[:, :, None] + theta_c[:, :, 0], P)
    return ResidualVector(grid, s * slot1, s * slot2, w[:, 0], gtan - sigma,
                          _mean_curvature_at_boundary(grid, G) - h)


def static_residual(state, bd):
    """Five-slot residual of the gauge-fixed static system.

    Slot 1 is f Ric - Hess f - f S(nabla omega), slot 2 the Laplacian of f,
    slot 3 the gauge one-form on the boundary, slot 4 the induced-metric
    defect and slot 5 the mean-curvature defect.
    """
    theta_c, phi = _cart(state)
    return _residual_arrays(state.grid, theta_c, phi, bd.sigma, bd.h)


@dataclass(frozen=True)
class ReductionDefects:
    scalar_identity: float     # weighted norm of R - div omega
    gauge_equation: float      # weighted norm of the elliptic equation for omega
    omega_norm: float          # weighted norm of omega


def reduction_residual(state, delta=-0.75):
    """Defects of the identities that let a gauge-fixed solution be static.

    For a solution with omega = 0 one has R = div omega, and omega satisfies
    Delta omega + 2 S(nabla omega)(grad f / f, .) + Ric(omega, .) = 0.
    Norms use the weight matching the decay of each quantity.
    """
    grid = state.grid
    theta_c, phi = _cart(state)
    G = _geometry(grid, theta_c)
    ric = _ricci_scaled(G)
    s = G.s
    w, dw = _gauge_scaled(grid, theta_c, G)
    R = np.einsum("ij...,ij...->...", G.ginv, ric)
    W = dw - s * np.einsum("kij...,k...->ij...", G.gam, w)          # nabla_i omega_j / s^3
    divw = np.einsum("ij...,ij...->...", G.ginv, W)
    scalar_defect = R - divw

    dW = grid.grad_scaled(W, 3)                                      # d_k W_ij / s^4
    cov = (dW - s * np.einsum("lki...,lj...->kij...", G.gam, W)
           - s * np.einsum("lkj...,il...->kij...", G.gam, W))
    lap_w = np.einsum("ki...,kij...->j...", G.ginv, cov)
    Qf, _ = _hess_scaled(grid, G, phi)
    f = 1.0 + phi
    grad_f = np.einsum("ij...,j...->i...", G.ginv, Qf) / f
    symW = 0.5 * (W + np.swapaxes(W, 0, 1))
    w_up = np.einsum("ij...,j...->i...", G.ginv, w)
    eq = lap_w + s * (2 * np.einsum("a...,ai...->i...", grad_f, symW)
                      + np.einsum("ij...,j...->i...", ric, w_up))
    return ReductionDefects(scaled_l2(grid, scalar_defect, delta),
                            scaled_l2(grid, eq, delta),
                            scaled_l2(grid, w, delta) + scaled_l2(grid, dw, delta))
