"""Linearized operators at the flat state, the adjoint mode systems and the cokernel.

The forward operator is never written out per mode by hand.  Every flat
operator commutes with rotations and dilations, so restricted to one
harmonic it acts on radial profiles as an Euler operator
A s^2 u'' + B s u' + C u (after scaling the interior rows by r^2).  The
coefficient matrices are identified by applying the grid operator to the
monomials s, s^2, s^3 and are checked on s^4.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .fields import (Grid, ScalarField, SymTensorField, eps_apply, oneform_pattern,
                     symmetric_harmonics, tensor_pattern, _gram)
from .geometry import ResidualVector, _unique_derivs

# ---------------------------------------------------------------------------
# forward operators
# ---------------------------------------------------------------------------


def _linear_arrays(grid, theta_c, phi, full=True):
    dg, ddg = _unique_derivs(grid, theta_c)
    _, Hp = grid.hess1(phi)
    Hp = 0.5 * (Hp + np.swapaxes(Hp, 0, 1))
    s = grid.radial.s[:, None]
    lap = np.einsum("kkij...->ij...", ddg)
    psi = s * (-0.5 * lap - Hp)
    chi = s * np.einsum("ii...->...", Hp)
    w = np.einsum("jij...->i...", dg) - 0.5 * np.einsum("ijj...->i...", dg)
    ang = grid.angular
    n, P = ang.n, ang.P
    th = theta_c[:, :, 0]
    metric = np.einsum("iaw,abw,bjw->ijw", P, th, P)
    t_nn = np.einsum("iw,jw,ijw->w", n, n, th)
    t_nn_n = np.einsum("kw,iw,jw,kijw->w", n, n, n, dg[:, :, :, 0])
    # first variation of the mean curvature, normalized so that H = 2 on the round sphere
    slot5 = 0.5 * t_nn_n + t_nn
    if full:
        slot5 = slot5 - np.einsum("iiw->w", metric) - np.einsum("iw,iw->w", n, w[:, 0])
    return ResidualVector(grid, psi, chi, w[:, 0].copy(), metric, slot5)


def apply_DPhi(theta, phi):
    """Linearization of the residual map at the flat state with round data."""
    return _linear_arrays(theta.grid, theta.cartesian(), phi.values, full=True)


def apply_T(theta, phi):
    """Same as apply_DPhi with the mean-curvature row reduced to Theta_nn;n / 2 + Theta_nn.

    The dropped terms are fixed by the gauge and metric rows.
    """
    return _linear_arrays(theta.grid, theta.cartesian(), phi.values, full=False)


# ---------------------------------------------------------------------------
# cokernel
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class CokernelElement:
    """Closed-form element of the cokernel, sampled on a grid.

    ``ups2`` and ``phi2`` hold upsilon / s^2 and phi / s^2 (Cartesian), which is
    what the pairing integrates against the r^2-scaled residual slots.
    """

    grid: Grid
    kind: str
    ups2: np.ndarray
    phi2: np.ndarray
    eta: np.ndarray
    tau: np.ndarray
    h: np.ndarray

    @property
    def upsilon(self):
        s2 = self.grid.radial.s[:, None] ** 2
        return SymTensorField.from_cartesian(self.grid, s2 * self.ups2)

    @property
    def phi(self):
        s2 = self.grid.radial.s[:, None] ** 2
        return ScalarField(self.grid, s2 * self.phi2, decay=2.0)

    def as_residual(self):
        """The element viewed as a residual vector (for self-pairing checks)."""
        g = self.grid
        return ResidualVector(g, self.ups2.copy(), self.phi2.copy(), self.eta.copy(),
                              self.tau.copy(), self.h.copy())

    def norm(self):
        """L2 norm in the inner product used by ``pair_residual``."""
        return float(np.sqrt(pair_residual(self.as_residual(), self, include_boundary_tensors=True)))


def cokernel_basis(grid):
    """The six closed-form elements, even_1..3 then odd_1..3.

    xi_i = x_i / r on the unit sphere.  The boundary tensor and function entries
    are zero, as stated for the cokernel; see ``boundary_tau`` for the tensor
    produced by the boundary identities.
    """
    ang = grid.angular
    n = ang.n
    nr = grid.radial.n_r
    s = grid.radial.s[:, None]
    I = np.eye(3)
    out = []
    for i in range(3):
        e = np.zeros((3, 1))
        e[i] = 1.0
        u = (n[:, None, :] * I[i][None, :, None] + I[i][:, None, None] * n[None, :, :]
             - n[i] * I[:, :, None])
        ups2 = np.broadcast_to(u[:, :, None, :], (3, 3, nr, ang.n_omega)).copy()
        phi2 = np.broadcast_to(n[i], (nr, ang.n_omega)).copy()
        out.append(CokernelElement(grid, f"even_{i + 1}", ups2, phi2,
                                   -np.broadcast_to(e, (3, ang.n_omega)).copy(),
                                   np.zeros((3, 3, ang.n_omega)), np.zeros(ang.n_omega)))
    for i in range(3):
        e = np.zeros((3, ang.n_omega))
        e[i] = 1.0
        v = eps_apply(ang, e)                      # n x e_i
        u = n[:, None] * v[None, :] + v[:, None] * n[None, :]
        ups2 = s * u[:, :, None, :]
        out.append(CokernelElement(grid, f"odd_{i + 1}", ups2, np.zeros((nr, ang.n_omega)), -v,
                                   np.zeros((3, 3, ang.n_omega)), np.zeros(ang.n_omega)))
    return out


def boundary_tau(ck):
    """Tangential tensor -(w Pi + S[grad_S Upsilon(n, .)] - div_S Upsilon(n, .) g / 2 - (nabla_n Upsilon)|_S / 2).

    This is the tensor the boundary identities attach to an element with
    Upsilon|_S = w g; it is returned for diagnostics only.
    """
    grid = ck.grid
    ang = grid.angular
    n, P = ang.n, ang.P
    ups = ck.ups2[:, :, 0]                         # s = 1
    w = 0.5 * np.einsum("ijw,ijw->w", P, ups)      # tangential trace / 2
    v = np.einsum("ijw,jw->iw", P, np.einsum("ijw,jw->iw", ups, n))
    gv = ang.sphere_grad(v)                        # gv[k, i] = grad_k v_i
    # covariant derivative of a tangent field on the unit sphere: P (grad v) P
    cov = np.einsum("ka...,ab...,bl...->kl...", P, gv, P)
    Sg = 0.5 * (cov + np.swapaxes(cov, 0, 1))
    div = np.einsum("iiw->w", cov)
    # radial derivative of the Cartesian components, Upsilon = s^2 ups2
    U = ck.ups2 * grid.radial.s[:, None] ** 2
    dUds = np.tensordot(grid.radial.D[0], U, axes=([0], [2]))
    dUn = -dUds                                    # d/dr = -s^2 d/ds at s = 1
    dUn_t = np.einsum("iaw,abw,bjw->ijw", P, dUn, P)
    return -(w * P + Sg - 0.5 * div * P - 0.5 * dUn_t)


def pair_residual(res, ck, include_boundary_tensors=False):
    """Pairing of a residual vector with a cokernel element.

    Interior tensor and scalar slots are integrated over the exterior region
    and the gauge slot over the sphere.  With ``include_boundary_tensors`` the
    metric slot is paired with ``ck.tau`` and the mean-curvature slot with ``ck.h``.
    """
    g = res.grid
    ang = g.angular
    wr = g.radial.weights
    dens = np.einsum("ijrw,ijrw->rw", res.psi, ck.ups2) + res.chi * ck.phi2
    total = wr @ ang.integrate(dens)
    total += ang.integrate(np.einsum("iw,iw->w", res.gauge, ck.eta))
    if include_boundary_tensors:
        total += ang.integrate(np.einsum("ijw,ijw->w", res.metric, ck.tau))
        total += ang.integrate(res.meancurv * ck.h)
    return float(np.real(total))


def adjoint_system_defects(ck):
    """Max defects of the adjoint interior equations and boundary rows for one element."""
    grid = ck.grid
    ang = grid.angular
    n, P = ang.n, ang.P
    d1 = grid.grad_scaled(ck.ups2, 2)              # d_k Upsilon_ij / s^3
    d2 = grid.grad_scaled(d1, 3)                   # d_l d_k Upsilon_ij / s^4
    lap_u = np.einsum("kkij...->ij...", d2)
    p1 = grid.grad_scaled(ck.phi2, 2)
    lap_p = np.einsum("kk...->...", grid.grad_scaled(p1, 3))
    div_u = np.einsum("jij...->i...", d1)
    U0 = ck.ups2[:, :, 0]
    unn = np.einsum("iw,jw,ijw->w", n, n, U0)
    dphi_n = np.einsum("iw,iw->w", n, p1[:, 0])
    v = np.einsum("ijw,jw->iw", P, np.einsum("ijw,jw->iw", U0, n))
    div_v = np.einsum("iiw->w", ang.sphere_grad(v))
    tan = np.einsum("iaw,abw,bjw->ijw", P, U0, P)
    tf = tan - 0.5 * np.einsum("iiw->w", tan) * P
    return {
        "laplace_upsilon": float(np.max(np.abs(lap_u))),
        "laplace_phi": float(np.max(np.abs(lap_p))),
        "phi_minus_unn": float(np.max(np.abs(ck.phi2[0] - unn))),
        "normal_flux": float(np.max(np.abs(dphi_n - div_v))),
        "div_upsilon": float(np.max(np.abs(div_u))),
        "tangential_tracefree": float(np.max(np.abs(tf))),
    }


# ---------------------------------------------------------------------------
# adjoint mode systems
# ---------------------------------------------------------------------------

# Each equation is a list of (variable, derivative order, coefficient(r, lam)).
# Variables carry the power k in  variable = r^k * (frame profile).


def _eqs_L0():
    return [
        [("a", 2, lambda r, l: 1.0), ("a", 1, lambda r, l: 2 / r),
         ("a", 0, lambda r, l: -4 / r**2), ("d", 0, lambda r, l: 4 / r**2)],
        [("d", 2, lambda r, l: 1.0), ("d", 1, lambda r, l: 2 / r),
         ("a", 0, lambda r, l: 2 / r**2), ("d", 0, lambda r, l: -2 / r**2)],
    ]


def _eqs_even(L):
    return [
        [("d", 2, lambda r, l: 1.0), ("d", 1, lambda r, l: 2 / r),
         ("d", 0, lambda r, l: (-2 - l) / r**2), ("a", 0, lambda r, l: 2 / r**2),
         ("c", 0, lambda r, l: 2 * l / r**2)],
        [("c", 2, lambda r, l: 1.0), ("c", 1, lambda r, l: 2 / r),
         ("c", 0, lambda r, l: (2 - l) / r**2), ("b", 0, lambda r, l: 4 / r**3)],
        [("b", 2, lambda r, l: 1.0), ("b", 0, lambda r, l: (-4 - l) / r**2),
         ("a", 0, lambda r, l: 2 / r), ("d", 0, lambda r, l: -2 / r),
         ("c", 0, lambda r, l: (-2 + 2 * l) / r)],
        [("a", 2, lambda r, l: 1.0), ("a", 1, lambda r, l: 2 / r),
         ("a", 0, lambda r, l: (-4 - l) / r**2), ("d", 0, lambda r, l: 4 / r**2),
         ("b", 0, lambda r, l: 4 * l / r**3), ("c", 0, lambda r, l: -2 * l / r**2)],
    ]


def _eqs_L1():
    return [
        [("d", 2, lambda r, l: 1.0), ("d", 1, lambda r, l: 2 / r), ("d", 0, lambda r, l: -4 / r**2),
         ("a", 0, lambda r, l: 2 / r**2), ("b", 0, lambda r, l: -4 / r**3)],
        [("b", 2, lambda r, l: 1.0), ("b", 0, lambda r, l: -6 / r**2),
         ("a", 0, lambda r, l: 2 / r), ("d", 0, lambda r, l: -2 / r)],
        [("a", 2, lambda r, l: 1.0), ("a", 1, lambda r, l: 2 / r), ("a", 0, lambda r, l: -6 / r**2),
         ("d", 0, lambda r, l: 4 / r**2), ("b", 0, lambda r, l: 8 / r**3)],
    ]


def _eqs_odd(L):
    return [
        [("c", 2, lambda r, l: 1.0), ("c", 1, lambda r, l: -2 / r),
         ("c", 0, lambda r, l: (4 - l) / r**2), ("b", 0, lambda r, l: 4 / r)],
        [("b", 2, lambda r, l: 1.0), ("b", 0, lambda r, l: -(4 + l) / r**2),
         ("c", 0, lambda r, l: (l - 2) / r**3)],
    ]


def _eqs_odd1():
    return [[("b", 2, lambda r, l: 1.0), ("b", 0, lambda r, l: -6 / r**2)]]


@dataclass
class AdjointModeSystem:
    """Coupled radial ODEs with boundary rows at r = 1 for one (L, parity).

    ``bcs`` rows are lists of (variable, derivative order, coefficient), with
    the variable "c_o" standing for the free constant of the lapse ansatz.
    """

    L: int
    parity: str
    variables: tuple
    powers: dict
    equations: list
    bcs: list
    has_constant: bool = False

    @classmethod
    def build(cls, L, parity):
        if L < 0 or parity not in ("even", "odd"):
            raise ValueError("need L >= 0 and parity even|odd")
        if parity == "even":
            if L == 0:
                return cls(0, "even", ("a", "d"), {"a": 0, "d": 0}, _eqs_L0(),
                           [[("a", 0, 1.0)], [("a", 1, 1.0), ("d", 0, -2.0)]])
            if L == 1:
                return cls(1, "even", ("a", "b", "d"), {"a": 0, "b": 1, "d": 0}, _eqs_L1(),
                           [[("c_o", 0, 1.0), ("a", 0, -1.0)],
                            [("c_o", 0, 1.0), ("b", 0, -1.0)],
                            [("a", 1, 1.0), ("a", 0, 2.0), ("d", 0, -2.0), ("b", 0, -2.0)],
                            [("b", 1, 1.0), ("b", 0, 2.0), ("d", 0, 1.0)]], True)
            lam = L * (L + 1.0)
            return cls(L, "even", ("a", "b", "c", "d"), {"a": 0, "b": 1, "c": 0, "d": 0},
                       _eqs_even(L),
                       [[("c_o", 0, 1.0), ("a", 0, -1.0)],
                        [("c_o", 0, 1.0), ("b", 0, -float(L))],
                        [("a", 1, 1.0), ("a", 0, 2.0), ("d", 0, -2.0), ("b", 0, -lam)],
                        [("b", 1, 1.0), ("b", 0, 2.0), ("d", 0, 1.0)],
                        [("c", 0, 1.0)]], True)
        if L == 0:
            return cls(0, "odd", (), {}, [], [])
        if L == 1:
            return cls(1, "odd", ("b",), {"b": 1}, _eqs_odd1(),
                       [[("b", 1, 1.0), ("b", 0, 2.0)]])
        return cls(L, "odd", ("b", "c"), {"b": 1, "c": 2}, _eqs_odd(L),
                   [[("c", 0, 1.0)], [("b", 1, 1.0), ("b", 0, 2.0)]])

    def matrix(self, radial):
        """Collocation matrix acting on frame profiles at all nodes (plus c_o last).

        Interior rows are multiplied by r^2; the last node (infinity) carries
        Dirichlet rows.
        """
        n = radial.n_r
        s, D = radial.s, radial.D
        D2 = radial.D2
        nv = len(self.variables)
        ncol = nv * n + (1 if self.has_constant else 0)
        lam = self.L * (self.L + 1.0)
        col = {v: slice(k * n, (k + 1) * n) for k, v in enumerate(self.variables)}
        rows = []
        si = s[1:-1]
        ri = 1.0 / si
        for eq in self.equations:
            block = np.zeros((n - 2, ncol))
            for var, order, coef in eq:
                k = self.powers[var]
                c = np.broadcast_to(np.asarray(coef(ri, lam), dtype=float), si.shape) * ri**2
                if order == 0:
                    op = np.diag(si**-k) @ np.eye(n)[1:-1]
                elif order == 1:
                    op = (np.diag(k * si ** (1 - k)) @ np.eye(n)[1:-1]
                          - np.diag(si ** (2 - k)) @ D[1:-1])
                else:
                    op = (np.diag(-k * (1 - k) * si ** (2 - k)) @ np.eye(n)[1:-1]
                          - np.diag((2 * k - 2) * si ** (3 - k)) @ D[1:-1]
                          + np.diag(si ** (4 - k)) @ D2[1:-1])
                block[:, col[var]] += c[:, None] * op
            rows.append(block)
        for var in self.variables:
            r = np.zeros((1, ncol))
            r[0, col[var].start + n - 1] = 1.0
            rows.append(r)
        for bc in self.bcs:
            r = np.zeros((1, ncol))
            for var, order, coef in bc:
                if var == "c_o":
                    r[0, -1] += coef
                    continue
                k = self.powers[var]
                if order == 0:
                    r[0, col[var].start] += coef
                else:  # v_r(1) = k V(1) - V_s(1)
                    r[0, col[var].start] += coef * k
                    r[0, col[var]] -= coef * D[0]
            rows.append(r)
        return np.vstack(rows)


@dataclass
class AdjointKernel:
    L: int
    parity: str
    profiles: list            # dicts of r-scaled mode profiles (plus "c_o")
    singular_values: np.ndarray
    gap: float

    @property
    def dimension(self):
        return len(self.profiles)


def adjoint_kernel(L, parity, radial, rel_tol=1e-10):
    """Decaying solutions of the adjoint mode system for (L, parity).

    Rows are equilibrated before the SVD.  Singular values below
    rel_tol * sigma_max count as kernel.  ``gap`` is the ratio between the
    smallest non-kernel singular value and the largest kernel one, or the
    threshold rel_tol * sigma_max when the kernel is empty.
    """
    sysm = AdjointModeSystem.build(L, parity)
    if not sysm.variables:
        return AdjointKernel(L, parity, [], np.array([]), np.inf)
    A = sysm.matrix(radial)
    A = A / np.linalg.norm(A, axis=1, keepdims=True)
    U, sv, Vt = linalg.svd(A)
    null = sv < rel_tol * sv[0]
    dim = int(null.sum())
    if dim:
        gap = sv[~null][-1] / max(sv[null][0], 1e-300)
    else:
        gap = sv[-1] / (rel_tol * sv[0])
    n = radial.n_r
    profiles = []
    for vec in Vt[len(sv) - dim:]:
        prof = {}
        for k, v in enumerate(sysm.variables):
            frame = vec[k * n:(k + 1) * n]
            prof[v] = _frame_to_mode(radial, frame, sysm.powers[v])
        if sysm.has_constant:
            prof["c_o"] = vec[-1]
        profiles.append(prof)
    return AdjointKernel(L, parity, profiles, sv, float(gap))


def l1_deviation(kernel, radial):
    """Max deviation of the normalized L = 1 kernel profile from its closed form.

    Even: (a, b, d) against (r^-2, r^-1, -r^-2); odd: b against r^-2.
    Profiles are normalized by their value at r = 1.
    """
    if kernel.L != 1 or kernel.dimension != 1:
        raise ValueError("need the one-dimensional L = 1 kernel")
    prof = kernel.profiles[0]
    s = radial.s
    if kernel.parity == "even":
        ref = {"a": s**2, "b": s, "d": -s**2}
        scale = prof["a"][0]
    else:
        ref = {"b": s**2}
        scale = prof["b"][0]
    return float(max(np.max(np.abs(prof[k] / scale - v)) for k, v in ref.items()))


def _frame_to_mode(radial, V, k):
    from .fields import _times_r
    return _times_r(radial, V, k)


# ---------------------------------------------------------------------------
# mode basis and block matrices
# ---------------------------------------------------------------------------

_BC_ROWS = {
    ("even", 0): ("wn", "sd", "h"),
    ("even", 1): ("wn", "wt", "sd", "h"),
    ("even", 2): ("wn", "wt", "sc", "sd", "h"),
    ("odd", 1): ("wto",),
    ("odd", 2): ("wto", "sco"),
}


def _block_profiles(L, parity):
    from .fields import tensor_profiles
    t = tensor_profiles(L, parity)
    return t + (("phi",) if parity == "even" else ())


def _bc_names(L, parity):
    return _BC_ROWS[(parity, min(L, 2))]


@dataclass(eq=False)
class ModeBasis:
    """Unknown and equation layout for a set of harmonic blocks.

    Unknowns are frame profiles (A, B, C, D, phi or the odd B, C) at radial
    nodes 0..n_r-2; the value at infinity is fixed to zero.  Equations per
    block are the r^2-scaled interior projections at nodes 1..n_r-2 followed
    by one boundary row per profile.
    """

    grid: Grid
    modes: list

    def __post_init__(self):
        g = self.grid
        ang = g.angular
        H = ang.harmonics
        n = g.radial.n_r
        self.n_int = n - 2
        self.blocks = []
        t_pats, t_dual, s_pats, s_dual = [], [], [], []
        bc_vec, bc_vec_dual, bc_tan, bc_tan_dual, bc_sc, bc_sc_dual = [], [], [], [], [], []
        w = ang.weights
        xoff = foff = 0
        for (L, M, parity) in self.modes:
            h = H.find(L, M)
            profs = _block_profiles(L, parity)
            bcs = _bc_names(L, parity)
            tprof = [p for p in profs if p != "phi"]
            pats = [tensor_pattern(ang, h, parity, p) for p in tprof]
            G = _gram(ang, pats)
            Gi = np.linalg.inv(G)
            t_index = {}
            for a, p in enumerate(tprof):
                t_index[p] = len(t_pats)
                t_pats.append(pats[a])
                t_dual.append(sum(Gi[a, b] * pats[b] for b in range(len(pats))) * w)
            s_index = None
            if "phi" in profs:
                s_index = len(s_pats)
                s_pats.append(H.Y[h])
                s_dual.append(H.analysis[h])
            bc_index = []
            vec_names = [b for b in bcs if b.startswith("w")]
            tan_names = [b for b in bcs if b.startswith("s")]
            if vec_names:
                vp = [oneform_pattern(ang, h, "even" if b in ("wn", "wt") else "odd",
                                      {"wn": "a", "wt": "b", "wto": "b"}[b]) for b in vec_names]
                Gv = np.linalg.inv(_gram(ang, vp))
            if tan_names:
                tp = [tensor_pattern(ang, h, "even" if b in ("sc", "sd") else "odd",
                                     {"sc": "c", "sd": "d", "sco": "c"}[b]) for b in tan_names]
                Gt = np.linalg.inv(_gram(ang, tp))
            for b in bcs:
                if b in vec_names:
                    a = vec_names.index(b)
                    bc_index.append(("vec", len(bc_vec)))
                    bc_vec.append(vp[a])
                    bc_vec_dual.append(sum(Gv[a, c] * vp[c] for c in range(len(vp))) * w)
                elif b in tan_names:
                    a = tan_names.index(b)
                    bc_index.append(("tan", len(bc_tan)))
                    bc_tan.append(tp[a])
                    bc_tan_dual.append(sum(Gt[a, c] * tp[c] for c in range(len(tp))) * w)
                else:
                    bc_index.append(("sc", len(bc_sc)))
                    bc_sc.append(H.Y[h])
                    bc_sc_dual.append(H.analysis[h])
            nprof = len(profs)
            self.blocks.append(dict(L=L, M=M, parity=parity, h=h, profiles=profs, bcs=bcs,
                                    t_index=t_index, s_index=s_index, bc_index=bc_index,
                                    x0=xoff, f0=foff, size=nprof * (n - 1)))
            xoff += nprof * (n - 1)
            foff += nprof * (n - 1)
        self.size = xoff
        self.t_pats = np.array(t_pats).reshape(len(t_pats), 9, ang.n_omega)
        self.t_dual = np.array(t_dual).reshape(len(t_dual), 9, ang.n_omega)
        self.s_pats = np.array(s_pats).reshape(len(s_pats), ang.n_omega)
        self.s_dual = np.array(s_dual).reshape(len(s_dual), ang.n_omega)
        self.v_dual = np.array(bc_vec_dual).reshape(len(bc_vec_dual), 3, ang.n_omega)
        self.tan_dual = np.array(bc_tan_dual).reshape(len(bc_tan_dual), 9, ang.n_omega)
        self.sc_dual = np.array(bc_sc_dual).reshape(len(bc_sc_dual), ang.n_omega)
        self._build_index()

    @classmethod
    def symmetric(cls, grid):
        return cls(grid, symmetric_harmonics(grid.lmax))

    def _build_index(self):
        n = self.grid.radial.n_r
        nt, ns = len(self.t_pats), len(self.s_pats)
        self.xt_idx = np.zeros((nt, n - 1), dtype=int)
        self.xs_idx = np.zeros((ns, n - 1), dtype=int)
        self.ft_idx = np.zeros((nt, n - 2), dtype=int)
        self.fs_idx = np.zeros((ns, n - 2), dtype=int)
        fv, ftan, fsc = [], [], []
        for b in self.blocks:
            for k, p in enumerate(b["profiles"]):
                xs = b["x0"] + k * (n - 1) + np.arange(n - 1)
                fs = b["f0"] + k * (n - 2) + np.arange(n - 2)
                if p == "phi":
                    self.xs_idx[b["s_index"]] = xs
                    self.fs_idx[b["s_index"]] = fs
                else:
                    self.xt_idx[b["t_index"][p]] = xs
                    self.ft_idx[b["t_index"][p]] = fs
            base = b["f0"] + len(b["profiles"]) * (n - 2)
            for k, (kind, idx) in enumerate(b["bc_index"]):
                {"vec": fv, "tan": ftan, "sc": fsc}[kind].append((idx, base + k))
        self.fv_idx = np.array([p for _, p in sorted(fv)], dtype=int)
        self.ftan_idx = np.array([p for _, p in sorted(ftan)], dtype=int)
        self.fsc_idx = np.array([p for _, p in sorted(fsc)], dtype=int)

    # -- synthesis / analysis ------------------------------------------------

    def to_fields(self, x):
        """(Theta Cartesian (3, 3, n_r, n_omega), phi (n_r, n_omega)) from an unknown vector."""
        g = self.grid
        n = g.radial.n_r
        Xt = np.zeros((len(self.t_pats), n), dtype=x.dtype)
        Xt[:, :-1] = x[self.xt_idx]
        Xs = np.zeros((len(self.s_pats), n), dtype=x.dtype)
        Xs[:, :-1] = x[self.xs_idx]
        theta = np.einsum("pr,pkw->krw", Xt, self.t_pats).reshape((3, 3) + g.shape)
        phi = Xs.T @ self.s_pats
        return theta, phi

    def from_fields(self, theta, phi):
        """Least-squares projection of Cartesian fields onto the unknowns (exact for fields in the span)."""
        g = self.grid
        x = np.zeros(self.size, dtype=np.result_type(theta, phi))
        T = theta.reshape((9,) + g.shape)
        ct = np.einsum("pkw,krw->pr", self.t_dual, T)
        cs = self.s_dual @ phi.T
        x[self.xt_idx] = ct[:, :-1]
        x[self.xs_idx] = cs[:, :-1]
        return x

    def equations(self, res):
        """Equation vector from a residual vector."""
        g = self.grid
        F = np.zeros(self.size, dtype=np.result_type(res.psi, res.meancurv))
        ct = np.einsum("pkw,krw->pr", self.t_dual, res.psi.reshape((9,) + g.shape))
        cs = self.s_dual @ res.chi.T
        F[self.ft_idx] = ct[:, 1:-1]
        F[self.fs_idx] = cs[:, 1:-1]
        if len(self.fv_idx):
            F[self.fv_idx] = np.einsum("piw,iw->p", self.v_dual, res.gauge)
        if len(self.ftan_idx):
            F[self.ftan_idx] = np.einsum("pkw,kw->p", self.tan_dual, res.metric.reshape(9, -1))
        if len(self.fsc_idx):
            F[self.fsc_idx] = self.sc_dual @ res.meancurv
        return F

    def rhs_residual(self, F):
        """Residual vector whose equations are F (inverse of ``equations`` on the span)."""
        g = self.grid
        n = g.radial.n_r
        Ct = np.zeros((len(self.t_pats), n), dtype=F.dtype)
        Ct[:, 1:-1] = F[self.ft_idx]
        Cs = np.zeros((len(self.s_pats), n), dtype=F.dtype)
        Cs[:, 1:-1] = F[self.fs_idx]
        psi = np.einsum("pr,pkw->krw", Ct, self.t_pats).reshape((3, 3) + g.shape)
        chi = Cs.T @ self.s_pats
        res = ResidualVector.zeros(g)
        res.psi, res.chi = psi, chi
        # boundary rows: rebuild from the matching patterns
        vp, tp, sp = self._bc_patterns()
        if len(self.fv_idx):
            res.gauge = np.einsum("p,piw->iw", F[self.fv_idx], vp)
        if len(self.ftan_idx):
            res.metric = np.einsum("p,pkw->kw", F[self.ftan_idx], tp).reshape(3, 3, -1)
        if len(self.fsc_idx):
            res.meancurv = F[self.fsc_idx] @ sp
        return res

    def _bc_patterns(self):
        if not hasattr(self, "_bcp"):
            ang = self.grid.angular
            vp, tp, sp = [], [], []
            for b in self.blocks:
                h = b["h"]
                for name in b["bcs"]:
                    if name in ("wn", "wt", "wto"):
                        vp.append(oneform_pattern(ang, h, "odd" if name == "wto" else "even",
                                                  "a" if name == "wn" else "b"))
                    elif name in ("sc", "sd", "sco"):
                        tp.append(tensor_pattern(ang, h, "odd" if name == "sco" else "even",
                                                 "d" if name == "sd" else "c").reshape(9, -1))
                    else:
                        sp.append(ang.harmonics.Y[h])
            no = ang.n_omega
            self._bcp = (np.array(vp).reshape(-1, 3, no), np.array(tp).reshape(-1, 9, no),
                         np.array(sp).reshape(-1, no))
        return self._bcp

    # -- slot norms on the equation vector ----------------------------------

    def slot_norms(self, F, delta):
        """Slot norms of an equation vector.

        Interior slots: weighted L2 (weight of the decay class of the slot) over
        the collocation nodes, computed from the coefficients of F / s.
        Boundary slots: L2 on the sphere of the projected boundary residual.
        """
        g = self.grid
        rad = g.radial
        if not hasattr(self, "_wint") or self._wint[0] != delta:
            W = rad.power_weights(2 * delta + 1)[1:-1] / rad.s[1:-1] ** 2
            self._wint = (delta, W)
        W = self._wint[1]
        ang = g.angular
        tn = np.array([np.sum(p * p * ang.weights) for p in self.t_pats.reshape(len(self.t_pats), -1, ang.n_omega)])
        sn = np.sum(self.s_pats**2 * ang.weights, axis=1)
        t = np.abs(F[self.ft_idx]) ** 2
        s_ = np.abs(F[self.fs_idx]) ** 2
        n1 = np.sqrt(np.sum(tn[:, None] * t * W))
        n2 = np.sqrt(np.sum(sn[:, None] * s_ * W))
        vp, tp, sp = self._bc_patterns()
        out = [n1, n2]
        for idx, pats in ((self.fv_idx, vp), (self.ftan_idx, tp), (self.fsc_idx, sp)):
            if len(idx) == 0:
                out.append(0.0)
                continue
            nn = np.sum(pats.reshape(len(pats), -1, ang.n_omega) ** 2 * ang.weights, axis=(1, 2))
            out.append(np.sqrt(np.sum(nn * np.abs(F[idx]) ** 2)))
        return np.array(out)


def _block_operator_coeffs(basis, op, ps=(1, 2, 3, 4)):
    """Fit Euler coefficients (A, B, C) per block and boundary coefficients (E, F).

    Returns dict block_index -> (A, B, C, E, F, check) where interior rows act as
    A s^2 D^2 + B s D + C and boundary rows as E D[0] + F e_0.
    """
    g = basis.grid
    n = g.radial.n_r
    s = g.radial.s
    maxp = max(len(b["profiles"]) for b in basis.blocks)
    vals = {}
    for p in ps:
        for q in range(maxp):
            x = np.zeros(basis.size)
            for b in basis.blocks:
                if q < len(b["profiles"]):
                    x[b["x0"] + q * (n - 1): b["x0"] + (q + 1) * (n - 1)] = s[:-1] ** p
            theta, phi = basis.to_fields(x)
            vals[(p, q)] = basis.equations(op(g, theta, phi))
    out = {}
    j = np.arange(1, n - 1)
    sel = s[j] > 0.2
    for bi, b in enumerate(basis.blocks):
        m = len(b["profiles"])
        c = np.zeros((len(ps), m, m))
        bvals = np.zeros((len(ps), m, m))
        for pi, p in enumerate(ps):
            for q in range(m):
                F = vals[(p, q)][b["f0"]: b["f0"] + m * (n - 1)]
                interior = F[: m * (n - 2)].reshape(m, n - 2)
                c[pi, :, q] = np.mean(interior[:, sel] / s[j][sel] ** p, axis=1)
                bvals[pi, :, q] = F[m * (n - 2):]
        V = np.array([[p * (p - 1), p, 1.0] for p in ps[:3]])
        ABC = np.linalg.solve(V, c[:3].reshape(3, -1)).reshape(3, m, m)
        EF = np.linalg.solve(np.array([[ps[0], 1.0], [ps[1], 1.0]]), bvals[:2].reshape(2, -1)).reshape(2, m, m)
        p4 = ps[3]
        pred = ABC[0] * p4 * (p4 - 1) + ABC[1] * p4 + ABC[2]
        pred_b = EF[0] * p4 + EF[1]
        scale = 1.0 + np.max(np.abs(c))
        check = max(np.max(np.abs(pred - c[3])), np.max(np.abs(pred_b - bvals[3]))) / scale
        out[bi] = (ABC[0], ABC[1], ABC[2], EF[0], EF[1], check)
    return out


def _assemble_block(radial, coeffs):
    A, B, C, E, Fb, _ = coeffs
    n = radial.n_r
    s, D, D2 = radial.s, radial.D, radial.D2
    m = A.shape[0]
    rows = slice(1, n - 1)
    cols = slice(0, n - 1)
    S2D2 = (s[rows, None] ** 2 * D2[rows, cols])
    SD = (s[rows, None] * D[rows, cols])
    I = np.eye(n)[rows, cols]
    K = np.zeros((m * (n - 1), m * (n - 1)))
    for o in range(m):
        for q in range(m):
            K[o * (n - 2):(o + 1) * (n - 2), q * (n - 1):(q + 1) * (n - 1)] = (
                A[o, q] * S2D2 + B[o, q] * SD + C[o, q] * I)
            e0 = np.zeros(n - 1)
            e0[0] = 1.0
            K[m * (n - 2) + o, q * (n - 1):(q + 1) * (n - 1)] = E[o, q] * D[0, cols] + Fb[o, q] * e0
    return K


def _op_dphi(grid, theta, phi):
    return _linear_arrays(grid, theta, phi, full=True)


def _op_t(grid, theta, phi):
    return _linear_arrays(grid, theta, phi, full=False)


@dataclass(eq=False)
class LinearSystem:
    """Block-diagonal flat operator on a ModeBasis, with LU factors per block."""

    basis: ModeBasis
    which: str = "T"
    blocks: list = field(default_factory=list)
    fit_error: float = 0.0

    def __post_init__(self):
        op = _op_t if self.which == "T" else _op_dphi
        coeffs = _block_operator_coeffs(self.basis, op)
        rad = self.basis.grid.radial
        self.blocks = []
        for bi, b in enumerate(self.basis.blocks):
            K = _assemble_block(rad, coeffs[bi])
            self.blocks.append((slice(b["x0"], b["x0"] + b["size"]), K, linalg.lu_factor(K)))
        self.fit_error = max(c[-1] for c in coeffs.values())

    def matvec(self, x):
        y = np.zeros_like(x)
        for sl, K, _ in self.blocks:
            y[sl] = K @ x[sl]
        return y

    def solve(self, F):
        x = np.zeros_like(F)
        for sl, _, lu in self.blocks:
            x[sl] = linalg.lu_solve(lu, F[sl])
        return x

    def lstsq(self, F):
        x = np.zeros_like(F)
        for sl, K, _ in self.blocks:
            x[sl] = linalg.lstsq(K, F[sl])[0]
        return x

    def condition_numbers(self):
        return [np.linalg.cond(K) for _, K, _ in self.blocks]


class NonSymmetricError(ValueError):
    pass


@dataclass(frozen=True)
class LinearSolveConfig:
    lin_tol: float = 1e-8
    pairing_tol: float = 1e-10


_SYSTEM_CACHE = {}


def symmetric_system(grid, which="T"):
    key = (grid.radial.n_r, grid.angular.lmax, grid.angular.pad, which)
    if key not in _SYSTEM_CACHE:
        _SYSTEM_CACHE[key] = LinearSystem(ModeBasis.symmetric(grid), which)
    return _SYSTEM_CACHE[key]


def solve_linearized(rhs, cfg=LinearSolveConfig()):
    """Solve apply_T(Theta, phi) = rhs over the reflection-symmetric basis.

    A right-hand side with a nonzero pairing against any cokernel element is
    rejected.  The right-hand side is then reflection-projected and the
    block system solved in the least-squares sense.  Returns
    (theta, phi, relative_residual).
    """
    g = rhs.grid
    cks = cokernel_basis(g)
    scale = 1.0 + max(rhs.slot_norms())
    pair = [pair_residual(rhs, ck) for ck in cks]
    if max(abs(p) for p in pair) > cfg.pairing_tol * scale:
        raise NonSymmetricError(f"right-hand side pairs with the cokernel: {pair}")
    sysm = symmetric_system(g, "T")
    F = sysm.basis.equations(rhs.symmetrized())
    x = sysm.lstsq(F)
    rel = np.linalg.norm(sysm.matvec(x) - F) / max(np.linalg.norm(F), 1e-300)
    if rel > cfg.lin_tol:
        raise RuntimeError(f"least-squares residual {rel:.3e} above tolerance")
    theta, phi = sysm.basis.to_fields(x)
    return SymTensorField.from_cartesian(g, theta), ScalarField(g, phi), float(rel)
