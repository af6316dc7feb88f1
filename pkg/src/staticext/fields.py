"""Discrete fields on the exterior of the unit ball.

The radial direction is compactified with s = 1/r, s in [0, 1], sampled on
Chebyshev-Lobatto nodes (s = 1 is the boundary sphere, s = 0 is infinity).
Angles use Gauss-Legendre nodes in cos(theta) and a uniform, even-sized
phi grid, so the grid is invariant under the three coordinate reflections.

Tensors are stored by frame components with respect to (n, e_theta, e_phi).
Most numerics work on Cartesian component arrays, which is what the
``cartesian`` / ``from_cartesian`` pairs are for.

Radial derivatives are kept in a scaled form.  For a field u vanishing at
infinity, ``grad1`` returns Q with d_i u = s^2 Q_i, and ``grad_scaled``
returns d_i (s^q V) / s^(q+1).  Products of these never divide by s.
"""

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import special

TENSOR_PROFILES = {
    "even": ("a", "b", "c", "d"),
    "odd": ("b", "c"),
}
# power k in  mode_profile = r^k * frame_profile
_R_POWER = {("even", "a"): 0, ("even", "b"): 1, ("even", "c"): 0,
            ("even", "d"): 0, ("odd", "b"): 1, ("odd", "c"): 2}


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

def _cheb_lobatto(n):
    N = n - 1
    j = np.arange(n)
    x = np.sin(np.pi * (N - 2 * j) / (2 * N))
    c = np.ones(n)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** j
    # x_i - x_j via the product formula to avoid cancellation
    ii, jj = np.meshgrid(j, j, indexing="ij")
    dx = 2 * np.sin(np.pi * (ii + jj) / (2 * N)) * np.sin(np.pi * (jj - ii) / (2 * N))
    np.fill_diagonal(dx, 1.0)
    D = np.outer(c, 1.0 / c) / dx
    np.fill_diagonal(D, 0.0)
    D[np.diag_indices(n)] = -D.sum(axis=1)
    return x, D


def _clenshaw_curtis(n):
    N = n - 1
    theta = np.pi * np.arange(n) / N
    w = np.zeros(n)
    v = np.ones(n - 2)
    if N % 2 == 0:
        w[0] = w[-1] = 1.0 / (N**2 - 1)
        for k in range(1, N // 2):
            v -= 2 * np.cos(2 * k * theta[1:-1]) / (4 * k * k - 1)
        v -= np.cos(N * theta[1:-1]) / (N**2 - 1)
    else:
        w[0] = w[-1] = 1.0 / N**2
        for k in range(1, (N - 1) // 2 + 1):
            v -= 2 * np.cos(2 * k * theta[1:-1]) / (4 * k * k - 1)
    w[1:-1] = 2 * v / N
    return w


def _bary_matrix(nodes, bw, targets):
    d = targets[:, None] - nodes[None, :]
    exact = d == 0
    d[exact] = 1.0
    M = bw[None, :] / d
    M /= M.sum(axis=1, keepdims=True)
    hit = exact.any(axis=1)
    M[hit] = exact[hit].astype(float)
    return M


@dataclass(frozen=True, eq=False)
class RadialGrid:
    """Chebyshev-Lobatto nodes in s = 1/r; index 0 is the boundary sphere."""

    n_r: int = 48

    def __post_init__(self):
        if self.n_r < 8:
            raise ValueError("n_r must be at least 8")

    @cached_property
    def _cheb(self):
        x, D = _cheb_lobatto(self.n_r)
        s = 0.5 * (1.0 + x)
        s[0], s[-1] = 1.0, 0.0
        return s, 2.0 * D

    @property
    def s(self):
        return self._cheb[0]

    @property
    def D(self):
        """d/ds on the nodes."""
        return self._cheb[1]

    @cached_property
    def D2(self):
        return self.D @ self.D

    @cached_property
    def r(self):
        with np.errstate(divide="ignore"):
            return 1.0 / self.s

    @cached_property
    def weights(self):
        """Clenshaw-Curtis weights for integrals over s in [0, 1]."""
        return 0.5 * _clenshaw_curtis(self.n_r)

    def power_weights(self, alpha):
        """Weights W_j with sum_j W_j u(s_j) = int_0^1 u(s) s^alpha ds for polynomial u."""
        nq = self.n_r + 8
        xq, wq = special.roots_jacobi(nq, 0.0, alpha)
        sq = 0.5 * (1.0 + xq)
        wq = wq * 2.0 ** (-alpha - 1.0)
        n = self.n_r
        bw = (-1.0) ** np.arange(n)
        bw[0] *= 0.5
        bw[-1] *= 0.5
        return wq @ _bary_matrix(self.s, bw, sq)

    def div_s(self, u):
        """u / s along axis -2, using u'(0) at s = 0 (u must vanish there)."""
        out = np.empty_like(u)
        out[..., :-1, :] = u[..., :-1, :] / self.s[:-1, None]
        out[..., -1, :] = np.tensordot(self.D[-1], u, axes=([0], [-2]))
        return out


@dataclass(frozen=True, eq=False)
class AngularGrid:
    """Gauss-Legendre x uniform-phi grid resolving harmonics up to ``lmax + pad``.

    The padding lets derivatives of Cartesian components of degree-lmax
    tensor harmonics be computed exactly.
    """

    lmax: int = 8
    pad: int = 4

    def __post_init__(self):
        if self.lmax < 0 or self.pad < 0:
            raise ValueError("lmax and pad must be non-negative")

    @property
    def lq(self):
        return self.lmax + self.pad

    @property
    def n_theta(self):
        return self.lq + 1

    @property
    def n_phi(self):
        return 2 * self.lq + 2

    @property
    def n_omega(self):
        return self.n_theta * self.n_phi

    @cached_property
    def _nodes(self):
        x, wx = special.roots_legendre(self.n_theta)
        x = x[::-1].copy()  # north to south
        wx = wx[::-1].copy()
        phi = 2 * np.pi * np.arange(self.n_phi) / self.n_phi
        X, P = np.meshgrid(x, phi, indexing="ij")
        W = np.outer(wx, np.full(self.n_phi, 2 * np.pi / self.n_phi))
        return X.ravel(), P.ravel(), W.ravel()

    @property
    def cos_theta(self):
        return self._nodes[0]

    @property
    def phi(self):
        return self._nodes[1]

    @property
    def weights(self):
        return self._nodes[2]

    @cached_property
    def frame(self):
        """(3, 3, n_omega): frame[a] is n, e_theta, e_phi for a = 0, 1, 2."""
        ct = self.cos_theta
        st = np.sqrt(1.0 - ct * ct)
        cp, sp = np.cos(self.phi), np.sin(self.phi)
        n = np.stack([st * cp, st * sp, ct])
        et = np.stack([ct * cp, ct * sp, -st])
        ep = np.stack([-sp, cp, np.zeros_like(cp)])
        return np.stack([n, et, ep])

    @property
    def n(self):
        return self.frame[0]

    @cached_property
    def P(self):
        """Tangential projector delta - n n, shape (3, 3, n_omega)."""
        n = self.n
        return np.eye(3)[:, :, None] - n[:, None] * n[None, :]

    @cached_property
    def eps(self):
        """The map v -> n x v, shape (3, 3, n_omega).

        On tangent one-forms this is the star operation: it sends the dual of
        e_theta to the dual of e_phi.
        """
        n = self.n
        E = np.zeros((3, 3, self.n_omega))
        E[0, 1], E[0, 2] = -n[2], n[1]
        E[1, 0], E[1, 2] = n[2], -n[0]
        E[2, 0], E[2, 1] = -n[1], n[0]
        return E

    @cached_property
    def harmonics(self):
        return HarmonicTable(self)

    @cached_property
    def grad_matrices(self):
        """G with (G[i] @ u) the i-th Cartesian component of the sphere gradient."""
        H = self.harmonics
        return np.einsum("hiw,hv->iwv", H.grad, H.analysis)

    @cached_property
    def _gcat(self):
        G = self.grad_matrices
        return np.concatenate([G[0].T, G[1].T, G[2].T], axis=1)

    @cached_property
    def laplacian_matrix(self):
        H = self.harmonics
        lam = -H.l * (H.l + 1.0)
        return (H.Y.T * lam) @ H.analysis

    def sphere_grad(self, u):
        """Cartesian sphere gradient along the last axis; result has a new leading axis of 3."""
        no = self.n_omega
        lead = u.shape[:-1]
        u2 = u.reshape(-1, no)
        if np.iscomplexobj(u2):
            m = u2.shape[0]
            both = np.concatenate([u2.real, u2.imag]) @ self._gcat
            out = both[:m] + 1j * both[m:]
        else:
            out = u2 @ self._gcat
        out = out.reshape(lead + (3, no))
        return np.moveaxis(out, -2, 0)

    def integrate(self, u):
        return u @ self.weights

    def reflection_index(self, axis):
        """Node permutation for x_axis -> -x_axis."""
        nt, nph = self.n_theta, self.n_phi
        it, ip = np.meshgrid(np.arange(nt), np.arange(nph), indexing="ij")
        if axis == 0:
            ip = (nph // 2 - ip) % nph
        elif axis == 1:
            ip = (-ip) % nph
        elif axis == 2:
            it = nt - 1 - it
        else:
            raise ValueError("axis must be 0, 1 or 2")
        return (it * nph + ip).ravel()


class HarmonicTable:
    """Real Schmidt semi-normalized harmonics without the Condon-Shortley phase.

    With this choice the l = 1 harmonics are exactly x, y, z on the unit sphere.
    Index M within a degree L runs 1..2L+1: M = 1 is m = 0, M = 2k is cos(k phi)
    and M = 2k + 1 is sin(k phi).
    """

    def __init__(self, ang):
        L = ang.lq
        x = ang.cos_theta
        st = np.sqrt(1.0 - x * x)
        ph = ang.phi
        rows = []
        for l in range(L + 1):
            for M in range(1, 2 * l + 2):
                rows.append((l, M // 2, "c" if M % 2 == 0 or M == 1 else "s", M))
        self.index = rows
        self.lookup = {(l, M): k for k, (l, _, _, M) in enumerate(rows)}
        nh = len(rows)
        self.l = np.array([r[0] for r in rows])
        self.m = np.array([r[1] for r in rows])
        Y = np.empty((nh, x.size))
        Yt = np.empty_like(Y)
        Ytt = np.empty_like(Y)
        Yp = np.empty_like(Y)
        Ytp = np.empty_like(Y)
        Ypp = np.empty_like(Y)
        omx2 = 1.0 - x * x
        for k, (l, m, kind, _) in enumerate(rows):
            N = math.sqrt((2.0 - (m == 0)) * math.exp(math.lgamma(l - m + 1) - math.lgamma(l + m + 1)))
            P = (-1.0) ** m * special.lpmv(m, l, x)
            Pm1 = (-1.0) ** m * special.lpmv(m, l - 1, x) if l - 1 >= m else np.zeros_like(x)
            dP = (l * x * P - (l + m) * Pm1) / (x * x - 1.0)
            d2P = (2 * x * dP - (l * (l + 1) - m * m / omx2) * P) / omx2
            if kind == "c":
                t, dt = np.cos(m * ph), -m * np.sin(m * ph)
            else:
                t, dt = np.sin(m * ph), m * np.cos(m * ph)
            Y[k] = N * P * t
            Yt[k] = -N * st * dP * t
            Ytt[k] = N * (-x * dP + omx2 * d2P) * t
            Yp[k] = N * P * dt
            Ytp[k] = -N * st * dP * dt
            Ypp[k] = -m * m * Y[k]
        cot = x / st
        h_tt = Ytt
        h_tp = (Ytp - cot * Yp) / st
        h_pp = Ypp / st**2 + cot * Yt
        F = ang.frame
        et, ep = F[1], F[2]
        self.Y = Y
        self.grad = Yt[:, None, :] * et[None] + (Yp / st)[:, None, :] * ep[None]
        self.hess = (h_tt[:, None, None] * et[None, :, None] * et[None, None, :]
                     + h_tp[:, None, None] * (et[None, :, None] * ep[None, None, :]
                                              + ep[None, :, None] * et[None, None, :])
                     + h_pp[:, None, None] * ep[None, :, None] * ep[None, None, :])
        self.norm = Y**2 @ ang.weights
        self.analysis = Y * ang.weights / self.norm[:, None]

    def find(self, l, M):
        return self.lookup[(l, M)]


@dataclass(frozen=True, eq=False)
class Grid:
    radial: RadialGrid = field(default_factory=RadialGrid)
    angular: AngularGrid = field(default_factory=AngularGrid)

    @classmethod
    def make(cls, n_r=48, lmax=8):
        return cls(RadialGrid(n_r), AngularGrid(lmax))

    @property
    def lmax(self):
        return self.angular.lmax

    @property
    def shape(self):
        return (self.radial.n_r, self.angular.n_omega)

    def ds(self, u):
        return self.radial.D @ u

    def grad_scaled(self, V, q):
        """d_i (s^q V) / s^(q+1) as a (3, ...) array."""
        s = self.radial.s[:, None]
        n = self.angular.n
        nb = n.reshape((3,) + (1,) * (V.ndim - 1) + (n.shape[-1],))
        return -q * nb * V - s * nb * self.ds(V) + self.angular.sphere_grad(V)

    def grad1(self, u):
        """Q with d_i u = s^2 Q_i, for u vanishing at infinity."""
        return self.grad_scaled(self.radial.div_s(u), 1)

    def hess1(self, u):
        """(Q, H) with d_i u = s^2 Q_i and d_j d_i u = s^3 H_ji."""
        Q = self.grad1(u)
        return Q, self.grad_scaled(Q, 2)

    def radial_integrate(self, u):
        return np.tensordot(self.radial.weights, u, axes=([0], [-2]))


# ---------------------------------------------------------------------------
# field containers
# ---------------------------------------------------------------------------

_SYM = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def _frame_to_cart(F, comps):
    # comps (3, 3, ...) frame -> Cartesian
    return np.einsum("aiw,bjw,ab...w->ij...w", F, F, comps)


def _cart_to_frame(F, T):
    return np.einsum("aiw,bjw,ij...w->ab...w", F, F, T)


def _sym_full(v):
    out = np.empty((3, 3) + v.shape[1:], dtype=v.dtype)
    for k, (a, b) in enumerate(_SYM):
        out[a, b] = v[k]
        out[b, a] = v[k]
    return out


def _sym_pack(T):
    return np.stack([T[a, b] for a, b in _SYM])


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Scalar samples on the grid, shape (n_r, n_omega).

    ``decay`` records the expected power of s at infinity (1 means O(1/r)).
    """

    grid: Grid
    values: np.ndarray
    decay: float = 1.0

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError(f"expected shape {self.grid.shape}, got {self.values.shape}")


@dataclass(frozen=True, eq=False)
class OneFormField:
    """Frame components (normal, theta, phi), shape (3, n_r, n_omega)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (3,) + self.grid.shape:
            raise ValueError("one-form values must have shape (3, n_r, n_omega)")

    def cartesian(self):
        return np.einsum("aiw,a...w->i...w", self.grid.angular.frame, self.values)

    @classmethod
    def from_cartesian(cls, grid, v):
        return cls(grid, np.einsum("aiw,i...w->a...w", grid.angular.frame, v))


@dataclass(frozen=True, eq=False)
class SymTensorField:
    """Frame components rr, r-theta, r-phi, theta-theta, theta-phi, phi-phi; shape (6, n_r, n_omega)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (6,) + self.grid.shape:
            raise ValueError("tensor values must have shape (6, n_r, n_omega)")

    def cartesian(self):
        return _frame_to_cart(self.grid.angular.frame, _sym_full(self.values))

    @classmethod
    def from_cartesian(cls, grid, T):
        T = 0.5 * (T + np.swapaxes(T, 0, 1))
        return cls(grid, _sym_pack(_cart_to_frame(grid.angular.frame, T)))

    def trace(self):
        v = self.values
        return v[0] + v[3] + v[5]


# ---------------------------------------------------------------------------
# harmonic patterns and mode spectra
# ---------------------------------------------------------------------------

def _outer_sym(u, v):
    return u[:, None] * v[None, :] + v[:, None] * u[None, :]


def tensor_pattern(ang, h, parity, name):
    """Cartesian angular pattern (3, 3, n_omega) multiplying a frame profile."""
    H = ang.harmonics
    n = ang.n
    if parity == "even":
        if name == "a":
            return H.Y[h] * n[:, None] * n[None, :]
        if name == "b":
            return _outer_sym(n, H.grad[h])
        if name == "c":
            return H.hess[h]
        if name == "d":
            return H.Y[h] * ang.P
    else:
        if name == "b":
            return _outer_sym(n, eps_apply(ang, H.grad[h]))
        if name == "c":
            Hs = H.hess[h]
            E = ang.eps
            return 0.5 * (np.einsum("ikw,kjw->ijw", E, Hs) - np.einsum("ikw,kjw->ijw", Hs, E))
    raise ValueError(f"no {parity} tensor profile {name!r}")


def oneform_pattern(ang, h, parity, name):
    H = ang.harmonics
    if parity == "even":
        if name == "a":
            return H.Y[h] * ang.n
        if name == "b":
            return H.grad[h]
    elif name == "b":
        return eps_apply(ang, H.grad[h])
    raise ValueError(f"no {parity} one-form profile {name!r}")


def eps_apply(ang, v):
    return np.einsum("ijw,j...w->i...w", ang.eps, v)


def tensor_profiles(L, parity):
    """Profiles carried by a tensor mode of degree L."""
    if parity == "even":
        if L == 0:
            return ("a", "d")
        if L == 1:
            return ("a", "b", "d")
        return ("a", "b", "c", "d")
    if L == 0:
        return ()
    if L == 1:
        return ("b",)
    return ("b", "c")


def oneform_profiles(L, parity):
    if parity == "even":
        return ("a",) if L == 0 else ("a", "b")
    return () if L == 0 else ("b",)


def _pattern_dot(p, V, w):
    # sum over components and angles of p * V, keeping the radial axis of V
    k = p.ndim - 1
    return np.tensordot(V, p * w, axes=(list(range(k)) + [V.ndim - 1], list(range(k + 1))))


def _gram(ang, pats):
    w = ang.weights
    return np.array([[np.sum(p * q * w) for q in pats] for p in pats])


@dataclass(eq=False)
class ModeSpectrum:
    """Radial profiles per harmonic, keyed by (L, M, parity).

    ``kind`` is "scalar", "oneform" or "tensor".  Tensor profiles use the
    r-weighted convention a = A, b = r B, c = C (even) or r^2 C (odd), d = D,
    where capitals are frame coefficients.
    """

    kind: str
    radial: RadialGrid
    lmax: int
    modes: dict

    def profile(self, L, M, parity, name):
        return self.modes[(L, M, parity)][name]


def _times_r(radial, u, k):
    """r^k u along axis -1 with the s -> 0 limit from the interpolant."""
    if k == 0:
        return u.copy()
    out = np.array(u, dtype=np.result_type(u, float))
    for _ in range(k):
        v = out[..., :-1] / radial.s[:-1]
        last = out @ radial.D[-1]
        out = np.concatenate([v, last[..., None]], axis=-1)
    return out


def _over_r(radial, u, k):
    return u * radial.s**k


def transform_to_modes(f, lmax=None):
    """Project a field on its harmonic modes (L <= lmax)."""
    grid = f.grid
    ang = grid.angular
    lmax = grid.lmax if lmax is None else lmax
    if lmax > ang.lq:
        raise ValueError("lmax exceeds the grid bandwidth")
    H = ang.harmonics
    w = ang.weights
    modes = {}
    if isinstance(f, ScalarField):
        coef = f.values @ H.analysis.T  # (n_r, nh)
        for h, (l, m, kind, M) in enumerate(H.index):
            if l <= lmax:
                modes[(l, M, "even")] = {"u": coef[:, h].copy()}
        return ModeSpectrum("scalar", grid.radial, lmax, modes)
    if isinstance(f, OneFormField):
        V = f.cartesian()
        kind, pat_fn, prof_fn = "oneform", oneform_pattern, oneform_profiles
    elif isinstance(f, SymTensorField):
        V = f.cartesian()
        kind, pat_fn, prof_fn = "tensor", tensor_pattern, tensor_profiles
    else:
        raise TypeError("unsupported field type")
    for h, (l, m, _, M) in enumerate(H.index):
        if l > lmax:
            continue
        for parity in ("even", "odd"):
            names = prof_fn(l, parity)
            if not names:
                continue
            pats = [pat_fn(ang, h, parity, nm) for nm in names]
            G = _gram(ang, pats)
            rhs = np.stack([_pattern_dot(p, V, w) for p in pats])
            c = np.linalg.solve(G, rhs)
            prof = {}
            for nm, row in zip(names, c):
                k = _R_POWER[(parity, nm)] if kind == "tensor" else (1 if nm == "b" else 0)
                prof[nm] = _times_r(grid.radial, row, k)
            modes[(l, M, parity)] = prof
    return ModeSpectrum(kind, grid.radial, lmax, modes)


def transform_from_modes(spec, grid):
    """Synthesize a grid field from a ModeSpectrum; missing modes are zero."""
    ang = grid.angular
    H = ang.harmonics
    if spec.radial.n_r != grid.radial.n_r:
        raise ValueError("radial grids differ")
    if spec.kind == "scalar":
        out = np.zeros(grid.shape, dtype=_spec_dtype(spec))
        for (l, M, parity), prof in spec.modes.items():
            out += np.outer(prof["u"], H.Y[H.find(l, M)])
        return ScalarField(grid, out)
    pat_fn = tensor_pattern if spec.kind == "tensor" else oneform_pattern
    shape = ((3, 3) if spec.kind == "tensor" else (3,)) + grid.shape
    V = np.zeros(shape, dtype=_spec_dtype(spec))
    for (l, M, parity), prof in spec.modes.items():
        h = H.find(l, M)
        for nm, u in prof.items():
            k = _R_POWER[(parity, nm)] if spec.kind == "tensor" else (1 if nm == "b" else 0)
            frame = _over_r(grid.radial, u, k)
            V += pat_fn(ang, h, parity, nm)[..., None, :] * frame[:, None]
    if spec.kind == "tensor":
        return SymTensorField.from_cartesian(grid, V)
    return OneFormField.from_cartesian(grid, V)


def _spec_dtype(spec):
    dt = np.float64
    for prof in spec.modes.values():
        for u in prof.values():
            dt = np.result_type(dt, u)
    return dt


# ---------------------------------------------------------------------------
# weighted norms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightedNormSpec:
    """Weighted Sobolev norm of order k <= 2 and weight delta in (-1, -1/2]."""

    k: int = 2
    delta: float = -0.75

    def __post_init__(self):
        if self.k not in (0, 1, 2):
            raise ValueError("k must be 0, 1 or 2")
        if not (-1.0 < self.delta <= -0.5):
            raise ValueError("delta must lie in (-1, -1/2]")


def _cart_components(f):
    if isinstance(f, ScalarField):
        return f.values[None]
    if isinstance(f, OneFormField):
        return f.cartesian()
    if isinstance(f, SymTensorField):
        return f.cartesian().reshape((9,) + f.grid.shape)
    raise TypeError("unsupported field type")


def scaled_l2(grid, V, delta):
    """sqrt(int |V|^2 s^(2 delta + 1) ds dOmega) over all leading components of V."""
    Wr = grid.radial.power_weights(2 * delta + 1)
    dens = np.abs(V) ** 2
    dens = dens.reshape((-1,) + grid.shape).sum(axis=0)
    return math.sqrt(max(float(Wr @ grid.angular.integrate(dens)), 0.0))


def weighted_norm(f, spec=WeightedNormSpec()):
    """Sum over l <= k of the weighted L^2 norms of the l-th derivatives.

    The integrands are evaluated in the scaled variables u/s, Q[u] and the
    scaled Hessian, which turns every term into int |.|^2 s^(2 delta + 1).
    The field must vanish at infinity.
    """
    grid = f.grid
    U = _cart_components(f)
    if np.max(np.abs(U[:, -1, :])) > 1e-12 * max(1.0, np.max(np.abs(U))):
        raise ValueError("field does not vanish at infinity")
    total = scaled_l2(grid, grid.radial.div_s(U), spec.delta)
    if spec.k >= 1:
        Q = grid.grad1(U)
        total += scaled_l2(grid, Q, spec.delta)
        if spec.k >= 2:
            total += scaled_l2(grid, grid.grad_scaled(Q, 2), spec.delta)
    return total


# ---------------------------------------------------------------------------
# reflections
# ---------------------------------------------------------------------------

def _reflect_cart(grid, V, axis, rank):
    idx = grid.angular.reflection_index(axis)
    out = V[..., idx].copy()
    sign = np.ones(3)
    sign[axis] = -1.0
    if rank >= 1:
        out *= sign.reshape((3,) + (1,) * (out.ndim - 1))
    if rank == 2:
        out *= sign.reshape((1, 3) + (1,) * (out.ndim - 2))
    return out


def reflect(f, axis):
    """Pull back a field by x_axis -> -x_axis."""
    grid = f.grid
    if isinstance(f, ScalarField):
        return ScalarField(grid, _reflect_cart(grid, f.values, axis, 0), f.decay)
    if isinstance(f, OneFormField):
        return OneFormField.from_cartesian(grid, _reflect_cart(grid, f.cartesian(), axis, 1))
    if isinstance(f, SymTensorField):
        return SymTensorField.from_cartesian(grid, _reflect_cart(grid, f.cartesian(), axis, 2))
    raise TypeError("unsupported field type")


def symmetrize_cart(grid, V, rank):
    """Average a Cartesian component array over the eight reflection compositions."""
    out = V
    for axis in range(3):
        out = 0.5 * (out + _reflect_cart(grid, out, axis, rank))
    return out


def reflection_project(f):
    """Average over the reflection group; idempotent."""
    out = f
    for axis in range(3):
        r = reflect(out, axis)
        out = type(out)(out.grid, 0.5 * (out.values + r.values), *(
            (out.decay,) if isinstance(out, ScalarField) else ()))
    return out


def symmetric_harmonics(lmax):
    """(L, M, parity) of the reflection-invariant harmonic modes up to lmax."""
    out = []
    for l in range(lmax + 1):
        for M in range(1, 2 * l + 2):
            m = M // 2
            cos = M == 1 or M % 2 == 0
            if l % 2 == 0 and m % 2 == 0 and cos:
                out.append((l, M, "even"))
            if l % 2 == 1 and l >= 3 and m % 2 == 0 and m >= 2 and not cos:
                out.append((l, M, "odd"))
    return out
