"""Line-oriented text formats: boundary data, solutions and diagnostics logs."""

import hashlib

import numpy as np

from .fields import Grid, _gram, _times_r, _R_POWER, tensor_pattern, tensor_profiles
from .geometry import BoundaryData, MetricState
from .linear import ModeBasis

BD_TAG = "staticext-bd v1"
SOL_TAG = "staticext-sol v1"


class ParseError(ValueError):
    def __init__(self, line, msg):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def digest(data):
    return hashlib.sha256(data).hexdigest()


def _fmt(x):
    return repr(float(x))


def _content_lines(text):
    """(line number, fields) for non-empty lines with comments removed."""
    for k, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield k, line.split()


# ---------------------------------------------------------------------------
# boundary data
# ---------------------------------------------------------------------------


class BoundaryFile:
    """Mode coefficients of sigma - g_S2 and h - 2."""

    def __init__(self, lmax, sigma_modes=(), h_modes=()):
        self.lmax = int(lmax)
        self.sigma_modes = list(sigma_modes)
        self.h_modes = list(h_modes)

    def to_data(self, grid):
        if self.lmax > grid.lmax:
            used = [m[0] for m in self.sigma_modes] + [m[0] for m in self.h_modes]
            if used and max(used) > grid.lmax:
                raise ValueError(f"boundary modes up to L={max(used)} exceed grid lmax {grid.lmax}")
        return BoundaryData.from_modes(grid, self.sigma_modes, self.h_modes)

    @classmethod
    def from_data(cls, bd, tol=0.0):
        """Project boundary data on the surface basis (coefficients with |c| <= tol are dropped)."""
        ang = bd.grid.angular
        H = ang.harmonics
        w = ang.weights
        dsig = bd.sigma - ang.P
        sig, hm = [], []
        for h, (L, _, _, M) in enumerate(H.index):
            if L > bd.grid.lmax:
                continue
            for parity in ("even", "odd"):
                names = [p for p in ("c", "d") if p in tensor_profiles(L, parity)]
                if parity == "even" and L < 2:
                    names = ["d"]
                if not names:
                    continue
                pats = [tensor_pattern(ang, h, parity, p) for p in names]
                G = _gram(ang, pats)
                rhs = [np.sum(p * dsig * w) for p in pats]
                for p, c in zip(names, np.linalg.solve(G, rhs)):
                    if abs(c) > tol:
                        sig.append((L, M, parity, p, float(c)))
            c = float(H.analysis[h] @ (bd.h - 2.0))
            if abs(c) > tol:
                hm.append((L, M, c))
        return cls(bd.grid.lmax, sig, hm)

    def dumps(self, comments=()):
        out = [BD_TAG, f"lmax {self.lmax}"]
        for L, M, parity, part, v in self.sigma_modes:
            out.append(f"sigma {L} {M} {parity} {part} {_fmt(v)}")
        for L, M, v in self.h_modes:
            out.append(f"h {L} {M} {_fmt(v)}")
        out += [f"# {c}" for c in comments]
        return "\n".join(out) + "\n"


def parse_boundary(text):
    lines = list(_content_lines(text))
    if not lines or " ".join(lines[0][1]) != BD_TAG:
        raise ParseError(lines[0][0] if lines else 1, f"expected header '{BD_TAG}'")
    if len(lines) < 2 or lines[1][1][0] != "lmax" or len(lines[1][1]) != 2:
        raise ParseError(lines[1][0] if len(lines) > 1 else 2, "expected 'lmax <int>'")
    k, f = lines[1]
    lmax = _int(k, f[1])
    if lmax < 0:
        raise ParseError(k, "lmax must be non-negative")
    sig, hm = [], []
    for k, f in lines[2:]:
        if f[0] == "sigma":
            if len(f) != 6:
                raise ParseError(k, "expected 'sigma <L> <M> <even|odd> <c|d> <float>'")
            L, M = _int(k, f[1]), _int(k, f[2])
            _check_mode(k, L, M, lmax)
            parity, part = f[3], f[4]
            if parity not in ("even", "odd") or part not in ("c", "d"):
                raise ParseError(k, f"bad parity/part {parity} {part}")
            if parity == "odd" and part == "d":
                raise ParseError(k, "odd parity has no 'd' part")
            if part == "c" and L < 2:
                raise ParseError(k, "the 'c' part needs L >= 2")
            if parity == "odd" and L < 1:
                raise ParseError(k, "odd parity needs L >= 1")
            sig.append((L, M, parity, part, _float(k, f[5])))
        elif f[0] == "h":
            if len(f) != 4:
                raise ParseError(k, "expected 'h <L> <M> <float>'")
            L, M = _int(k, f[1]), _int(k, f[2])
            _check_mode(k, L, M, lmax)
            hm.append((L, M, _float(k, f[3])))
        else:
            raise ParseError(k, f"unknown record '{f[0]}'")
    return BoundaryFile(lmax, sig, hm)


def _int(k, s):
    try:
        return int(s)
    except ValueError:
        raise ParseError(k, f"expected an integer, got '{s}'") from None


def _float(k, s):
    try:
        v = float(s)
    except ValueError:
        raise ParseError(k, f"expected a number, got '{s}'") from None
    if not np.isfinite(v):
        raise ParseError(k, f"non-finite value '{s}'")
    return v


def _check_mode(k, L, M, lmax):
    if L < 0 or L > lmax:
        raise ParseError(k, f"L={L} outside 0..{lmax}")
    if M < 1 or M > 2 * L + 1:
        raise ParseError(k, f"M={M} outside 1..{2 * L + 1}")


# ---------------------------------------------------------------------------
# solutions
# ---------------------------------------------------------------------------


def dumps_solution(basis, x, comments=()):
    """Solution file text for the unknown vector ``x`` of ``basis``."""
    g = basis.grid
    rad = g.radial
    n = rad.n_r
    out = [SOL_TAG, f"nr {n}", "nodes " + " ".join(_fmt(v) for v in rad.s), f"lmax {g.lmax}"]
    r = [_fmt(v) for v in rad.r]
    for b in basis.blocks:
        prof = {}
        for k, p in enumerate(b["profiles"]):
            u = np.zeros(n)
            u[:-1] = x[b["x0"] + k * (n - 1):b["x0"] + (k + 1) * (n - 1)]
            prof[p] = u
        cols = []
        for p in ("a", "b", "c", "d"):
            if p in prof:
                cols.append(_times_r(rad, prof[p], _R_POWER[(b["parity"], p)]))
            else:
                cols.append(np.zeros(n))
        out.append(f"mode {b['L']} {b['M']} {b['parity']}")
        for j in range(n):
            out.append(" ".join([r[j]] + [_fmt(c[j]) for c in cols]))
        if "phi" in prof:
            out.append(f"lapse {b['L']} {b['M']}")
            for j in range(n):
                out.append(f"{r[j]} {_fmt(prof['phi'][j])}")
    out += [f"# {c}" for c in comments]
    return "\n".join(out) + "\n"


def parse_solution(text):
    """(grid, basis, x, comments) from solution file text."""
    raw = text.splitlines()
    comments = [ln[1:].strip() for ln in raw if ln.startswith("#")]
    lines = list(_content_lines(text))
    if not lines or " ".join(lines[0][1]) != SOL_TAG:
        raise ParseError(lines[0][0] if lines else 1, f"expected header '{SOL_TAG}'")
    try:
        (k1, f1), (k2, f2), (k3, f3) = lines[1:4]
    except ValueError:
        raise ParseError(len(raw), "truncated grid block") from None
    if f1[0] != "nr" or f2[0] != "nodes" or f3[0] != "lmax":
        raise ParseError(k1, "expected grid block 'nr', 'nodes', 'lmax'")
    n = _int(k1, f1[1])
    lmax = _int(k3, f3[1])
    nodes = np.array([_float(k2, v) for v in f2[1:]])
    if len(nodes) != n:
        raise ParseError(k2, f"expected {n} nodes, got {len(nodes)}")
    try:
        grid = Grid.make(n, lmax)
    except ValueError as e:
        raise ParseError(k1, str(e)) from None
    if np.max(np.abs(nodes - grid.radial.s)) > 1e-14:
        raise ParseError(k2, "nodes are not the Chebyshev-Lobatto nodes in s = 1/r")
    rad = grid.radial
    modes = []
    data = {}
    i = 4
    while i < len(lines):
        k, f = lines[i]
        if f[0] == "mode":
            if len(f) != 4 or f[3] not in ("even", "odd"):
                raise ParseError(k, "expected 'mode <L> <M> <parity>'")
            key = (_int(k, f[1]), _int(k, f[2]), f[3])
            _check_mode(k, key[0], key[1], lmax)
            rows = _rows(lines, i + 1, n, 5, k)
            modes.append(key)
            data[key] = rows
            i += n + 1
        elif f[0] == "lapse":
            if len(f) != 3:
                raise ParseError(k, "expected 'lapse <L> <M>'")
            key = (_int(k, f[1]), _int(k, f[2]), "even")
            if key not in data:
                raise ParseError(k, "lapse block without a matching even mode block")
            data[key + ("phi",)] = _rows(lines, i + 1, n, 2, k)
            i += n + 1
        else:
            raise ParseError(k, f"unknown record '{f[0]}'")
    basis = ModeBasis(grid, modes)
    x = np.zeros(basis.size)
    for b in basis.blocks:
        key = (b["L"], b["M"], b["parity"])
        rows = data[key]
        for kk, p in enumerate(b["profiles"]):
            if p == "phi":
                pr = data.get(key + ("phi",))
                u = pr[:, 1] if pr is not None else np.zeros(n)
            else:
                col = "abcd".index(p) + 1
                u = rows[:, col] * rad.s ** _R_POWER[(b["parity"], p)]
            x[b["x0"] + kk * (n - 1):b["x0"] + (kk + 1) * (n - 1)] = u[:-1]
    return grid, basis, x, comments


def _rows(lines, start, n, width, k0):
    if start + n > len(lines):
        raise ParseError(k0, f"block needs {n} rows")
    out = np.empty((n, width))
    for j in range(n):
        k, f = lines[start + j]
        if len(f) != width:
            raise ParseError(k, f"expected {width} columns")
        for c in range(width):
            try:
                out[j, c] = float(f[c])
            except ValueError:
                raise ParseError(k, f"expected a number, got '{f[c]}'") from None
    return out


def load_state(text):
    grid, basis, x, comments = parse_solution(text)
    theta, phi = basis.to_fields(x)
    return MetricState.from_cartesian(grid, theta, phi), basis, x, comments


# ---------------------------------------------------------------------------
# diagnostics log
# ---------------------------------------------------------------------------


def log_line(rec):
    slots = " ".join(f"{v:.6e}" for v in rec["slots"])
    return f"iter {rec['iter']} res {rec['res']:.6e} {slots} omega {rec['omega']:.6e}"


def dumps_state(state, comments=()):
    """Solution file text for any reflection-symmetric state on its grid."""
    basis = ModeBasis.symmetric(state.grid)
    x = basis.from_fields(state.theta.cartesian(), state.phi.values)
    return dumps_solution(basis, x, comments)
