"""Command-line driver: solve, cokernel, verify-linearization and mass."""

import argparse
import contextlib
import logging
import os
import sys
import time

from threadpoolctl import threadpool_limits

from . import __version__
from .fields import Grid, RadialGrid
from .formats import (BD_TAG, SOL_TAG, ParseError, digest, dumps_solution,
                      load_state, log_line, parse_boundary)
from .linear import ModeBasis, adjoint_kernel, l1_deviation
from .solver import (FD_STEPS, SolverConfig, adm_mass, linearization_probe, newton_solve,
                     verify_static)

log = logging.getLogger("staticext")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_VERIFY, EXIT_SYMMETRY, EXIT_MASS = 0, 1, 2, 3, 4, 5


def _limit_threads():
    """Cap BLAS/OpenMP pools at STATICEXT_THREADS, if set."""
    n = os.environ.get("STATICEXT_THREADS")
    if not n:
        return contextlib.nullcontext()
    return threadpool_limits(limits=max(1, int(n)))


def _manifest(command, args, extra=()):
    """Manifest lines embedded in output files.  Timings are logged, not embedded."""
    lines = [f"manifest command {command}", f"manifest version {__version__}",
             f"manifest formats {BD_TAG.replace(' ', '/')} {SOL_TAG.replace(' ', '/')}"]
    for key in sorted(vars(args)):
        if key in ("func", "out", "log", "boundary", "solution"):
            continue
        lines.append(f"manifest config {key} {getattr(args, key)}")
    lines += [f"manifest {e}" for e in extra]
    return lines


class _Timer:
    def __init__(self):
        self.t = {}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.t[name] = time.perf_counter() - self.t0

        return _Ctx()

    def report(self):
        for k, v in self.t.items():
            log.info("timing %s %.3f s", k, v)


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def cmd_solve(args):
    timer = _Timer()
    try:
        with open(args.boundary, "rb") as fh:
            raw = fh.read()
        bfile = parse_boundary(raw.decode("utf-8"))
    except ParseError as e:
        print(f"error: {args.boundary}: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, UnicodeDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    lmax = bfile.lmax if args.lmax is None else args.lmax
    try:
        cfg = SolverConfig(lmax=lmax, n_r=args.nr, delta=args.delta, newton_tol=args.tol,
                           lin_tol=args.lin_tol, max_iter=args.max_iter, damping=args.damping)
        grid = cfg.grid()
        bd = bfile.to_data(grid)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    defects = bd.reflection_defects()
    bad = [k for k, d in enumerate(defects) if d > 1e-12]
    if bad:
        for k in bad:
            print(f"error: data not invariant under x{k + 1} -> -x{k + 1}: deviation {defects[k]:.3e}",
                  file=sys.stderr)
        return EXIT_SYMMETRY

    lines = []
    manifest = _manifest("solve", args, [f"input sha256 {digest(raw)}"])
    with timer("newton"):
        sol = newton_solve(bd, cfg, log=lambda rec: lines.append(log_line(rec)))
    with timer("verify"):
        rep = verify_static(sol)
    with timer("mass"):
        me = adm_mass(sol)
    lines.append(f"mass {me.mode:.12e} {me.flux:.12e}")
    lines.append(f"status {'converged' if sol.converged else 'diverged'}")

    basis = ModeBasis.symmetric(grid)
    _write(args.out, dumps_solution(basis, sol.x, manifest))
    log_path = args.log or args.out + ".log"
    _write(log_path, "\n".join([f"# {m}" for m in manifest] + lines) + "\n")
    vlines = [f"{k} {v:.6e}" for k, v in rep.as_dict().items()]
    vlines.append(f"passed {int(rep.passed)}")
    _write(args.out + ".verify", "\n".join([f"# {m}" for m in manifest] + vlines) + "\n")
    timer.report()
    print(lines[-2])
    print(lines[-1])
    if not sol.converged:
        return EXIT_DIVERGED
    if not rep.passed:
        print("static verification failed:", " ".join(vlines[:-1]), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------------------
# cokernel
# ---------------------------------------------------------------------------


def _expected_dim(L, parity):
    return 1 if L == 1 else 0


def cmd_cokernel(args):
    rad = RadialGrid(args.nr)
    Ls = [args.L] if args.L is not None else range(args.lmax + 1)
    parities = [args.parity] if args.parity else ("even", "odd")
    ok = True
    print("L parity dim gap l1_deviation")
    for L in Ls:
        for parity in parities:
            k = adjoint_kernel(L, parity, rad)
            dev = "-"
            if L == 1 and k.dimension == 1:
                dev = f"{l1_deviation(k, rad):.3e}"
            print(f"{L} {parity} {k.dimension} {k.gap:.3e} {dev}")
            if k.gap < 1e3:
                print(f"warning: singular-value gap {k.gap:.2e} below 1e3 at L={L} {parity}; "
                      f"increase --nr", file=sys.stderr)
            ok &= k.dimension == _expected_dim(L, parity)
    return EXIT_OK if ok else 1


# ---------------------------------------------------------------------------
# verify-linearization
# ---------------------------------------------------------------------------


def cmd_verify_linearization(args):
    grid = Grid.make(args.nr, args.lmax)
    steps = (args.eps,) if args.eps is not None else FD_STEPS
    rep = linearization_probe(grid, args.seed, steps)
    print("step " + " ".join(f"slot{k + 1}" for k in range(5)))
    for t, e in zip(rep.steps, rep.errors):
        print(f"{t:.0e} " + " ".join(f"{v:.3e}" for v in e))
    if args.eps is not None:
        return EXIT_OK
    exact = rep.exact_slots()
    print("order " + " ".join("exact" if ex else f"{o:.3f}" for ex, o in zip(exact, rep.orders)))
    return EXIT_OK if rep.passed else 1


# ---------------------------------------------------------------------------
# mass
# ---------------------------------------------------------------------------


def cmd_mass(args):
    try:
        with open(args.solution, encoding="utf-8") as fh:
            state = load_state(fh.read())[0]
    except ParseError as e:
        print(f"error: {args.solution}: {e}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    me = adm_mass(state)
    print(f"mass {me.mode:.12e} {me.flux:.12e}")
    print(f"spread {me.spread:.3e} relative {me.relative_spread():.3e}")
    if me.relative_spread() > 1e-3 and me.spread > 1e-12:
        print("error: mass extractions disagree; the grid is too coarse to resolve the "
              "asymptotic region", file=sys.stderr)
        return EXIT_MASS
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="staticext",
                                description="Static vacuum extensions of boundary data on the unit sphere.")
    p.add_argument("-v", "--verbose", action="store_true", help="log timings to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve for a static extension of boundary data")
    s.add_argument("--boundary", required=True, help="boundary-data file")
    s.add_argument("--out", required=True, help="solution file")
    s.add_argument("--log", help="diagnostics log (default: OUT.log)")
    s.add_argument("--lmax", type=int, help="angular resolution (default: lmax of the file)")
    s.add_argument("--nr", type=int, default=48)
    s.add_argument("--delta", type=float, default=-0.5)
    s.add_argument("--tol", type=float, default=1e-10, help="Newton residual tolerance")
    s.add_argument("--lin-tol", type=float, default=1e-8, help="GMRES relative tolerance")
    s.add_argument("--max-iter", type=int, default=12)
    s.add_argument("--damping", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0, help="recorded in the manifest")
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("cokernel", help="kernel dimensions of the adjoint mode systems")
    c.add_argument("--L", type=int)
    c.add_argument("--parity", choices=("even", "odd"))
    c.add_argument("--lmax", type=int, default=8)
    c.add_argument("--nr", type=int, default=48)
    c.set_defaults(func=cmd_cokernel)

    v = sub.add_parser("verify-linearization", help="finite-difference check of the linearization")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--eps", type=float, help="single step; print raw errors only")
    v.add_argument("--lmax", type=int, default=8)
    v.add_argument("--nr", type=int, default=48)
    v.set_defaults(func=cmd_verify_linearization)

    m = sub.add_parser("mass", help="ADM mass of a solution file")
    m.add_argument("solution")
    m.set_defaults(func=cmd_mass)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    with _limit_threads():
        return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
