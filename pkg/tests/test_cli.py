import numpy as np
import pytest

from staticext.cli import main
from staticext.fields import Grid
from staticext.formats import (BoundaryFile, ParseError, dumps_state, load_state, parse_boundary,
                               parse_solution)
from staticext.geometry import MetricState, static_residual
from staticext.solver import residual_norm, schwarzschild_boundary_data, schwarzschild_state

SMALL = ["--lmax", "2", "--nr", "20"]
# the static checks are sampled on every node, so they need a finer radial grid than the solve
FINE = ["--lmax", "2", "--nr", "48"]


def _bd_file(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _schw_text(m, lmax=2):
    bd = schwarzschild_boundary_data(m, Grid.make(20, lmax))
    return BoundaryFile.from_data(bd, tol=1e-14).dumps(["isotropic Schwarzschild"])


def _last_residual(log_text):
    its = [ln for ln in log_text.splitlines() if ln.startswith("iter ")]
    return float(its[-1].split()[3])


def test_boundary_file_round_trip():
    text = "staticext-bd v1\nlmax 4\nsigma 2 1 even c 1e-3  # comment\nh 0 1 -0.25\n"
    bf = parse_boundary(text)
    assert bf.sigma_modes == [(2, 1, "even", "c", 1e-3)]
    assert bf.h_modes == [(0, 1, -0.25)]
    again = parse_boundary(bf.dumps())
    assert again.sigma_modes == bf.sigma_modes and again.h_modes == bf.h_modes


def test_boundary_projection_recovers_modes():
    grid = Grid.make(12, 4)
    bf = BoundaryFile(4, [(2, 1, "even", "c", 1e-3), (4, 3, "even", "d", -2e-3),
                          (3, 4, "odd", "c", 5e-4)], [(2, 1, 0.1)])
    back = BoundaryFile.from_data(bf.to_data(grid), tol=1e-14)
    assert len(back.sigma_modes) == 3 and len(back.h_modes) == 1
    for a, b in zip(sorted(bf.sigma_modes), sorted(back.sigma_modes)):
        assert a[:4] == b[:4] and abs(a[4] - b[4]) < 1e-14
    assert abs(back.h_modes[0][2] - 0.1) < 1e-14


def test_schwarzschild_file_encodes_the_data():
    bf = parse_boundary(_schw_text(0.1))
    # sigma - round = (1.05^4 - 1) g on the sphere, which is the L = 0 'd' mode
    assert len(bf.sigma_modes) == 1 and bf.sigma_modes[0][:4] == (0, 1, "even", "d")
    assert abs(bf.sigma_modes[0][4] - 0.21550625) < 1e-14


@pytest.mark.parametrize("text,line", [
    ("staticext-bd v2\nlmax 2\n", 1),
    ("staticext-bd v1\nlmax two\n", 2),
    ("staticext-bd v1\nlmax 2\nh 0 1 0.1\nsigma 3 1 even c 0.1\n", 4),
    ("staticext-bd v1\nlmax 2\n# note\nsigma 2 1 odd d 0.1\n", 4),
    ("staticext-bd v1\nlmax 2\nsigma 1 1 even c 0.1\n", 3),
    ("staticext-bd v1\nlmax 2\nh 2 6 0.1\n", 3),
    ("staticext-bd v1\nlmax 2\nh 0 1 nan\n", 3),
    ("staticext-bd v1\nlmax 2\nbogus 1\n", 3),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ParseError) as e:
        parse_boundary(text)
    assert e.value.line == line
    assert str(e.value).startswith(f"line {line}:")


def test_solve_malformed_input_exits_1(tmp_path, capsys):
    bd = _bd_file(tmp_path, "bad.bd", "staticext-bd v1\nlmax 2\nsigma 2 1 even c x\n")
    assert main(["solve", "--boundary", bd, "--out", str(tmp_path / "o.dat")] + SMALL) == 1
    assert "line 3" in capsys.readouterr().err


def test_solve_missing_file_exits_1(tmp_path):
    assert main(["solve", "--boundary", str(tmp_path / "none.bd"), "--out",
                 str(tmp_path / "o.dat")]) == 1


def test_solve_non_symmetric_exits_4(tmp_path, capsys):
    # cos(2 phi) P_2^2 ~ x^2 - y^2 is symmetric, cos(phi) P_2^1 ~ x z is not
    bd = _bd_file(tmp_path, "odd.bd", "staticext-bd v1\nlmax 2\nsigma 2 2 even c 1e-3\n")
    assert main(["solve", "--boundary", bd, "--out", str(tmp_path / "o.dat")] + SMALL) == 4
    err = capsys.readouterr().err
    assert "x1 -> -x1" in err and "x3 -> -x3" in err and "x2 -> -x2" not in err
    assert not (tmp_path / "o.dat").exists()


def test_solve_round_data(tmp_path, capsys):
    bd = _bd_file(tmp_path, "round.bd", "staticext-bd v1\nlmax 2\n")
    out = str(tmp_path / "sol.dat")
    assert main(["solve", "--boundary", bd, "--out", out] + SMALL) == 0
    log = (tmp_path / "sol.dat.log").read_text().splitlines()
    assert log[-1] == "status converged"
    assert log[-2].split()[1:] == ["0.000000000000e+00"] * 2
    state = load_state((tmp_path / "sol.dat").read_text())[0]
    assert np.max(np.abs(state.theta.values)) == 0.0
    assert "passed 1" in (tmp_path / "sol.dat.verify").read_text()


def test_solve_schwarzschild_and_round_trip(tmp_path):
    bd = _bd_file(tmp_path, "schw.bd", _schw_text(0.1))
    out = tmp_path / "sol.dat"
    assert main(["solve", "--boundary", bd, "--out", str(out), "--log", str(tmp_path / "run.log"),
                 "--tol", "1e-9"] + FINE) == 0
    log = (tmp_path / "run.log").read_text()
    mass = [ln for ln in log.splitlines() if ln.startswith("mass ")][0].split()
    assert abs(float(mass[1]) - 0.1) < 1e-4 and abs(float(mass[2]) - 0.1) < 1e-4
    # reload and recompute the logged residual from the files alone
    grid, basis, x, comments = parse_solution(out.read_text())
    bdata = parse_boundary(open(bd).read()).to_data(grid)
    res, _ = residual_norm(basis, x, bdata, -0.5)
    assert abs(res - _last_residual(log)) <= 1e-12
    # the packed state adds only rounding
    state = load_state(out.read_text())[0]
    F = basis.equations(static_residual(state, bdata))
    assert abs(float(np.max(basis.slot_norms(F, -0.5))) - res) <= 1e-11
    assert any(c.startswith("manifest input sha256") for c in comments)


def test_outputs_are_deterministic(tmp_path):
    bd = _bd_file(tmp_path, "schw.bd", _schw_text(0.05))
    texts = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        out.mkdir()
        assert main(["solve", "--boundary", bd, "--out", str(out / "sol.dat"), "--seed", "3"]
                    + FINE) == 0
        texts.append([(out / n).read_bytes() for n in ("sol.dat", "sol.dat.log", "sol.dat.verify")])
    assert texts[0] == texts[1]


def test_truncation_limited_verification_exits_3(tmp_path, capsys):
    bd = _bd_file(tmp_path, "schw.bd", _schw_text(0.1))
    out = tmp_path / "sol.dat"
    assert main(["solve", "--boundary", bd, "--out", str(out)] + SMALL) == 3
    assert "static verification failed" in capsys.readouterr().err
    assert (tmp_path / "sol.dat.verify").read_text().splitlines()[-1] == "passed 0"


def test_non_converging_run_exits_2(tmp_path):
    bd = _bd_file(tmp_path, "schw.bd", _schw_text(0.2))
    out = tmp_path / "sol.dat"
    assert main(["solve", "--boundary", bd, "--out", str(out), "--max-iter", "1"] + SMALL) == 2
    assert (tmp_path / "sol.dat.log").read_text().splitlines()[-1] == "status diverged"


def test_mass_of_injected_field(tmp_path, capsys):
    p = tmp_path / "u4.dat"
    p.write_text(dumps_state(schwarzschild_state(Grid.make(48, 2), 0.2)))
    assert main(["mass", str(p)]) == 0
    vals = capsys.readouterr().out.split()
    assert abs(float(vals[1]) - 0.2) <= 1e-6 and abs(float(vals[2]) - 0.2) <= 1e-6


def test_mass_of_flat_file(tmp_path, capsys):
    p = tmp_path / "flat.dat"
    p.write_text(dumps_state(MetricState.flat(Grid.make(16, 2))))
    assert main(["mass", str(p)]) == 0
    assert capsys.readouterr().out.splitlines()[0] == \
        "mass 0.000000000000e+00 0.000000000000e+00"


def test_mass_on_truncated_grid_exits_5(tmp_path, capsys):
    p = tmp_path / "coarse.dat"
    p.write_text(dumps_state(schwarzschild_state(Grid.make(8, 2), 0.2)))
    assert main(["mass", str(p)]) == 5
    assert "too coarse" in capsys.readouterr().err


def test_mass_rejects_corrupt_solution(tmp_path, capsys):
    text = dumps_state(MetricState.flat(Grid.make(8, 2))).splitlines()
    text[6] = "1.0 0.0 zero 0.0 0.0"
    p = tmp_path / "bad.dat"
    p.write_text("\n".join(text) + "\n")
    assert main(["mass", str(p)]) == 1
    assert "line 7" in capsys.readouterr().err


def test_solution_file_round_trip():
    grid = Grid.make(12, 2)
    st = schwarzschild_state(grid, 0.1)
    g2, basis, x, _ = parse_solution(dumps_state(st, ["note"]))
    th, ph = basis.to_fields(x)
    assert np.max(np.abs(th - st.theta.cartesian())) < 1e-14
    assert np.max(np.abs(ph - st.phi.values)) < 1e-14


def test_cokernel_command(capsys):
    assert main(["cokernel", "--lmax", "3", "--nr", "32"]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    dims = {(r.split()[0], r.split()[1]): int(r.split()[2]) for r in rows}
    assert dims[("1", "even")] == 1 and dims[("1", "odd")] == 1
    assert sum(dims.values()) == 2


def test_verify_linearization_command(capsys):
    assert main(["verify-linearization", "--seed", "7", "--lmax", "4", "--nr", "20"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1].startswith("order ")
    orders = out[-1].split()[1:]
    assert len(orders) == 5
    assert all(o == "exact" or float(o) >= 1.8 for o in orders)


def test_verify_linearization_single_step(capsys):
    assert main(["verify-linearization", "--seed", "7", "--eps", "1e-2", "--lmax", "4",
                 "--nr", "20"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 2 and not any(ln.startswith("order") for ln in out)
