import math

import numpy as np
import pytest

from perfhom.cell import cell_from_text
from perfhom.cli import EXIT_OK, EXIT_VALIDATION, main
from perfhom.config import Expression, manifest_text, parse_config, parse_coefficient
from perfhom.errors import ConfigError
from perfhom.fem import assemble_mass
from perfhom.geometry import Rectangle, rectangle_mesh

SMALL = """\
[geometry]
hole = none
eps = 1/4 1/8
micro_h = 1/32
macro_h = 1/32
[noise]
modes = 4
[problem]
T = 0.05
dt = 0.01
T_long = 1
dt_long = 0.05
burn_in = 0.5
[experiment]
paths = 4
tests = 3
stationary = no
strong_every = 1
"""

DETERMINISTIC = """\
[geometry]
hole = none
eps = 1/4
macro_h = 1/16
[noise]
modes = 0
[problem]
f = 0
u0 = sin(pi*x)*sin(pi*y)
T = 0.1
dt = 0.001
[experiment]
paths = 2
tests = 2
"""


def _write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# -- expressions -------------------------------------------------------------

def test_expression_evaluates():
    ex = Expression("2*x + sin(pi*y)**2 - exp(0)", ("x", "y"))
    assert ex(1.0, 0.5) == pytest.approx(2.0)
    f = Expression("3", ("x", "y")).as_field()
    assert np.array_equal(f(np.zeros((4, 2))), np.full(4, 3.0))


@pytest.mark.parametrize("text", ["__import__('os')", "x.real", "[x]", "lambda: 1", "x if y else 1",
                                  "open", "sin(x, y)", "'a'", "x < y", "x +", "z"])
def test_expression_rejects_unsafe_or_unknown(text):
    with pytest.raises(ConfigError):
        Expression(text, ("x", "y"))


def test_coefficient_presets():
    assert parse_coefficient("identity", {}, (1, 1)).ellipticity() == pytest.approx(1.0)
    c = parse_coefficient("diag(2, 3)", {}, (1, 1))
    assert np.allclose(c(np.array([[0.3, 0.4]]))[0], np.diag([2.0, 3.0]))
    with pytest.raises(ConfigError):
        parse_coefficient("diag(2)", {}, (1, 1))
    with pytest.raises(ConfigError):
        parse_coefficient("matrix", {"a11": "1"}, (1, 1))
    with pytest.raises(ConfigError):
        parse_coefficient("nonsense", {}, (1, 1))


# -- config parsing -------------------------------------------------------------

def test_defaults_parse():
    c = parse_config("")
    assert c.eps == (0.25, 0.125, 0.0625) and c.macro_h == 1 / 128 and c.dt == 1e-3
    assert c.seed == 20240601 and c.paths == 200


def test_fraction_values():
    c = parse_config("[geometry]\nmicro_h = 1/32\n")
    assert c.micro_h == 1 / 32


@pytest.mark.parametrize("text, where", [
    ("[geometry]\nhole = none\neps = 0.1 0.2\n", "line 3"),
    ("[problem]\nT = 1\ndt = 0.3\n", "line 3"),
    ("[noise]\n\nmodes = -1\n", "line 3"),
    ("[experiment]\npaths = many\n", "line 2"),
    ("[problem]\nT_long = 2\nburn_in = 5\n", "line 3"),
])
def test_config_errors_name_the_line(text, where):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert where in str(exc.value)


@pytest.mark.parametrize("text", ["[bogus]\nx = 1\n", "[geometry]\ncolour = red\n", "not an ini",
                                  "[noise]\nC_T = 0.001\n", "[geometry]\nhole = disk 0.5 0.5 0.7\n"])
def test_config_rejects_invalid(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_manifest_is_a_valid_config():
    c = parse_config(SMALL)
    text = manifest_text(c, "compare")
    assert text.startswith("# perfhom run manifest: compare")
    again = parse_config(text)
    assert again.sha256 == c.sha256 and again.text == c.text


# -- command line ------------------------------------------------------------------

def test_zero_matrix_coefficient_is_validation_error(tmp_path, capsys):
    cfg = _write(tmp_path, "[coefficient]\npreset = matrix\na11 = 0\na12 = 0\na21 = 0\na22 = 0\n")
    assert main(["cell", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    assert "error" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["cell", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path)]) == EXIT_VALIDATION


def test_cell_no_hole_identity(tmp_path):
    out = tmp_path / "o"
    assert main(["cell", "--config", _write(tmp_path, "[geometry]\nhole = none\n"), "--out", str(out)]) == EXIT_OK
    sol = cell_from_text((out / "cell.txt").read_text())
    assert np.allclose(sol.B, np.eye(2), atol=1e-12) and sol.theta == pytest.approx(1.0, abs=1e-14)
    for name in ("corrector.txt", "manifest.txt"):
        assert (out / name).exists()


def test_cell_disk_theta(tmp_path):
    out = tmp_path / "o"
    cfg = _write(tmp_path, "[cell]\nh = 0.02\nrefine = 0.08 0.04 0.02\n")
    assert main(["cell", "--config", cfg, "--out", str(out)]) == EXIT_OK
    sol = cell_from_text((out / "cell.txt").read_text())
    assert abs(sol.theta - (1 - math.pi / 16)) < 1e-3
    assert len((out / "refinement.csv").read_text().splitlines()) == 4


def test_macro_needs_cell_artifact(tmp_path, capsys):
    out = tmp_path / "o"
    cfg = _write(tmp_path, SMALL)
    assert main(["simulate", "--which", "macro", "--config", cfg, "--out", str(out)]) == EXIT_VALIDATION
    assert "perfhom cell" in capsys.readouterr().err
    # a cell file from other geometry is rejected too
    other = _write(tmp_path, "[geometry]\nhole = disk 0.5 0.5 0.2\n", "other.ini")
    assert main(["cell", "--config", other, "--out", str(out)]) == EXIT_OK
    assert main(["simulate", "--which", "macro", "--config", cfg, "--out", str(out)]) == EXIT_VALIDATION


def test_micro_eps_must_be_listed(tmp_path):
    cfg = _write(tmp_path, SMALL)
    assert main(["simulate", "--eps", "0.3", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_VALIDATION


def test_macro_deterministic_energy(tmp_path):
    """No forcing, no noise: the energy starts at |u0_h|^2 / 2 (about 1/8) and
    the implicit scheme only loses the O(dt) numerical dissipation."""
    out = tmp_path / "o"
    cfg = _write(tmp_path, DETERMINISTIC)
    assert main(["cell", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert main(["simulate", "--which", "macro", "--config", cfg, "--out", str(out)]) == EXIT_OK
    rows = np.loadtxt(out / "energy_macro.csv", delimiter=",", skiprows=1)
    E, se = rows[:, 1], rows[:, 2]
    assert not se.any()
    m = rectangle_mesh(Rectangle(), 1 / 16)
    u0 = np.sin(np.pi * m.nodes[:, 0]) * np.sin(np.pi * m.nodes[:, 1])
    assert E[0] == pytest.approx(0.5 * u0 @ assemble_mass(m).matrix @ u0, rel=1e-12)
    assert abs(E[0] - 0.125) < 0.125 * 0.02
    assert np.all(np.diff(E) <= 1e-15) and (E[0] - E[-1]) / E[0] < 0.02


def test_simulate_is_reproducible(tmp_path):
    cfg = _write(tmp_path, SMALL)
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert main(["simulate", "--eps", "0.125", "--config", cfg, "--out", str(o)]) == EXIT_OK
    for name in ("energy_micro_eps0.125.csv", "summary_micro_eps0.125.csv", "diagnostics_micro_eps0.125.txt", "manifest.txt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_threaded_runs_repeat_and_match_serial(tmp_path):
    """Bit-identity is promised at threads=1; a fixed thread count is still
    deterministic and agrees with the serial run to round-off."""
    cfg = _write(tmp_path, SMALL)
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    main(["simulate", "--config", cfg, "--out", str(a)])
    for o in (b, c):
        main(["simulate", "--config", cfg, "--out", str(o), "--threads", "2"])
    name = "energy_micro_eps0.25.csv"
    assert (b / name).read_bytes() == (c / name).read_bytes()
    x, y = (np.loadtxt(o / name, delimiter=",", skiprows=1) for o in (a, b))
    assert np.allclose(x, y, rtol=1e-12, atol=1e-15)


def test_compare_no_hole_passes_and_rerun_from_manifest(tmp_path):
    out = tmp_path / "o"
    cfg = _write(tmp_path, SMALL)
    assert main(["cell", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert main(["compare", "--config", cfg, "--out", str(out)]) == EXIT_OK
    report = (out / "report.txt").read_text()
    assert report.strip().endswith("overall: PASS")
    first = (out / "convergence.csv").read_bytes()
    rerun = tmp_path / "r"
    manifest = _write(tmp_path, (out / "manifest.txt").read_text(), "manifest.ini")
    assert main(["cell", "--config", manifest, "--out", str(rerun)]) == EXIT_OK
    assert main(["compare", "--config", manifest, "--out", str(rerun)]) == EXIT_OK
    assert (rerun / "convergence.csv").read_bytes() == first


def test_compare_single_eps_reports_not_applicable(tmp_path):
    out = tmp_path / "o"
    cfg = _write(tmp_path, SMALL.replace("eps = 1/4 1/8", "eps = 1/4"))
    assert main(["cell", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert main(["compare", "--config", cfg, "--out", str(out)]) == EXIT_OK
    report = (out / "report.txt").read_text()
    assert "energy_gap_decreasing: N/A" in report
    assert "pairing_gap_decreasing[1]: N/A" in report
