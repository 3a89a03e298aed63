"""Command-line front end: ``perfhom cell|simulate|compare``."""

from __future__ import annotations

import argparse
import configparser
import hashlib
import math
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .cell import cell_from_text, solve_cell
from .config import load_config, manifest_text
from .errors import (ConfigError, DimensionError, GeometryError, InsufficientBurnInError, MeshError,
                     MissingArtifactError, PerfhomError)
from .formats import field_to_text, write_csv

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_FAIL = 0, 2, 3, 4

CELL_FILE = "cell.txt"
ENERGY_HEADER = ["t", "E", "stderr", "E_ito", "stderr_ito"]
CONVERGENCE_HEADER = ["epsilon", "metric", "value", "stderr"]
STATIONARY_HEADER = ["functional", "micro_est", "micro_se", "macro_est", "macro_se", "gamma_fit"]


def _cell_key(config):
    """Hash of the config entries the cell solve depends on."""
    p = configparser.ConfigParser(interpolation=None)
    p.optionxform = str
    p.read_string(config.text)
    parts = [f"cell={p['geometry']['cell']}", f"hole={p['geometry']['hole']}",
             f"h={config.cell_solve_h!r}"]
    parts += [f"{k}={v}" for k, v in p["coefficient"].items()]
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _verdict(ok):
    return "N/A" if ok is None else ("PASS" if ok else "FAIL")


def _write_manifest(out, config, command, extra=()):
    (out / "manifest.txt").write_text(manifest_text(config, command, extra))


def _load_cell(config, out):
    path = out / CELL_FILE
    if not path.exists():
        raise MissingArtifactError(f"{path} not found: run 'perfhom cell' with this config first")
    text = path.read_text()
    key = _cell_key(config)
    if f"# cell_key {key}" not in text:
        raise MissingArtifactError(f"{path} was produced from different geometry/coefficient "
                                   "settings: rerun 'perfhom cell'")
    return cell_from_text(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_cell(config, out):
    sol = solve_cell(config.cell, config.cell_solve_h)
    (out / CELL_FILE).write_text(f"# cell_key {_cell_key(config)}\n" + sol.to_text())
    (out / "corrector.txt").write_text(field_to_text(sol.mesh, {"chi1": sol.chi[0], "chi2": sol.chi[1]}))
    print(f"theta = {sol.theta:.12g}")
    print("B = [[{:.12g}, {:.12g}], [{:.12g}, {:.12g}]]".format(*sol.B.ravel()))
    print(f"ellipticity = {sol.ellipticity:.6g}, residuals = {', '.join(f'{r:.2e}' for r in sol.residuals)}")
    extra = []
    if config.refine:
        rows, b11 = [], []
        for h in config.refine:
            s = solve_cell(config.cell, h)
            rows.append((float(h), *map(float, s.B.ravel()), float(s.theta), float(max(s.residuals))))
            b11.append(s.B[0, 0])
        write_csv(out / "refinement.csv", ["h", "B11", "B12", "B21", "B22", "theta", "residual"], rows)
        hs = list(config.refine)
        for i in range(len(hs) - 2):
            d1, d2 = b11[i] - b11[i + 1], b11[i + 1] - b11[i + 2]
            if d1 != 0 and d2 != 0 and d1 / d2 > 0:
                order = math.log(d1 / d2) / math.log(hs[i] / hs[i + 1])
                print(f"observed order of B11 from h={hs[i]:g},{hs[i + 1]:g},{hs[i + 2]:g}: {order:.3f}")
    _write_manifest(out, config, "cell", extra)
    return EXIT_OK if sol.ellipticity > 0 else EXIT_NUMERICAL


def cmd_simulate(config, out, which, eps=None, threads=1):
    fam = config.family()
    cell = None
    if which == "micro":
        eps = config.eps[0] if eps is None else float(eps)
        if not any(math.isclose(eps, e, rel_tol=1e-12) for e in config.eps):
            raise ConfigError(f"--eps {eps:g} is not in the config eps list {list(config.eps)}")
    else:
        cell = _load_cell(config, out)
    rep = ex.run_single(fam, which, eps, config.paths, cell, threads)
    tag = rep.label
    write_csv(out / f"energy_{tag}.csv", ENERGY_HEADER, rep.energy.rows())
    k = config.tests
    header = ["t", "l2", "l2_stderr"] + [f"pair_{i}" for i in range(1, k + 1)] + \
             [f"pair_{i}_stderr" for i in range(1, k + 1)]
    write_csv(out / f"summary_{tag}.csv", header, rep.summary_rows())
    lines = [f"ito_identity: {_verdict(rep.ito[0])} (worst ratio to band {rep.ito[1]:.3g})",
             f"est1_bound: {_verdict(rep.est1[0])} (worst ratio {rep.est1[1]:.3g})",
             f"solver_residual: {rep.solver_residual:.2e}"]
    (out / f"diagnostics_{tag}.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    _write_manifest(out, config, f"simulate --which {which}" + (f" --eps {eps:g}" if eps else ""))
    return EXIT_OK if rep.ito[0] and rep.est1[0] else EXIT_FAIL


def _all_small(values, tol):
    return all(abs(v) <= tol for v in values)


def compare_checks(config, rep, stat=None):
    """(name, verdict, detail) rows against the thresholds in ``config``."""
    k, tol = config.k_monotone, config.gap_tol
    rows = []
    gaps = [rep.energy_gap[e][0] for e in rep.eps_list]
    mono = rep.energy_decreasing(k)
    if mono is not None and not mono and _all_small(gaps, tol):
        mono = True
    rows.append(("energy_gap_decreasing", mono, " ".join(f"{g:.3e}" for g in gaps)))
    for lab, (ok, ratio) in rep.ito.items():
        rows.append((f"ito_identity[{lab}]", ok, f"worst ratio {ratio:.3g}"))
    pm = rep.pairings_decreasing(k)
    for i in range(config.tests):
        ok = None if pm is None else pm[i]
        col = [rep.pairing_gap[e][0][i] for e in rep.eps_list]
        if ok is False and _all_small(col, tol):
            ok = True
        rows.append((f"pairing_gap_decreasing[{i + 1}]", ok, " ".join(f"{g:.3e}" for g in col)))
    for lab, (ok, ratio) in rep.est1.items():
        rows.append((f"est1_bound[{lab}]", ok, f"worst ratio {ratio:.3g}"))
    if stat is not None:
        for e in stat.estimates:
            ok = e.z <= config.k_stationary or abs(e.micro - e.macro) <= tol
            rows.append((f"stationary[{e.name}]", ok, f"micro {e.micro:.5g} +- {e.micro_se:.2g}, "
                         f"macro {e.macro:.5g} +- {e.macro_se:.2g}, z {e.z:.2f}"))
        rows.append(("stationary_gamma_positive", stat.gamma > 0, f"gamma {stat.gamma:.4g}"))
        for lab, (ok, ratio) in stat.est1.items():
            rows.append((f"est1_bound[stationary {lab}]", ok, f"worst ratio {ratio:.3g}"))
    return rows


def cmd_compare(config, out, threads=1):
    if not config.eps:
        raise ConfigError("compare needs a nonempty eps list")
    cell = _load_cell(config, out)
    fam = config.family()
    rep = ex.run_comparison(fam, config.paths, cell, threads, config.strong_every)
    write_csv(out / "convergence.csv", CONVERGENCE_HEADER, rep.table())
    for lab, series in rep.energy.items():
        tag = "macro" if lab == "macro" else f"eps{lab:g}"
        write_csv(out / f"energy_{tag}.csv", ENERGY_HEADER, series.rows())
    stat = None
    if config.stationary:
        sfam = config.family()
        stat = ex.run_stationary(sfam, config.stationary_eps, config.stationary_paths, config.T_long,
                                 config.dt_long, config.burn_in, config.record_every, cell, threads)
        write_csv(out / "stationary.csv", STATIONARY_HEADER, stat.rows())
    rows = compare_checks(config, rep, stat)
    overall = all(ok is not False for _, ok, _ in rows)
    lines = [f"{name}: {_verdict(ok)} ({detail})" for name, ok, detail in rows]
    lines.append(f"overall: {'PASS' if overall else 'FAIL'}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    _write_manifest(out, config, "compare")
    return EXIT_OK if overall else EXIT_FAIL


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="perfhom", description="Homogenization experiments for "
                                "stochastic heat equations in periodically perforated domains.")
    p.add_argument("command", choices=["cell", "simulate", "compare"])
    p.add_argument("--config", required=True, help="configuration file ([section] key = value)")
    p.add_argument("--eps", type=float, help="micro scale for 'simulate --which micro'")
    p.add_argument("--which", choices=["micro", "macro"], default="micro")
    p.add_argument("--out", default="perfhom_out", help="output directory (default: perfhom_out)")
    p.add_argument("--threads", type=int, help="worker threads (overrides [run] threads)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        threads = config.threads if args.threads is None else args.threads
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "cell":
            return cmd_cell(config, out)
        if args.command == "simulate":
            return cmd_simulate(config, out, args.which, args.eps, threads)
        return cmd_compare(config, out, threads)
    except (ConfigError, GeometryError, MeshError, MissingArtifactError) as exc:
        print(f"perfhom: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except InsufficientBurnInError as exc:
        print(f"perfhom: stationary experiment: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (PerfhomError, np.linalg.LinAlgError, DimensionError) as exc:
        print(f"perfhom: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
