"""Experiment families and the comparison / stationary / OU drivers."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from . import statistics as st
from .cell import solve_cell
from .coefficients import Coefficient
from .fem import assemble_mass
from .geometry import (Disk, PeriodicCell, Rectangle, build_perforated_mesh, fill_extend,
                       interpolation_matrix, rectangle_mesh)
from .spde import (AssembledProblem, Forcing, NoiseModel, ProblemSpec, macro_problem, micro_problem,
                   _run_chunk, obs_energy, obs_l2, obs_pairings, obs_work, run_lockstep, sine_indices, sine_mode)


def default_u0(x):
    x = np.atleast_2d(x)
    a, b = x[:, 0], x[:, 1]
    return 30.0 * a ** 2 * (1 - a) * b * (1 - b) ** 2 * np.exp(b)


def default_f0(x):
    x = np.atleast_2d(x)
    a, b = x[:, 0], x[:, 1]
    return (1 + a) * (2 - b) + 2 * a * b ** 2


def bump_weight(T):
    """psi(t) = sin^2(pi t / T): smooth, vanishing at both ends."""
    return lambda t: np.sin(np.pi * np.asarray(t) / T) ** 2


@dataclass
class Family:
    """A perforated-domain experiment: geometry, data, discretization."""

    domain: Rectangle = field(default_factory=Rectangle)
    cell: PeriodicCell = field(default_factory=lambda: PeriodicCell(hole=Disk((0.5, 0.5), 0.25)))
    eps_list: tuple = (0.25, 0.125, 0.0625)
    cell_h: float = 0.125          # template mesh size in cell units (micro h = eps * cell_h)
    macro_h: float = 1 / 128
    u0: object = default_u0
    f0: object = default_f0
    noise: NoiseModel = None
    T: float = 1.0
    dt: float = 1e-3
    n_tests: int = 6
    boundary_cells: str = "perforate"
    micro_h: float | None = None   # absolute micro mesh size overriding eps * cell_h

    def __post_init__(self):
        if self.noise is None:
            self.noise = NoiseModel.sine_family(16, 1.0, 1.5, self.domain, seed=20240601)
        self.eps_list = tuple(float(e) for e in self.eps_list)
        if list(self.eps_list) != sorted(self.eps_list, reverse=True):
            raise ValueError("eps list must be sorted in descending order")

    def test_functions(self):
        return [sine_mode(j, k, self.domain) for j, k in sine_indices(self.n_tests)]

    def micro_mesh(self, eps):
        h = eps * self.cell_h if self.micro_h is None else self.micro_h
        return build_perforated_mesh(self.domain, self.cell, eps, h, self.boundary_cells)

    def macro_mesh(self):
        return rectangle_mesh(self.domain, self.macro_h)


def default_family(**kw):
    return Family(**kw)


def no_hole_family(coefficient=None, **kw):
    """Unperforated domain with a constant coefficient: micro and macro coincide."""
    coef = coefficient or Coefficient.identity()
    kw.setdefault("cell", PeriodicCell(coefficient=coef))
    return Family(**kw)


def homogenized_data(family, h=None):
    """Cell solve on the same template that tiles the micro meshes.

    Using the template resolution makes (B, theta) the exact limit of the
    discrete micro problems, so mesh error in the cell does not masquerade
    as a homogenization gap.
    """
    return solve_cell(family.cell, family.cell_h if h is None else h)


def smallest_eigenvalue(problem):
    """Smallest generalized eigenvalue of (K, M) on the free DOFs."""
    K, M = problem.K.tocsc(), problem.M.tocsc()
    if K.shape[0] <= 50:
        import scipy.linalg as sl
        return float(sl.eigh(K.toarray(), M.toarray(), eigvals_only=True)[0])
    vals = spla.eigsh(K, k=1, M=M, sigma=0.0, which="LM", return_eigenvectors=False)
    return float(vals.min())


def _data_norms(family, problems):
    """Largest discrete |u0|^2 and |f0|^2 over the meshes in use."""
    def sq(fn, p):
        if fn is None:
            return 0.0
        v = np.asarray(fn(p.mesh.nodes), dtype=float)
        return float(v @ (p.M_full @ v))
    return (max(sq(family.u0, p) for p in problems), max(sq(family.f0, p) for p in problems))


def _with_zero_noise(problem):
    spec = dataclasses.replace(problem.spec, noise=NoiseModel.zero(problem.spec.noise.seed))
    return AssembledProblem(spec)


# ---------------------------------------------------------------------------
# finite-horizon comparison (energies, pairings, strong gaps)
# ---------------------------------------------------------------------------

@dataclass
class ComparisonReport:
    eps_list: tuple
    times: np.ndarray
    energy: dict                 # label -> EnergySeries ("macro" and eps)
    ito: dict                    # label -> (passed, worst ratio)
    energy_gap: dict             # eps -> (value, se, t_at_sup)
    pairing_gap: dict            # eps -> (gaps, ses)
    strong_gap: dict             # eps -> (value, se)
    est1: dict                   # label -> (passed, worst ratio)
    est1_constant: dict
    theta: float
    B: np.ndarray
    n_paths: int
    master_seed: int
    solver_residual: float

    def table(self):
        t = {}
        for eps in self.eps_list:
            row = {"energy_sup_gap": self.energy_gap[eps][:2]}
            gaps, ses = self.pairing_gap[eps]
            for k, (g, s) in enumerate(zip(gaps, ses), start=1):
                row[f"pairing_gap_{k}"] = (g, s)
            if eps in self.strong_gap:
                row["strong_l2_gap"] = self.strong_gap[eps]
            t[eps] = row
        return st.convergence_rows(t)

    def energy_decreasing(self, k=2.0):
        vals = [self.energy_gap[e][0] for e in self.eps_list]
        ses = [self.energy_gap[e][1] for e in self.eps_list]
        return st.strictly_decreasing(vals, ses, k)

    def pairings_decreasing(self, k=2.0):
        """Per test function: gap at the largest eps exceeds the gap at the
        smallest eps by more than k combined standard errors."""
        if len(self.eps_list) < 2:
            return None
        a, b = self.eps_list[0], self.eps_list[-1]
        ga, sa = self.pairing_gap[a]
        gb, sb = self.pairing_gap[b]
        return [bool(x - y > k * math.hypot(s1, s2)) for x, y, s1, s2 in zip(ga, gb, sa, sb)]


def _strong_observer(micro_idx, macro_idx, interp, bg_mass, meshes):
    def fn(problems, states, n):
        pm = problems[macro_idx]
        um = pm.expand(states[macro_idx])
        out = []
        for i, I, Mb, mesh in zip(micro_idx, interp, bg_mass, meshes):
            p = problems[i]
            filled = fill_extend(mesh, p.expand(states[i]))
            d = filled - I @ um
            out.append(np.einsum("ij,ij->j", d, Mb @ d))
        return np.column_stack(out)
    return fn


def run_comparison(family: Family, n_paths=200, cell=None, threads=1, strong_every=10,
                   path_seeds=None, progress=None):
    """Micro ensembles for every eps plus one macro ensemble, all driven by
    the same increments, and every estimator built from them."""
    cell = cell or homogenized_data(family)
    seeds = list(range(n_paths)) if path_seeds is None else list(path_seeds)
    tests = family.test_functions()
    meshes = [family.micro_mesh(e) for e in family.eps_list]
    mmesh = family.macro_mesh()
    micro = [AssembledProblem(micro_problem(m, family.f0, family.noise, family.u0, family.T, family.dt))
             for m in meshes]
    macro = AssembledProblem(macro_problem(mmesh, cell.B, cell.theta, family.f0, family.noise,
                                           family.u0, family.T, family.dt))
    problems = micro + [macro]
    base = {"l2": obs_l2, "dirichlet": obs_energy, "work": obs_work}
    observers = [dict(base, pair=obs_pairings(tests)) for _ in micro]
    observers.append(dict(base, pair=obs_pairings(tests, scale=cell.theta)))
    joint = None
    if strong_every:
        interp = [interpolation_matrix(mmesh, m.background.nodes) for m in meshes]
        bg_mass = [assemble_mass(m.background).matrix for m in meshes]
        joint = {"strong": _strong_observer(list(range(len(micro))), len(micro), interp, bg_mass, meshes)}
    recs, jrec, jsteps, _, res = run_lockstep(problems, seeds, observers, joint, strong_every or 1,
                                              threads=threads)
    times = macro.spec.times

    # noise-free companions for the deterministic part of the Ito allowance
    det = [_with_zero_noise(p) for p in problems]
    det_recs, _, _, _, _ = run_lockstep(det, [0], [dict(base) for _ in det])

    labels = list(family.eps_list) + ["macro"]
    energy, ito = {}, {}
    for lab, p, r, d, dp in zip(labels, problems, recs, det_recs, det):
        theta = p.theta
        series = st.energy_series(r["l2"], r["dirichlet"], r["work"], p.dt, p.g_norms_sq, theta, times)
        dseries = st.energy_series(d["l2"], d["dirichlet"], d["work"], p.dt, dp.g_norms_sq, theta, times)
        allow = st.ito_allowance(times, p.dt, dseries.E - dseries.E_ito, p.g_energy, theta)
        energy[lab] = series
        ito[lab] = st.ito_check(series, allow)

    energy_gap = {e: st.sup_energy_gap(energy[e], energy["macro"]) for e in family.eps_list}
    psi = bump_weight(family.T)
    pairing_gap = {}
    for e, r in zip(family.eps_list, recs):
        g, s, _ = st.weak_pairing_gap(r["pair"], recs[-1]["pair"], times, psi)
        pairing_gap[e] = (g, s)
    strong = {}
    if joint:
        jt = jsteps * family.dt
        for k, e in enumerate(family.eps_list):
            strong[e] = st.strong_gap(jrec["strong"][:, :, k], jt)

    # well-posedness bound with constants assembled from the inputs
    u0_sq, f_sq = _data_norms(family, problems)
    lam_micro = min(smallest_eigenvalue(p) for p in micro)
    lam_macro = smallest_eigenvalue(macro) / cell.theta   # homogenized operator relative to theta M
    lam = min(lam_micro, lam_macro)
    C_T = family.noise.C_T or 0.0
    est1, consts = {}, {"u0_sq": u0_sq, "f_sq": f_sq, "lambda": lam, "C_T": C_T}
    bound = st.est1_bound(times, u0_sq, f_sq, lam, C_T)
    for lab, p, r in zip(labels, problems, recs):
        lhs = st.est1_lhs(r["l2"], r["dirichlet"], p.dt, p.theta)
        m = lhs.mean(axis=1)
        # macro: theta|u|^2 + int a <= theta * (same constant) with rescaled data
        b = bound if lab != "macro" else cell.theta * bound
        est1[lab] = (bool(np.all(m <= b * (1 + 1e-12))), float(np.max(m / np.where(b > 0, b, 1.0))))
    return ComparisonReport(family.eps_list, times, energy, ito, energy_gap, pairing_gap, strong,
                            est1, consts, float(cell.theta), np.asarray(cell.B), len(seeds),
                            family.noise.seed, float(np.max(res)))


# ---------------------------------------------------------------------------
# long-time behaviour
# ---------------------------------------------------------------------------

@dataclass
class StationaryReport:
    estimates: list              # StationaryEstimate rows
    gamma: float
    fit: tuple                   # (c, gamma, s, rms residual) for the micro |P u|^2 transient
    burn_in: float
    transient_left: float
    est1: dict
    times: np.ndarray
    micro_series: np.ndarray     # ensemble mean of |P u_eps|^2 at record times
    macro_series: np.ndarray
    n_paths: int

    def rows(self):
        return [(e.name, e.micro, e.micro_se, e.macro, e.macro_se, self.gamma) for e in self.estimates]


def run_stationary(family: Family, eps=0.125, n_paths=200, T_long=20.0, dt=0.01, burn_in=2.0,
                   record_every=5, cell=None, threads=1, path_seeds=None, macro_h=None):
    """Long runs of the micro (fill-extended) and macro equations with
    time-independent data; stationary moments from per-path time averages
    over [burn_in, T_long].

    The macro mesh defaults to the micro mesh size at this eps (but never
    finer than ``family.macro_h``): the long run compares moments at the
    level of their standard errors, and a finer macro mesh would dominate
    the cost without changing the comparison.
    """
    cell = cell or homogenized_data(family)
    seeds = list(range(n_paths)) if path_seeds is None else list(path_seeds)
    pmesh = family.micro_mesh(eps)
    if macro_h is None:
        macro_h = max(family.macro_h, eps * family.cell_h if family.micro_h is None else family.micro_h)
    mmesh = rectangle_mesh(family.domain, macro_h)
    micro = AssembledProblem(micro_problem(pmesh, family.f0, family.noise, family.u0, T_long, dt))
    macro = AssembledProblem(macro_problem(mmesh, cell.B, cell.theta, family.f0, family.noise,
                                           family.u0, T_long, dt))
    phis = family.test_functions()[:2]
    bg = pmesh.background
    Mb = assemble_mass(bg).matrix
    Phi_b = np.column_stack([phi(bg.nodes) for phi in phis])
    MPhi_b = (Mb @ Phi_b).T
    Mm = macro.M_full
    MPhi_m = (Mm @ np.column_stack([phi(mmesh.nodes) for phi in phis])).T

    def functionals(problems, states, n):
        u = fill_extend(pmesh, problems[0].expand(states[0]))
        v = problems[1].expand(states[1])
        return np.column_stack([np.einsum("ij,ij->j", u, Mb @ u), (MPhi_b @ u).T,
                                np.einsum("ij,ij->j", v, Mm @ v), (MPhi_m @ v).T])

    base = {"l2": obs_l2, "dirichlet": obs_energy}
    recs, jrec, jsteps, _, _ = run_lockstep([micro, macro], seeds, [dict(base), dict(base)],
                                            {"F": functionals}, record_every, threads=threads)
    F = jrec["F"]                       # (records, paths, 6)
    t = jsteps * dt
    names = ["norm_sq", "mode_1_mean", "mode_2_mean"]
    micro_series = F[:, :, 0].mean(axis=1)
    macro_series = F[:, :, 3].mean(axis=1)
    if not np.any(micro_series):
        # identically zero: no transient to fit
        c, gamma, s, resid = 0.0, math.inf, 0.0, 0.0
    else:
        c, gamma, s, resid = st.fit_exponential(t, micro_series)
    ests = []
    for k, name in enumerate(names):
        mu, mse = st.stationary_mean(F[:, :, k], t, burn_in)
        Mu, Mse = st.stationary_mean(F[:, :, 3 + k], t, burn_in)
        ests.append(st.StationaryEstimate(name, float(mu), float(mse), float(Mu), float(Mse), gamma))
    left = st.check_burn_in(c, gamma, burn_in, ests[0].micro_se)

    # est1 along the long runs
    u0_sq, f_sq = _data_norms(family, (micro, macro))
    lam = min(smallest_eigenvalue(micro), smallest_eigenvalue(macro) / cell.theta)
    times = micro.spec.times
    bound = st.est1_bound(times, u0_sq, f_sq, lam, family.noise.C_T or 0.0)
    est1 = {}
    for lab, p, r in (("micro", micro, recs[0]), ("macro", macro, recs[1])):
        m = st.est1_lhs(r["l2"], r["dirichlet"], dt, p.theta).mean(axis=1)
        b = bound if lab == "micro" else cell.theta * bound
        est1[lab] = (bool(np.all(m <= b * (1 + 1e-12))), float(np.max(m / np.where(b > 0, b, 1.0))))
    return StationaryReport(ests, gamma, (c, gamma, s, resid), burn_in, left, est1, t,
                            micro_series, macro_series, len(seeds))


# ---------------------------------------------------------------------------
# single-mode Ornstein-Uhlenbeck reduction
# ---------------------------------------------------------------------------

@dataclass
class OUReport:
    dts: tuple
    second_moment: dict          # dt -> (mean, se)
    exact: float
    exact_discrete: float
    differences: tuple           # ((d1, se1), (d2, se2))
    slope: float
    n_paths: int


def ou_problem(h=1 / 16, sigma=1.0, T=0.5, dt=1e-3, seed=20240601, domain=None):
    domain = domain or Rectangle()
    mesh = rectangle_mesh(domain, h)
    noise = NoiseModel([sine_mode(1, 1, domain, sigma)], seed=seed)
    return ProblemSpec(mesh, None, Forcing(), noise, None, T, dt, 1.0, "micro", "ou")


def run_ou(n_paths=2000, dts=(4e-3, 2e-3, 1e-3), T=0.5, h=1 / 16, sigma=1.0, seed=20240601, threads=1):
    """E[(u(T), phi_1)^2] at several step sizes sharing one Brownian path
    per sample (the finest grid drives the coarser ones)."""
    dts = tuple(sorted(dts, reverse=True))
    fine = dts[-1]
    phi = sine_mode(1, 1)
    seeds = list(range(n_paths))
    finals = {}
    for dt in dts:
        r = int(round(dt / fine))
        spec = ou_problem(h, sigma, T, dt, seed)
        p = AssembledProblem(spec)
        obs = {"pair": obs_pairings([phi])}
        recs, _, _, _, _ = _run_chunk([p], seeds, [obs], None, 1, r)
        finals[dt] = recs[0]["pair"][-1, :, 0] ** 2
    lam = 2 * math.pi ** 2
    exact = sigma ** 2 * (1 - math.exp(-2 * lam * T)) / (2 * lam)
    x = fine * lam
    n = int(round(T / fine))
    exact_discrete = sigma ** 2 * fine * (1 - (1 + x) ** (-2 * n)) / ((1 + x) ** 2 - 1)
    moments = {dt: tuple(float(v) for v in st.mean_se(finals[dt])) for dt in dts}
    diffs = []
    for a, b in zip(dts[:-1], dts[1:]):
        m, se = st.mean_se(finals[a] - finals[b])
        diffs.append((float(m), float(se)))
    slope = math.log(diffs[0][0] / diffs[1][0]) / math.log(dts[0] / dts[1]) if len(diffs) >= 2 else float("nan")
    return OUReport(dts, moments, exact, exact_discrete, tuple(diffs), slope, n_paths)


# ---------------------------------------------------------------------------
# single ensemble (micro at one eps, or macro)
# ---------------------------------------------------------------------------

@dataclass
class SimulationReport:
    label: str
    energy: object               # EnergySeries
    ito: tuple                   # (passed, worst ratio)
    est1: tuple                  # (passed, worst ratio)
    est1_constant: dict
    times: np.ndarray
    l2: tuple                    # (mean, se) of |u(t)|^2
    pairings: tuple              # (mean, se), shape (steps + 1, tests)
    n_paths: int
    solver_residual: float

    def summary_rows(self):
        m, s = self.l2
        pm, ps = self.pairings
        return [(float(t), float(a), float(b), *map(float, pm[i]), *map(float, ps[i]))
                for i, (t, a, b) in enumerate(zip(self.times, m, s))]


def run_single(family: Family, which="micro", eps=None, n_paths=200, cell=None, threads=1, path_seeds=None):
    """One ensemble with energy, Ito and well-posedness diagnostics."""
    seeds = list(range(n_paths)) if path_seeds is None else list(path_seeds)
    if which == "micro":
        eps = family.eps_list[0] if eps is None else float(eps)
        p = AssembledProblem(micro_problem(family.micro_mesh(eps), family.f0, family.noise, family.u0,
                                           family.T, family.dt))
        theta, scale, label = 1.0, 1.0, f"micro_eps{eps:g}"
    elif which == "macro":
        if cell is None:
            raise ValueError("macro simulation needs the cell solution (B, theta)")
        p = AssembledProblem(macro_problem(family.macro_mesh(), cell.B, cell.theta, family.f0,
                                           family.noise, family.u0, family.T, family.dt))
        theta, scale, label = float(cell.theta), float(cell.theta), "macro"
    else:
        raise ValueError("which must be 'micro' or 'macro'")
    base = {"l2": obs_l2, "dirichlet": obs_energy, "work": obs_work}
    obs = dict(base, pair=obs_pairings(family.test_functions(), scale=scale))
    recs, _, _, _, res = run_lockstep([p], seeds, [obs], threads=threads)
    r = recs[0]
    times = p.spec.times
    series = st.energy_series(r["l2"], r["dirichlet"], r["work"], p.dt, p.g_norms_sq, theta, times)
    dp = _with_zero_noise(p)
    d = run_lockstep([dp], [0], [dict(base)])[0][0]
    dseries = st.energy_series(d["l2"], d["dirichlet"], d["work"], p.dt, dp.g_norms_sq, theta, times)
    ito = st.ito_check(series, st.ito_allowance(times, p.dt, dseries.E - dseries.E_ito, p.g_energy, theta))
    u0_sq, f_sq = _data_norms(family, [p])
    lam = smallest_eigenvalue(p) / theta
    consts = {"u0_sq": u0_sq, "f_sq": f_sq, "lambda": lam, "C_T": family.noise.C_T or 0.0}
    bound = theta * st.est1_bound(times, u0_sq, f_sq, lam, consts["C_T"])
    m = st.est1_lhs(r["l2"], r["dirichlet"], p.dt, theta).mean(axis=1)
    est1 = (bool(np.all(m <= bound * (1 + 1e-12))), float(np.max(m / np.where(bound > 0, bound, 1.0))))
    return SimulationReport(label, series, ito, est1, consts, times, st.mean_se(r["l2"], axis=1),
                            st.mean_se(r["pair"], axis=1), len(seeds), float(np.max(res)))
