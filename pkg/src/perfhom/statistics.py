"""Monte Carlo estimators: energies, pairing gaps, stationary moments, tables.

All estimators take per-path summaries of shape (steps + 1, paths, ...)
as produced by :func:`perfhom.spde.run_lockstep` and return means together
with standard errors computed from the per-path values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit

from .errors import GridMismatchError, InsufficientBurnInError


def mean_se(x, axis=0):
    """Mean and standard error along ``axis`` (paths)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    m = x.mean(axis=axis)
    if n < 2:
        return m, np.zeros_like(m)
    return m, x.std(axis=axis, ddof=1) / math.sqrt(n)


def cumulative_right(y, dt):
    """Running sum_{j=1..n} dt * y_j along axis 0 (zero at n = 0)."""
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    out[1:] = np.cumsum(dt * y[1:], axis=0)
    return out


def cumulative_trapezoid(y, dt):
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * dt * (y[1:] + y[:-1]), axis=0)
    return out


def time_integral(y, dt, weight=None):
    """Trapezoid integral over the whole grid along axis 0."""
    y = np.asarray(y, dtype=float)
    w = np.full(y.shape[0], dt)
    w[0] = w[-1] = 0.5 * dt
    if weight is not None:
        w = w * weight
    return np.tensordot(w, y, axes=(0, 0))


@dataclass
class EnsembleResult:
    times: np.ndarray
    summaries: dict
    master_seed: int
    path_seeds: list
    label: str = ""

    @property
    def n_paths(self):
        return len(self.path_seeds)

    def mean(self, name):
        return mean_se(self.summaries[name], axis=1)[0]

    def stderr(self, name):
        return mean_se(self.summaries[name], axis=1)[1]


@dataclass
class EnergySeries:
    times: np.ndarray
    E: np.ndarray
    se: np.ndarray
    E_ito: np.ndarray
    se_ito: np.ndarray
    paths: np.ndarray = field(repr=False, default=None)      # direct energy per path
    paths_ito: np.ndarray = field(repr=False, default=None)

    def rows(self):
        return [(float(t), float(a), float(b), float(c), float(d))
                for t, a, b, c, d in zip(self.times, self.E, self.se, self.E_ito, self.se_ito)]


def energy_series(l2, dirichlet, work, dt, g_norms_sq, theta=1.0, times=None, rule="implicit"):
    """Direct and Ito-identity energy estimates.

    direct:  theta/2 |u(t)|^2 + int_0^t a(u)
    Ito:     theta/2 |u(0)|^2 + int_0^t (f, u) + t/(2 theta) sum_i |g_i|^2

    ``rule="implicit"`` sums the time integrals with the right-endpoint
    rule that the drift-implicit scheme satisfies exactly (its discrete
    energy balance); ``"trapezoid"`` is available for comparison.
    ``work[n]`` must hold (f(t_{n-1}), u^n), the forcing actually applied on
    step n.
    """
    l2 = np.asarray(l2, dtype=float)
    n = l2.shape[0]
    if np.shape(dirichlet)[0] != n or np.shape(work)[0] != n:
        raise GridMismatchError("energy inputs have different time grids")
    integ = cumulative_right if rule == "implicit" else cumulative_trapezoid
    t = dt * np.arange(n) if times is None else np.asarray(times)
    direct = 0.5 * theta * l2 + integ(dirichlet, dt)
    noise = 0.5 * float(np.sum(g_norms_sq)) / theta
    ito = 0.5 * theta * l2[0][None, :] + integ(work, dt) + (t * noise)[:, None]
    E, se = mean_se(direct, axis=1)
    Ei, sei = mean_se(ito, axis=1)
    return EnergySeries(t, E, se, Ei, sei, direct, ito)


def energy_series_micro(result: EnsembleResult, problem, rule="implicit"):
    s = result.summaries
    return energy_series(s["l2"], s["dirichlet"], s["work"], problem.dt, problem.g_norms_sq,
                         1.0, result.times, rule)


def energy_series_macro(result: EnsembleResult, problem, rule="implicit"):
    s = result.summaries
    return energy_series(s["l2"], s["dirichlet"], s["work"], problem.dt, problem.g_norms_sq,
                         problem.theta, result.times, rule)


def ito_allowance(times, dt, deterministic_gap, g_energy, theta=1.0, factor=1.5):
    """O(dt) bias allowance for the Ito cross-check.

    Deterministic part: the exact direct-minus-Ito discrepancy of the
    noise-free scheme (numerical dissipation).  Noise part: the scheme's
    per-unit-time energy defect for additive noise is at most
    ``1.5 dt sum_i a(g_i) / theta^2`` (drift-implicit Euler on each mode).
    """
    t = np.asarray(times, dtype=float)
    det = np.abs(np.asarray(deterministic_gap, dtype=float))
    return det + factor * dt * t * float(np.sum(g_energy)) / theta ** 2


def ito_check(series: EnergySeries, allowance):
    """Return (passed, worst ratio) for |direct - Ito| <= 2 SE_comb + allowance."""
    diff = series.paths - series.paths_ito
    m, se = mean_se(diff, axis=1)
    comb = np.sqrt(series.se ** 2 + series.se_ito ** 2)
    band = 2 * comb + np.asarray(allowance)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(band > 0, np.abs(m) / band, np.where(np.abs(m) > 0, np.inf, 0.0))
    return bool(np.all(np.abs(m) <= band * (1 + 1e-12) + 1e-14)), float(ratio.max())


def sup_energy_gap(micro: EnergySeries, macro: EnergySeries):
    """sup_t |E^eps(t) - E^0(t)| with the standard error of the paired
    per-path difference at the maximizing time."""
    if micro.paths.shape != macro.paths.shape:
        raise GridMismatchError("energy series are on different grids or ensembles")
    diff = micro.paths - macro.paths
    m, se = mean_se(diff, axis=1)
    k = int(np.argmax(np.abs(m)))
    return float(abs(m[k])), float(se[k]), float(micro.times[k])


def weak_pairing_gap(micro_pairings, macro_pairings, times, psi, theta=None):
    """Gaps |E int psi (u~_eps, phi_k) - theta E int psi (u, phi_k)|.

    ``macro_pairings`` are (u, phi_k) on the macro mesh; pass ``theta`` to
    apply the volume-fraction weight here, or ``None`` if the values are
    already weighted.  Standard errors come from per-path differences
    (common random numbers).
    """
    a = np.asarray(micro_pairings, dtype=float)
    b = np.asarray(macro_pairings, dtype=float)
    if a.shape != b.shape:
        raise GridMismatchError(f"pairing arrays differ: {a.shape} vs {b.shape}")
    t = np.asarray(times, dtype=float)
    if len(t) != a.shape[0]:
        raise GridMismatchError("time grid does not match the pairing records")
    w = np.asarray(psi(t) if callable(psi) else psi, dtype=float)
    dt = t[1] - t[0] if len(t) > 1 else 1.0
    if theta is not None:
        b = theta * b
    diff = time_integral(a - b, dt, w)   # (paths, k)
    m, se = mean_se(diff, axis=0)
    return np.abs(m), se, m


def strong_gap(per_path_sq, joint_times):
    """E int_0^T ||P u_eps - u||^2 dt from per-path squared distances."""
    x = np.asarray(per_path_sq, dtype=float)
    t = np.asarray(joint_times, dtype=float)
    if len(t) != x.shape[0]:
        raise GridMismatchError("joint records and times differ in length")
    if len(t) < 2:
        return 0.0, 0.0
    # trapezoid weights on a possibly strided grid
    w = np.zeros(len(t))
    w[:-1] += 0.5 * np.diff(t)
    w[1:] += 0.5 * np.diff(t)
    vals = w @ x
    m, se = mean_se(vals, axis=0)
    return float(m), float(se)


# ---------------------------------------------------------------------------
# well-posedness bound
# ---------------------------------------------------------------------------

def est1_lhs(l2, dirichlet, dt, theta=1.0):
    """Per-path theta |u(t)|^2 + sum_{j<=n} dt a(u^j)."""
    return theta * np.asarray(l2) + cumulative_right(dirichlet, dt)


def est1_bound(times, u0_sq, f_sq, lam, C_T, theta=1.0):
    """theta |u0|^2 + t |f|^2 / lam + t C_T / theta (time-independent f)."""
    t = np.asarray(times, dtype=float)
    return theta * u0_sq + t * f_sq / lam + t * C_T / theta


# ---------------------------------------------------------------------------
# stationary behaviour
# ---------------------------------------------------------------------------

def _exp_model(t, c, gamma, s):
    return c * np.exp(-gamma * t) + s


def fit_exponential(t, y, gamma0=None):
    """Least-squares fit y ~ c exp(-gamma t) + s; returns (c, gamma, s, rms residual)."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    s0 = float(np.mean(y[len(y) // 2:]))
    c0 = float(y[0] - s0)
    if gamma0 is None:
        # time for the excess to fall by e, read off the data
        ex = np.abs(y - s0)
        below = np.flatnonzero(ex < abs(c0) / math.e)
        gamma0 = 1.0 / max(t[below[0]] - t[0], t[1] - t[0]) if len(below) else 1.0 / (t[-1] - t[0])
    p, _ = curve_fit(_exp_model, t - t[0], y, p0=(c0, gamma0, s0), maxfev=20000)
    c, gamma, s = (float(v) for v in p)
    c = c * math.exp(gamma * t[0])  # refer amplitude to t = 0
    resid = float(np.sqrt(np.mean((y - _exp_model(t, c, gamma, s)) ** 2)))
    return c, gamma, s, resid


@dataclass
class StationaryEstimate:
    name: str
    micro: float
    micro_se: float
    macro: float
    macro_se: float
    gamma: float

    @property
    def combined_se(self):
        return math.hypot(self.micro_se, self.macro_se)

    @property
    def z(self):
        cs = self.combined_se
        return abs(self.micro - self.macro) / cs if cs > 0 else (0.0 if self.micro == self.macro else math.inf)


def stationary_mean(samples, times, burn_in):
    """Per-path time averages over [burn_in, T] then mean and SE across paths.

    ``samples`` has shape (records, paths) or (records, paths, k).
    """
    t = np.asarray(times, dtype=float)
    x = np.asarray(samples, dtype=float)
    sel = t >= burn_in - 1e-12
    if sel.sum() < 2:
        raise InsufficientBurnInError("no samples after burn-in")
    tt = t[sel]
    w = np.zeros(len(tt))
    w[:-1] += 0.5 * np.diff(tt)
    w[1:] += 0.5 * np.diff(tt)
    avg = np.tensordot(w / w.sum(), x[sel], axes=(0, 0))
    return mean_se(avg, axis=0)


def check_burn_in(c, gamma, burn_in, noise_floor):
    """Raise unless the fitted transient at the burn-in time is below the noise floor."""
    if not gamma > 0:
        raise InsufficientBurnInError(f"fitted decay rate {gamma:.3g} is not positive")
    left = abs(c) * math.exp(-gamma * burn_in)
    if left > noise_floor:
        raise InsufficientBurnInError(
            f"transient {left:.3e} at burn-in t={burn_in:g} exceeds noise floor {noise_floor:.3e}")
    return left


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

def strictly_decreasing(values, ses, k=2.0):
    """values[i] - values[i+1] > k * sqrt(se_i^2 + se_{i+1}^2) for all i.

    Returns None when fewer than two values are given (check not applicable).
    """
    if len(values) < 2:
        return None
    return all(values[i] - values[i + 1] > k * math.hypot(ses[i], ses[i + 1])
               for i in range(len(values) - 1))


def convergence_rows(table):
    """Flatten {eps: {metric: (value, se)}} into sorted CSV rows."""
    rows = []
    for eps in sorted(table, reverse=True):
        for metric in table[eps]:
            v, se = table[eps][metric]
            rows.append((float(eps), metric, float(v), float(se)))
    return rows
