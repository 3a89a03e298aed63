"""Semi-implicit Euler-Maruyama for the micro and macro stochastic heat equations.

Both equations are written as

    theta_w M du = (-K u + M f) dt + M sum_i g_i dW_i,

with ``theta_w = 1`` on the perforated domain and ``theta_w = vartheta``
for the homogenized equation.  Dirichlet nodes on the outer boundary are
eliminated; hole boundaries carry the natural condition.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, DimensionError, SolverError
from .fem import DofMap, assemble_mass, assemble_stiffness, is_symmetric, solve_spd
from .geometry import DIRICHLET_OUTER, PerforatedMesh, Rectangle

NORMAL_BLOCK = 1024


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

def sine_mode(j, k, domain=Rectangle(), amplitude=1.0):
    """amplitude * L2-normalized Dirichlet eigenfunction sin(j pi x) sin(k pi y) of ``domain``."""
    lx, ly = domain.extents
    c = amplitude * 2.0 / math.sqrt(lx * ly)

    def mode(x):
        x = np.atleast_2d(x)
        return c * np.sin(j * math.pi * (x[:, 0] - domain.x0) / lx) * np.sin(k * math.pi * (x[:, 1] - domain.y0) / ly)

    mode.indices = (j, k)
    mode.amplitude = amplitude
    mode.norm_sq = amplitude ** 2
    mode.grad_norm_sq = amplitude ** 2 * math.pi ** 2 * ((j / lx) ** 2 + (k / ly) ** 2)
    mode.eigenvalue = math.pi ** 2 * ((j / lx) ** 2 + (k / ly) ** 2)
    return mode


def sine_indices(count):
    """First ``count`` index pairs ordered by (j^2 + k^2, j)."""
    n = int(math.ceil(math.sqrt(2 * count))) + 2
    pairs = sorted(((j, k) for j in range(1, n + 1) for k in range(1, n + 1)),
                   key=lambda p: (p[0] ** 2 + p[1] ** 2, p[0]))
    return pairs[:count]


class NoiseModel:
    """Finite family of spatial modes g_i driven by independent Wiener processes.

    Increments of mode ``i`` on path ``p`` come from a Philox stream keyed by
    ``(seed, p, i)``; step ``n`` reads entry ``n % 1024`` of counter block
    ``n // 1024``, so any (path, step, mode) is addressable directly.
    """

    def __init__(self, modes, seed=0, C_T=None, C_star=None, name="custom"):
        self.modes = list(modes)
        self.seed = int(seed)
        self.name = name
        self.C_T = self.exact_hs_norm_sq() * 1.1 if C_T is None and self.modes else C_T
        self.C_star = C_star
        if self.C_star is None and self.modes and all(hasattr(g, "grad_norm_sq") for g in self.modes):
            self.C_star = 1.1 * sum(g.grad_norm_sq for g in self.modes)
        for v, label in ((self.C_T, "C_T"), (self.C_star, "C_star")):
            if v is not None and not v > 0:
                raise ConfigError(f"declared bound {label} must be positive")

    @property
    def m(self):
        return len(self.modes)

    @classmethod
    def sine_family(cls, m=16, sigma=1.0, p=1.5, domain=Rectangle(), seed=0, C_T=None, C_star=None):
        modes = [sine_mode(j, k, domain, sigma * (i + 1) ** (-p)) for i, (j, k) in enumerate(sine_indices(m))]
        return cls(modes, seed, C_T, C_star, name=f"sine(m={m},sigma={sigma:g},p={p:g})")

    @classmethod
    def zero(cls, seed=0):
        return cls([], seed, name="zero")

    def exact_hs_norm_sq(self):
        if all(hasattr(g, "norm_sq") for g in self.modes):
            return float(sum(g.norm_sq for g in self.modes))
        return None

    def scaled(self, c):
        """Same streams, every mode multiplied by ``c``."""
        modes = []
        for g in self.modes:
            s = _scaled_func(g, c)
            modes.append(s)
        C_T = None if self.C_T is None else self.C_T * c * c
        C_star = None if self.C_star is None else self.C_star * c * c
        return NoiseModel(modes, self.seed, C_T or None, C_star or None, name=f"{c:g}*{self.name}")

    def nodal(self, nodes):
        if not self.modes:
            return np.zeros((len(nodes), 0))
        return np.column_stack([np.asarray(g(nodes), dtype=float) for g in self.modes])

    def check_bounds(self, mesh, mass=None):
        """Discrete sum of ||g_i||^2 on ``mesh``; raises if it exceeds C_T."""
        M = assemble_mass(mesh).matrix if mass is None else mass
        G = self.nodal(mesh.nodes)
        total = float(np.einsum("ij,ij->", G, M @ G))
        if self.C_T is not None and total > self.C_T:
            raise ConfigError(f"noise intensity {total:.6g} exceeds declared C_T {self.C_T:.6g}")
        return total


def _scaled_func(g, c):
    def s(x):
        return c * np.asarray(g(x), dtype=float)
    for attr in ("indices", "eigenvalue"):
        if hasattr(g, attr):
            setattr(s, attr, getattr(g, attr))
    if hasattr(g, "norm_sq"):
        s.norm_sq = c * c * g.norm_sq
    if hasattr(g, "grad_norm_sq"):
        s.grad_norm_sq = c * c * g.grad_norm_sq
    return s


@lru_cache(maxsize=4096)
def _normal_block(seed, path, mode, block):
    key = np.random.SeedSequence([seed, path, mode]).generate_state(2, dtype=np.uint64)
    bg = np.random.Philox(key=key, counter=np.array([0, 0, 0, block], dtype=np.uint64))
    out = np.random.Generator(bg).standard_normal(NORMAL_BLOCK)
    out.setflags(write=False)
    return out


def standard_normals(seed, path, mode, start, count):
    """Entries ``start .. start+count-1`` of the (seed, path, mode) normal stream."""
    out = np.empty(count)
    pos = 0
    while pos < count:
        n = start + pos
        b, off = divmod(n, NORMAL_BLOCK)
        take = min(NORMAL_BLOCK - off, count - pos)
        out[pos:pos + take] = _normal_block(seed, path, mode, b)[off:off + take]
        pos += take
    return out


def wiener_increments(noise: NoiseModel, dt, step, path_seed, substeps=1):
    """Vector of m increments over [step*dt, (step+1)*dt] for one path.

    With ``substeps = r`` the step is made of r consecutive entries of the
    underlying stream, each scaled by sqrt(dt / r); runs at dt and dt / r
    driven by the same seed therefore see the same Brownian path.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    r = int(substeps)
    out = np.empty(noise.m)
    for i in range(noise.m):
        z = standard_normals(noise.seed, int(path_seed), i, step * r, r)
        out[i] = math.sqrt(dt / r) * z.sum()
    return out


class IncrementSource:
    """Batched increments for many paths, shape (steps, paths, modes)."""

    def __init__(self, noise: NoiseModel, path_seeds, dt, substeps=1):
        self.noise = noise
        self.path_seeds = [int(p) for p in path_seeds]
        self.dt = float(dt)
        self.r = int(substeps)

    def block(self, start, count):
        m, r = self.noise.m, self.r
        out = np.empty((count, len(self.path_seeds), m))
        for pi, p in enumerate(self.path_seeds):
            for i in range(m):
                z = standard_normals(self.noise.seed, p, i, start * r, count * r)
                out[:, pi, i] = z.reshape(count, r).sum(axis=1)
        out *= math.sqrt(self.dt / r)
        return out


# ---------------------------------------------------------------------------
# problem description
# ---------------------------------------------------------------------------

class Forcing:
    """Separable forcing f(x, t) = spatial(x) * temporal(t)."""

    def __init__(self, spatial=None, temporal=None):
        self.spatial = spatial
        self.temporal = temporal

    @property
    def time_independent(self):
        return self.temporal is None

    @property
    def is_zero(self):
        return self.spatial is None

    def __call__(self, x, t=0.0):
        x = np.atleast_2d(x)
        if self.spatial is None:
            return np.zeros(len(x))
        v = np.asarray(self.spatial(x), dtype=float)
        return v if self.temporal is None else v * float(self.temporal(t))

    def scaled(self, c):
        if self.spatial is None:
            return self
        sp_ = self.spatial
        return Forcing(lambda x: c * np.asarray(sp_(x), dtype=float), self.temporal)


@dataclass
class ProblemSpec:
    """One stochastic heat equation on a mesh with outer Dirichlet boundary."""

    mesh: object
    coefficient: object = None
    forcing: Forcing = field(default_factory=Forcing)
    noise: NoiseModel = field(default_factory=NoiseModel.zero)
    u0: object = None
    T: float = 1.0
    dt: float = 1e-3
    theta_w: float = 1.0
    kind: str = "micro"
    label: str = ""

    def __post_init__(self):
        if not self.dt > 0 or not self.T >= 0:
            raise ConfigError("need dt > 0 and T >= 0")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ConfigError(f"dt={self.dt:g} does not divide T={self.T:g}")
        if not 0 < self.theta_w <= 1:
            raise ConfigError("theta_w must lie in (0, 1]")
        if not isinstance(self.forcing, Forcing):
            self.forcing = Forcing(self.forcing)

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))

    @property
    def times(self):
        return self.dt * np.arange(self.n_steps + 1)


def micro_problem(pmesh: PerforatedMesh, f0=None, noise=None, u0=None, T=1.0, dt=1e-3, label=None):
    """Equation on D_eps: coefficient a(x/eps), forcing and noise restricted from D."""
    coef = pmesh.cell.coefficient.oscillating(pmesh.eps, pmesh.domain.origin)
    return ProblemSpec(pmesh, coef, Forcing(f0) if not isinstance(f0, Forcing) else f0,
                       noise or NoiseModel.zero(), u0, T, dt, 1.0, "micro",
                       label or f"micro eps={pmesh.eps:g}")


def macro_problem(mesh, B, theta, f0=None, noise=None, u0=None, T=1.0, dt=1e-3, label="macro"):
    """Homogenized equation ``theta du = (div(B grad u) + theta f0) dt + theta g dW``.

    Forcing and noise are the weak limits theta*f0 and theta*g of the zero
    extensions of the restricted micro data, and ``u0`` is the initial
    state itself (u^0/theta with u^0 = theta * u0).
    """
    forcing = f0 if isinstance(f0, Forcing) else Forcing(f0)
    noise = noise or NoiseModel.zero()
    return ProblemSpec(mesh, np.asarray(B, dtype=float), forcing.scaled(theta), noise.scaled(theta),
                       u0, T, dt, float(theta), "macro", label)


# ---------------------------------------------------------------------------
# assembled problem and the stepper
# ---------------------------------------------------------------------------

class AssembledProblem:
    """Operators of a :class:`ProblemSpec` restricted to the free DOFs."""

    def __init__(self, spec: ProblemSpec, backend="direct"):
        self.spec = spec
        mesh = spec.mesh
        self.mesh = mesh
        self.dofmap = DofMap(mesh.n_nodes, fixed=mesh.tagged_nodes(DIRICHLET_OUTER))
        self.K = assemble_stiffness(mesh, spec.coefficient, self.dofmap).matrix
        self.M = assemble_mass(mesh, self.dofmap).matrix
        self.M_full = assemble_mass(mesh).matrix
        self.theta = float(spec.theta_w)
        self.dt = float(spec.dt)
        free = np.flatnonzero(self.dofmap.node_to_dof >= 0)
        self.free_nodes = free[np.argsort(self.dofmap.node_to_dof[free])]
        self.G = spec.noise.nodal(mesh.nodes)                      # nodal modes
        self.MG = self.M_full[self.free_nodes] @ self.G             # (n_free, m)
        self.g_norms_sq = np.einsum("ij,ij->j", self.G, self.M_full @ self.G)
        Gf = self.G[self.free_nodes]
        self.g_energy = np.einsum("ij,ij->j", Gf, self.K @ Gf) if Gf.size else np.zeros(0)
        self.u0_nodal = (np.zeros(mesh.n_nodes) if spec.u0 is None
                         else np.asarray(spec.u0(mesh.nodes), dtype=float))
        self.u0 = self.u0_nodal[self.free_nodes]
        self._static_f = None
        if spec.forcing.time_independent:
            fn = spec.forcing(mesh.nodes)
            self._static_f = (fn, self.M_full[self.free_nodes] @ fn)
        self.A = (self.theta * self.M + self.dt * self.K).tocsc()
        self.symmetric = is_symmetric(self.A)
        self.backend = backend
        self._lu = None
        self._mu = None
        if backend == "direct":
            try:
                # symmetric fill-reducing order; SuperLU then pivots on the diagonal
                self._lu = (spla.splu(self.A, permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
                            if self.symmetric else spla.splu(self.A))
            except RuntimeError as exc:
                raise SolverError(f"factorization failed: {exc}") from exc
        elif backend != "cg":
            raise ValueError("backend must be 'direct' or 'cg'")

    @property
    def n_free(self):
        return len(self.free_nodes)

    def forcing_nodal(self, t):
        if self._static_f is not None:
            return self._static_f[0]
        return self.spec.forcing(self.mesh.nodes, t)

    def forcing_load(self, t):
        """M f(t) on the free DOFs."""
        if self._static_f is not None:
            return self._static_f[1]
        return self.M_full[self.free_nodes] @ self.spec.forcing(self.mesh.nodes, t)

    def expand(self, U):
        out = np.zeros((self.mesh.n_nodes,) + np.shape(U)[1:])
        out[self.free_nodes] = U
        return out

    def mass_times(self, U):
        """M @ U, reused while U is the same array (observers and the next step)."""
        cached = self._mu          # single read: chunks in other threads may replace it
        if cached is not None and cached[0] is U:
            return cached[1]
        MU = self.M @ U
        self._mu = (U, MU)
        return MU

    def rhs(self, U, n, dW):
        """Right-hand side for step n -> n+1; ``dW`` has shape (paths, m) or (m,)."""
        R = self.theta * self.mass_times(U)
        fl = self.forcing_load(n * self.dt)
        R += self.dt * (fl[:, None] if R.ndim == 2 else fl)
        if self.MG.shape[1]:
            R += self.MG @ (np.asarray(dW).T)
        return R

    def solve(self, R):
        if self._lu is not None:
            return self._lu.solve(R)
        return solve_spd(self.A, R, tol=1e-12)

    def advance(self, U, n, dW):
        return self.solve(self.rhs(U, n, dW))

    def residual(self, U_next, R):
        r = np.linalg.norm(self.A @ U_next - R, axis=0)
        b = np.linalg.norm(R, axis=0)
        return np.where(b > 0, r / np.where(b > 0, b, 1.0), r)


def step(state, spec, K, M, dW, forcing_load=None, tol=1e-12):
    """One drift-implicit Euler-Maruyama step on the free DOFs, solved by CG.

    ``K`` and ``M`` are free-DOF stiffness and mass, ``dW`` the m increments
    and ``forcing_load`` the vector M f(t_n) (zero when omitted).
    """
    K = getattr(K, "matrix", K)
    M = getattr(M, "matrix", M)
    state = np.asarray(state, dtype=float)
    if state.shape[0] != M.shape[0]:
        raise DimensionError("state does not match operator size")
    theta = spec.theta_w
    A = theta * M + spec.dt * K
    R = theta * (M @ state)
    if forcing_load is not None:
        R = R + spec.dt * forcing_load
    if np.size(dW):
        dm = DofMap(spec.mesh.n_nodes, fixed=spec.mesh.tagged_nodes(DIRICHLET_OUTER))
        G = spec.noise.nodal(spec.mesh.nodes)
        R = R + dm.prolongation.T @ (assemble_mass(spec.mesh).matrix @ (G @ np.asarray(dW)))
    return solve_spd(A, R, tol=tol)


@dataclass
class SamplePath:
    times: np.ndarray
    states: np.ndarray       # (n_steps + 1, n_nodes)
    path_seed: int
    mesh: object
    residuals: np.ndarray    # per step relative residual of the linear solve

    def to_text(self, dofs=None):
        idx = np.arange(self.states.shape[1]) if dofs is None else np.asarray(dofs)
        lines = [f"{n} {t:.17g} " + " ".join(f"{v:.17g}" for v in s[idx])
                 for n, (t, s) in enumerate(zip(self.times, self.states))]
        return "\n".join(lines) + "\n"


def simulate_path(spec: ProblemSpec, path_seed: int, problem: AssembledProblem | None = None,
                  substeps=1) -> SamplePath:
    """Full trajectory of one path (nodal states at every step)."""
    prob = problem or AssembledProblem(spec)
    n = spec.n_steps
    src = IncrementSource(spec.noise, [path_seed], spec.dt, substeps)
    states = np.empty((n + 1, spec.mesh.n_nodes))
    res = np.zeros(n)
    U = prob.u0.copy()
    states[0] = prob.expand(U)
    for start in range(0, n, NORMAL_BLOCK):
        cnt = min(NORMAL_BLOCK, n - start)
        dWs = src.block(start, cnt)
        for k in range(cnt):
            R = prob.rhs(U, start + k, dWs[k, 0])
            U = prob.solve(R)
            res[start + k] = prob.residual(U[:, None], R[:, None])[0]
            states[start + k + 1] = prob.expand(U)
    return SamplePath(spec.times, states, int(path_seed), spec.mesh, res)


def energy_diagnostics(path: SamplePath, spec: ProblemSpec, K=None, M=None, problem=None):
    """Per-step ||u||^2, cumulative int ||u||_V^2 (right-endpoint sum) and the
    drift residual of the scheme, i.e. ||A u^{n+1} - rhs|| / ||rhs||."""
    prob = problem or AssembledProblem(spec)
    K = prob.K if K is None else getattr(K, "matrix", K)
    M = prob.M if M is None else getattr(M, "matrix", M)
    U = path.states[:, prob.free_nodes].T          # (n_free, n+1)
    l2 = np.einsum("it,it->t", U, M @ U)
    v = np.einsum("it,it->t", U, K @ U)
    cum = np.concatenate([[0.0], np.cumsum(spec.dt * v[1:])])
    return {"l2_sq": l2, "v_sq": v, "cum_v": cum, "residual": np.concatenate([[0.0], path.residuals])}


# ---------------------------------------------------------------------------
# lockstep ensembles
# ---------------------------------------------------------------------------

def _run_chunk(problems, seeds, observers, joint, joint_every, substeps):
    base = problems[0]
    n_steps = base.spec.n_steps
    for p in problems[1:]:
        if p.spec.n_steps != n_steps or abs(p.dt - base.dt) > 1e-15 * base.dt:
            raise DimensionError("lockstep problems need identical time grids")
    src = IncrementSource(base.spec.noise, seeds, base.dt, substeps)
    for p in problems[1:]:
        if p.spec.noise.seed != base.spec.noise.seed or p.spec.noise.m != base.spec.noise.m:
            raise DimensionError("lockstep problems must share the noise streams")
    N = len(seeds)
    states = [np.repeat(p.u0[:, None], N, axis=1) for p in problems]
    rec = [{name: [None] * (n_steps + 1) for name in obs} for obs in observers]
    jrec = {name: [] for name in (joint or {})}
    jtimes = []
    max_res = np.zeros(len(problems))

    def observe(n):
        for pi, (p, obs) in enumerate(zip(problems, observers)):
            for name, fn in obs.items():
                rec[pi][name][n] = fn(p, states[pi], n)
        if joint and n % joint_every == 0:
            jtimes.append(n)
            for name, fn in joint.items():
                jrec[name].append(fn(problems, states, n))

    observe(0)
    for start in range(0, n_steps, NORMAL_BLOCK):
        cnt = min(NORMAL_BLOCK, n_steps - start)
        dWs = src.block(start, cnt)
        for k in range(cnt):
            n = start + k
            for pi, p in enumerate(problems):
                R = p.rhs(states[pi], n, dWs[k])
                # C order keeps the CSR products in the observers copy-free
                states[pi] = np.ascontiguousarray(p.solve(R))
                if n == n_steps - 1 or n % 97 == 0:
                    max_res[pi] = max(max_res[pi], float(p.residual(states[pi], R).max()))
            observe(n + 1)
    out = [{name: np.asarray(v) for name, v in r.items()} for r in rec]
    jout = {name: np.asarray(v) for name, v in jrec.items()}
    return out, jout, np.asarray(jtimes), states, max_res


def run_lockstep(problems, path_seeds, observers, joint=None, joint_every=1, substeps=1, threads=1):
    """Advance several assembled problems with shared increments.

    ``observers[i]`` maps names to ``fn(problem, U, n) -> (paths, ...)``
    evaluated at every step on problem i; ``joint`` maps names to
    ``fn(problems, states, n)`` evaluated every ``joint_every`` steps.
    Returns per-problem records of shape (steps + 1, paths, ...), joint
    records, joint step indices, final states and max solve residuals.
    """
    seeds = list(path_seeds)
    threads = max(1, int(threads))
    if threads == 1 or len(seeds) < 2 * threads:
        return _run_chunk(problems, seeds, observers, joint, joint_every, substeps)
    chunks = [c.tolist() for c in np.array_split(np.asarray(seeds), threads)]
    with ThreadPoolExecutor(threads) as ex:
        parts = list(ex.map(lambda c: _run_chunk(problems, c, observers, joint, joint_every, substeps), chunks))
    recs = [{name: np.concatenate([pt[0][i][name] for pt in parts], axis=1) for name in observers[i]}
            for i in range(len(problems))]
    jrec = {name: np.concatenate([pt[1][name] for pt in parts], axis=1) for name in (joint or {})}
    states = [np.concatenate([pt[3][i] for pt in parts], axis=1) for i in range(len(problems))]
    res = np.max([pt[4] for pt in parts], axis=0)
    return recs, jrec, parts[0][2], states, res


# standard per-path observers -------------------------------------------------

def obs_l2(p, U, n):
    return np.einsum("ij,ij->j", U, p.mass_times(U))


def obs_energy(p, U, n):
    return np.einsum("ij,ij->j", U, p.K @ U)


def obs_work(p, U, n):
    """(f(t_{n-1}), u^n): the forcing that produced u^n (zero at n = 0)."""
    if n == 0:
        return np.zeros(U.shape[1])
    return p.forcing_load((n - 1) * p.dt) @ U


def obs_pairings(test_functions, scale=1.0):
    """Observer returning scale * (u, phi_k) for each test function."""
    cache = {}

    def fn(p, U, n):
        key = id(p)
        if key not in cache:
            Phi = np.column_stack([np.asarray(phi(p.mesh.nodes), dtype=float) for phi in test_functions])
            cache[key] = (p.M_full[p.free_nodes] @ Phi).T
        return scale * (cache[key] @ U).T

    return fn
