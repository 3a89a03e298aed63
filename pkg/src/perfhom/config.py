"""Run configuration: ``[section]`` / ``key = value`` files and their validation."""

from __future__ import annotations

import ast
import configparser
import hashlib
import io
import math
import operator
import re
from dataclasses import dataclass, field

import numpy as np

from .coefficients import Coefficient
from .errors import ConfigError, GeometryError
from .geometry import Disk, PeriodicCell, Polygon, Rectangle
from .spde import NoiseModel

# ---------------------------------------------------------------------------
# inline expressions
# ---------------------------------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNOPS = {ast.UAdd: operator.pos, ast.USub: operator.neg}
_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt, "log": np.log,
          "abs": np.abs, "tanh": np.tanh}
_CONSTS = {"pi": math.pi, "e": math.e}


class Expression:
    """Arithmetic expression over a fixed set of variables.

    Only numbers, the listed variables, ``pi``/``e``, ``+ - * / **``, unary
    signs and a few elementwise functions are accepted; anything else is a
    ConfigError at parse time.
    """

    def __init__(self, text, variables):
        self.text = text.strip()
        self.variables = tuple(variables)
        try:
            tree = ast.parse(self.text, mode="eval")
        except SyntaxError as exc:
            raise ConfigError(f"cannot parse expression {text!r}: {exc.msg}") from exc
        self._check(tree.body)
        self._tree = tree.body

    def _check(self, node):
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                raise ConfigError(f"non-numeric constant in {self.text!r}")
        elif isinstance(node, ast.Name):
            if node.id not in self.variables and node.id not in _CONSTS:
                raise ConfigError(f"unknown name {node.id!r} in {self.text!r}")
        elif isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            self._check(node.operand)
        elif (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
              and node.func.id in _FUNCS and len(node.args) == 1 and not node.keywords):
            self._check(node.args[0])
        else:
            raise ConfigError(f"unsupported syntax in {self.text!r}")

    def _eval(self, node, env):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id] if node.id in env else _CONSTS[node.id]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNOPS[type(node.op)](self._eval(node.operand, env))
        return _FUNCS[node.func.id](self._eval(node.args[0], env))

    def __call__(self, *args):
        env = dict(zip(self.variables, args))
        with np.errstate(all="ignore"):
            return self._eval(self._tree, env)

    def as_field(self):
        """Function of points (n, 2) -> (n,)."""
        def f(x):
            x = np.atleast_2d(np.asarray(x, dtype=float))
            return np.broadcast_to(np.asarray(self(x[:, 0], x[:, 1]), dtype=float), (len(x),)).copy()
        f.expression = self.text
        return f


_PRESET = re.compile(r"^\s*(identity|diag|checker)\s*(?:\(([^)]*)\))?\s*$")


def parse_coefficient(preset, entries, lengths):
    """Coefficient from a preset name or inline expressions over y1, y2.

    ``preset`` is ``identity``, ``diag(a1,a2)``, ``checker(a1,a2)``,
    ``scalar`` (uses ``entries['a']``) or ``matrix`` (uses a11..a22).
    """
    preset = (preset or "identity").strip()
    m = _PRESET.match(preset)
    if m:
        name, args = m.group(1), m.group(2)
        vals = [] if not args else [float(v) for v in args.split(",")]
        if name == "identity":
            if vals:
                raise ConfigError("identity takes no arguments")
            return Coefficient.identity(lengths)
        if len(vals) != 2:
            raise ConfigError(f"{name} needs two arguments")
        return getattr(Coefficient, name)(*vals, lengths=lengths)
    if preset == "scalar":
        if "a" not in entries:
            raise ConfigError("coefficient preset 'scalar' needs key 'a'")
        ex = Expression(entries["a"], ("y1", "y2"))
        probe = np.asarray(ex(np.zeros(1), np.zeros(1)), dtype=float)
        if not any(v in entries["a"] for v in ("y1", "y2")):
            return Coefficient.constant(float(probe.ravel()[0]), lengths, name=f"scalar({ex.text})")
        return Coefficient.scalar_field(lambda y1, y2: ex(y1, y2), lengths, name=f"scalar({ex.text})")
    if preset == "matrix":
        keys = ("a11", "a12", "a21", "a22")
        missing = [k for k in keys if k not in entries]
        if missing:
            raise ConfigError(f"coefficient preset 'matrix' needs keys {missing}")
        exs = [Expression(entries[k], ("y1", "y2")) for k in keys]

        def func(y):
            n = len(y)
            vals = [np.broadcast_to(np.asarray(e(y[:, 0], y[:, 1]), dtype=float), (n,)) for e in exs]
            return np.stack(vals, axis=1).reshape(n, 2, 2)

        return Coefficient(func, lengths, name="matrix(" + ",".join(e.text for e in exs) + ")")
    raise ConfigError(f"unknown coefficient preset {preset!r}")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

# every section and key with its default; an empty string means unset
DEFAULTS = {
    "run": {"seed": "20240601", "threads": "1"},
    "geometry": {"domain": "0 0 1 1", "cell": "1 1", "hole": "disk 0.5 0.5 0.25",
                 "eps": "0.25 0.125 0.0625", "cell_h": "0.125", "micro_h": "",
                 "macro_h": "0.0078125", "boundary_cells": "perforate"},
    "coefficient": {"preset": "identity", "a": "", "a11": "", "a12": "", "a21": "", "a22": "",
                    "alpha": "", "bound": ""},
    "noise": {"modes": "16", "sigma": "1", "decay": "1.5", "C_T": "", "C_star": ""},
    "problem": {"f": "default", "u0": "default", "T": "1", "dt": "0.001",
                "T_long": "20", "dt_long": "0.01", "burn_in": "2"},
    "experiment": {"paths": "200", "tests": "6", "strong_every": "10", "stationary": "yes",
                   "stationary_eps": "0.125", "stationary_paths": "200", "record_every": "5"},
    "cell": {"h": "", "refine": ""},
    "acceptance": {"k_monotone": "2", "k_stationary": "3", "gap_tol": "1e-10"},
}

@dataclass
class RunConfig:
    seed: int = 20240601
    threads: int = 1
    domain: Rectangle = field(default_factory=Rectangle)
    cell: PeriodicCell = None
    eps: tuple = (0.25, 0.125, 0.0625)
    cell_h: float = 0.125
    micro_h: float | None = None
    macro_h: float = 1 / 128
    boundary_cells: str = "perforate"
    noise: NoiseModel = None
    f: object = None
    u0: object = None
    T: float = 1.0
    dt: float = 1e-3
    T_long: float = 20.0
    dt_long: float = 0.01
    burn_in: float = 2.0
    paths: int = 200
    tests: int = 6
    strong_every: int = 10
    stationary: bool = True
    stationary_eps: float = 0.125
    stationary_paths: int = 200
    record_every: int = 5
    cell_solve_h: float = 0.125
    refine: tuple = ()
    k_monotone: float = 2.0
    k_stationary: float = 3.0
    gap_tol: float = 1e-10
    text: str = ""                # canonical config text (all keys resolved)

    @property
    def sha256(self):
        return hashlib.sha256(self.text.encode()).hexdigest()

    def family(self, eps=None):
        from .experiments import Family
        return Family(domain=self.domain, cell=self.cell,
                      eps_list=self.eps if eps is None else (float(eps),),
                      cell_h=self.cell_h, macro_h=self.macro_h, u0=self.u0, f0=self.f,
                      noise=self.noise, T=self.T, dt=self.dt, n_tests=self.tests,
                      boundary_cells=self.boundary_cells, micro_h=self.micro_h)


class _Reader:
    """Typed access to a parsed file with section/key/line diagnostics."""

    def __init__(self, parser, lines):
        self.p = parser
        self.lines = lines

    def where(self, section, key):
        in_sec = False
        for no, line in enumerate(self.lines, start=1):
            s = line.strip()
            if s.startswith("["):
                in_sec = s.strip("[]").strip() == section
            elif in_sec and re.match(rf"{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
                return f"line {no}, [{section}] {key}"
        return f"[{section}] {key}"

    def raw(self, section, key):
        return self.p.get(section, key, fallback=DEFAULTS[section][key]).strip()

    def conv(self, section, key, fn, what):
        v = self.raw(section, key)
        try:
            return fn(v)
        except (ValueError, TypeError, ConfigError, GeometryError) as exc:
            raise ConfigError(f"{self.where(section, key)}: expected {what}, got {v!r} ({exc})") from exc

    def num(self, section, key, positive=False, optional=False):
        v = self.raw(section, key)
        if optional and v == "":
            return None
        x = self.conv(section, key, _frac, "a number")
        if not math.isfinite(x) or (positive and not x > 0):
            raise ConfigError(f"{self.where(section, key)}: must be a positive number, got {v!r}")
        return x

    def integer(self, section, key, minimum=0):
        x = self.conv(section, key, int, "an integer")
        if x < minimum:
            raise ConfigError(f"{self.where(section, key)}: must be >= {minimum}, got {x}")
        return x

    def floats(self, section, key, n=None):
        v = self.raw(section, key)
        if v == "":
            return ()
        vals = self.conv(section, key, lambda s: tuple(_frac(t) for t in s.replace(",", " ").split()),
                         "a list of numbers")
        if n is not None and len(vals) != n:
            raise ConfigError(f"{self.where(section, key)}: expected {n} numbers, got {len(vals)}")
        return vals

    def boolean(self, section, key):
        v = self.raw(section, key).lower()
        if v in ("yes", "true", "on", "1"):
            return True
        if v in ("no", "false", "off", "0"):
            return False
        raise ConfigError(f"{self.where(section, key)}: expected yes/no, got {v!r}")


def _frac(tok):
    """Number or simple fraction such as ``1/16``."""
    if "/" in tok:
        a, b = tok.split("/", 1)
        return float(a) / float(b)
    return float(tok)


def _field(r, section, key, default):
    v = r.raw(section, key)
    if v == "default":
        return default
    if v == "zero":
        return None
    return r.conv(section, key, lambda s: Expression(s, ("x", "y")).as_field(), "an expression in x, y")


def _hole(r):
    v = r.raw("geometry", "hole")
    toks = v.split()
    if not toks or toks[0] == "none":
        return None
    try:
        if toks[0] == "disk" and len(toks) == 4:
            return Disk((_frac(toks[1]), _frac(toks[2])), _frac(toks[3]))
        if toks[0] == "polygon" and len(toks) >= 7 and len(toks) % 2 == 1:
            xy = [_frac(t) for t in toks[1:]]
            return Polygon(np.array(xy).reshape(-1, 2))
    except (ValueError, GeometryError) as exc:
        raise ConfigError(f"{r.where('geometry', 'hole')}: {exc}") from exc
    raise ConfigError(f"{r.where('geometry', 'hole')}: expected 'none', 'disk cx cy r' or "
                      f"'polygon x1 y1 x2 y2 x3 y3 ...', got {v!r}")


def _check_divides(T, dt, where):
    n = T / dt
    if abs(n - round(n)) > 1e-9 * max(1.0, n):
        raise ConfigError(f"{where}: dt={dt:g} does not divide T={T:g}")


def parse_config(text):
    """Parse and validate a configuration; returns a RunConfig."""
    from .experiments import default_f0, default_u0
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    for sec in parser.sections():
        if sec not in DEFAULTS:
            raise ConfigError(f"unknown section [{sec}]")
        for key in parser[sec]:
            if key not in DEFAULTS[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
    r = _Reader(parser, text.splitlines())
    c = RunConfig()
    c.seed = r.integer("run", "seed")
    c.threads = r.integer("run", "threads", 1)

    d = r.floats("geometry", "domain", 4)
    try:
        c.domain = Rectangle(*d)
    except GeometryError as exc:
        raise ConfigError(f"{r.where('geometry', 'domain')}: {exc}") from exc
    lengths = r.floats("geometry", "cell", 2)
    if min(lengths) <= 0:
        raise ConfigError(f"{r.where('geometry', 'cell')}: cell lengths must be positive")
    c.eps = r.floats("geometry", "eps")
    if not c.eps or min(c.eps) <= 0:
        raise ConfigError(f"{r.where('geometry', 'eps')}: need at least one positive eps")
    if list(c.eps) != sorted(c.eps, reverse=True) or len(set(c.eps)) != len(c.eps):
        raise ConfigError(f"{r.where('geometry', 'eps')}: eps list must be strictly descending")
    c.cell_h = r.num("geometry", "cell_h", positive=True)
    c.micro_h = r.num("geometry", "micro_h", positive=True, optional=True)
    c.macro_h = r.num("geometry", "macro_h", positive=True)
    c.boundary_cells = r.raw("geometry", "boundary_cells")
    if c.boundary_cells not in ("perforate", "solid"):
        raise ConfigError(f"{r.where('geometry', 'boundary_cells')}: expected perforate or solid")

    entries = {k: r.raw("coefficient", k) for k in ("a", "a11", "a12", "a21", "a22") if r.raw("coefficient", k)}
    try:
        coef = parse_coefficient(r.raw("coefficient", "preset"), entries, lengths)
    except (ConfigError, ValueError) as exc:
        raise ConfigError(f"{r.where('coefficient', 'preset')}: {exc}") from exc
    alpha = r.num("coefficient", "alpha", positive=True, optional=True)
    bound = r.num("coefficient", "bound", positive=True, optional=True)
    try:
        c.cell = PeriodicCell(lengths, _hole(r), coef, alpha, bound)
        c.cell.check_coefficient()
    except GeometryError as exc:
        raise ConfigError(f"[coefficient]/[geometry]: {exc}") from exc

    m = r.integer("noise", "modes", 0)
    sigma = r.num("noise", "sigma", positive=True)
    decay = r.num("noise", "decay")
    C_T = r.num("noise", "C_T", positive=True, optional=True)
    C_star = r.num("noise", "C_star", positive=True, optional=True)
    if m == 0:
        c.noise = NoiseModel.zero(c.seed)
    else:
        c.noise = NoiseModel.sine_family(m, sigma, decay, c.domain, c.seed, C_T, C_star)
        exact = c.noise.exact_hs_norm_sq()
        if C_T is not None and exact > C_T:
            raise ConfigError(f"{r.where('noise', 'C_T')}: declared C_T={C_T:g} is below the "
                              f"noise intensity {exact:.6g}")

    c.f = _field(r, "problem", "f", default_f0)
    c.u0 = _field(r, "problem", "u0", default_u0)
    c.T = r.num("problem", "T", positive=True)
    c.dt = r.num("problem", "dt", positive=True)
    _check_divides(c.T, c.dt, r.where("problem", "dt"))
    c.T_long = r.num("problem", "T_long", positive=True)
    c.dt_long = r.num("problem", "dt_long", positive=True)
    _check_divides(c.T_long, c.dt_long, r.where("problem", "dt_long"))
    c.burn_in = r.num("problem", "burn_in")
    if not 0 <= c.burn_in < c.T_long:
        raise ConfigError(f"{r.where('problem', 'burn_in')}: need 0 <= burn_in < T_long")

    c.paths = r.integer("experiment", "paths", 1)
    c.tests = r.integer("experiment", "tests", 1)
    c.strong_every = r.integer("experiment", "strong_every", 0)
    c.stationary = r.boolean("experiment", "stationary")
    c.stationary_eps = r.num("experiment", "stationary_eps", positive=True)
    c.stationary_paths = r.integer("experiment", "stationary_paths", 2)
    c.record_every = r.integer("experiment", "record_every", 1)

    h = r.num("cell", "h", positive=True, optional=True)
    c.cell_solve_h = c.cell_h if h is None else h
    c.refine = r.floats("cell", "refine")
    if any(v <= 0 for v in c.refine):
        raise ConfigError(f"{r.where('cell', 'refine')}: mesh sizes must be positive")

    c.k_monotone = r.num("acceptance", "k_monotone", positive=True)
    c.k_stationary = r.num("acceptance", "k_stationary", positive=True)
    c.gap_tol = r.num("acceptance", "gap_tol", positive=True)
    c.text = canonical_text(parser)
    return c


def canonical_text(parser):
    """Every section and key in a fixed order, defaults filled in."""
    out = io.StringIO()
    for sec, keys in DEFAULTS.items():
        out.write(f"[{sec}]\n")
        for key, default in keys.items():
            v = parser.get(sec, key, fallback=default).strip() if parser.has_section(sec) else default
            out.write(f"{key} = {v}\n")
        out.write("\n")
    return out.getvalue()


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def manifest_text(config: RunConfig, command, extra=()):
    """A valid config (the canonical text) preceded by comment lines with
    the command, master seed, config hash and library versions."""
    import platform

    import scipy

    from . import __version__
    head = [f"# perfhom run manifest: {command}",
            f"# master_seed = {config.seed}",
            f"# config_sha256 = {config.sha256}",
            f"# versions: perfhom {__version__}, numpy {np.__version__}, scipy {scipy.__version__}, "
            f"python {platform.python_version()}"]
    head += [f"# {line}" for line in extra]
    return "\n".join(head) + "\n" + config.text
