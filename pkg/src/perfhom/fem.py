"""P1 finite elements: DOF maps, assembly, and a preconditioned CG solver."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyError, ConvergenceError, DimensionError, SingularSystemError


class DofMap:
    """Map mesh nodes to unknowns.

    ``fixed`` nodes are eliminated (Dirichlet, value 0 unless given);
    ``periodic_pairs`` rows ``(slave, master)`` share the master's DOF.
    """

    def __init__(self, n_nodes, fixed=None, periodic_pairs=None, fixed_values=None):
        self.n_nodes = int(n_nodes)
        rep = np.arange(self.n_nodes)
        if periodic_pairs is not None and len(periodic_pairs):
            pp = np.asarray(periodic_pairs, dtype=np.int64)
            rep[pp[:, 0]] = pp[:, 1]
            rep = rep[rep]  # masters are never slaves, one pass suffices
        self.fixed = np.unique(np.asarray([] if fixed is None else fixed, dtype=np.int64))
        self.fixed_values = (np.zeros(len(self.fixed)) if fixed_values is None
                             else np.broadcast_to(np.asarray(fixed_values, dtype=float), self.fixed.shape).copy())
        free_mask = np.ones(self.n_nodes, dtype=bool)
        free_mask[self.fixed] = False
        masters = np.flatnonzero((rep == np.arange(self.n_nodes)) & free_mask)
        dof_of_master = np.full(self.n_nodes, -1, dtype=np.int64)
        dof_of_master[masters] = np.arange(len(masters))
        self.node_to_dof = dof_of_master[rep]
        self.node_to_dof[~free_mask] = -1
        self.n_dofs = len(masters)

    @classmethod
    def dirichlet(cls, mesh, tag="DIRICHLET_OUTER"):
        return cls(mesh.n_nodes, fixed=mesh.tagged_nodes(tag))

    @classmethod
    def periodic(cls, mesh):
        return cls(mesh.n_nodes, periodic_pairs=mesh.periodic_pairs)

    @property
    def prolongation(self):
        """Sparse (n_nodes, n_dofs) matrix P with nodal = P @ dof (fixed rows zero)."""
        rows = np.flatnonzero(self.node_to_dof >= 0)
        return sp.csr_matrix((np.ones(len(rows)), (rows, self.node_to_dof[rows])),
                             shape=(self.n_nodes, self.n_dofs))

    def expand(self, u):
        """DOF vector(s) -> nodal values, fixed nodes set to their values."""
        u = np.asarray(u, dtype=float)
        if u.shape[0] != self.n_dofs:
            raise DimensionError(f"expected {self.n_dofs} DOF values, got {u.shape[0]}")
        out = np.zeros((self.n_nodes,) + u.shape[1:])
        free = self.node_to_dof >= 0
        out[free] = u[self.node_to_dof[free]]
        if len(self.fixed):
            out[self.fixed] = self.fixed_values.reshape((-1,) + (1,) * (u.ndim - 1))
        return out

    def restrict(self, values):
        """Nodal values -> DOF vector (takes the value at each DOF's first node)."""
        v = np.asarray(values, dtype=float)
        if v.shape[0] != self.n_nodes:
            raise DimensionError(f"expected {self.n_nodes} nodal values, got {v.shape[0]}")
        free = np.flatnonzero(self.node_to_dof >= 0)
        d = self.node_to_dof[free]
        first = np.full(self.n_dofs, -1, dtype=np.int64)
        first[d[::-1]] = free[::-1]
        return v[first]


class SparseOperator:
    """Assembled matrix on the DOFs of a :class:`DofMap`."""

    def __init__(self, matrix, dofmap=None, symmetric=None):
        self.matrix = sp.csr_matrix(matrix)
        self.matrix.sum_duplicates()
        self.matrix.sort_indices()
        self.dofmap = dofmap
        if symmetric is None:
            symmetric = is_symmetric(self.matrix)
        self.symmetric = bool(symmetric)

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, x):
        return self.matrix @ x

    def diagonal(self):
        return self.matrix.diagonal()

    def to_coo_text(self):
        """Coordinate text ``i j value`` (row-major, 17 significant digits)."""
        c = self.matrix.tocoo()
        order = np.lexsort((c.col, c.row))
        lines = [f"{i} {j} {v:.17g}" for i, j, v in zip(c.row[order], c.col[order], c.data[order])]
        return "\n".join(lines) + "\n"

    def smallest_ritz(self, mass=None, k=20, seed=0):
        """Smallest Ritz value of a short Lanczos run (positive-definiteness probe)."""
        n = self.shape[0]
        k = min(k, n)
        rng = np.random.default_rng(seed)
        q = rng.standard_normal(n)
        q /= np.linalg.norm(q)
        Q = np.zeros((n, k))
        alpha, beta = [], []
        b = 0.0
        q_prev = np.zeros(n)
        for j in range(k):
            Q[:, j] = q
            w = self.matrix @ q - b * q_prev
            a = q @ w
            w -= a * q
            w -= Q[:, :j + 1] @ (Q[:, :j + 1].T @ w)
            alpha.append(a)
            b = np.linalg.norm(w)
            if b < 1e-14 or j == k - 1:
                break
            beta.append(b)
            q_prev, q = q, w / b
        T = np.diag(alpha) + np.diag(beta[:len(alpha) - 1], 1) + np.diag(beta[:len(alpha) - 1], -1)
        return float(np.linalg.eigvalsh(T).min())


def is_symmetric(A, rtol=1e-12):
    A = sp.csr_matrix(A)
    d = abs(A - A.T)
    scale = abs(A).max() if A.nnz else 0.0
    return bool(d.nnz == 0 or d.max() <= rtol * max(scale, 1e-300))


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _element_coefficient(mesh, coefficient, elements):
    """Per-element mean of the coefficient over the 3-point rule, shape (t, 2, 2)."""
    t = len(elements)
    if coefficient is None:
        return np.broadcast_to(np.eye(2), (t, 2, 2))
    matrix = getattr(coefficient, "matrix", None)
    if matrix is not None:
        return np.broadcast_to(matrix, (t, 2, 2))
    if not callable(coefficient):
        m = np.asarray(coefficient, dtype=float)
        if m.ndim == 0:
            m = m * np.eye(2)
        if m.shape != (2, 2):
            raise DimensionError("coefficient must be callable, scalar or 2x2")
        return np.broadcast_to(m, (t, 2, 2))
    q = mesh.quadrature_points()[elements].reshape(-1, 2)
    vals = np.asarray(coefficient(q), dtype=float)
    if vals.shape != (len(q), 2, 2):
        raise DimensionError(f"coefficient returned shape {vals.shape}, expected ({len(q)}, 2, 2)")
    return vals.reshape(t, 3, 2, 2).mean(axis=1)


def _elements(mesh, elements):
    if elements is None:
        return np.arange(mesh.n_triangles)
    e = np.asarray(elements)
    return np.flatnonzero(e) if e.dtype == bool else e.astype(np.int64)


def _check_elements(mesh, el):
    if np.any(mesh.areas[el] <= 0):
        raise AssemblyError("degenerate element (non-positive area)")


def _scatter(mesh, el, local, dofmap):
    """Sum (t, 3, 3) local matrices into a global sparse matrix."""
    tri = mesh.triangles[el]
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_nodes
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    if dofmap is not None:
        P = dofmap.prolongation
        A = (P.T @ A @ P).tocsr()
    return A


def element_stiffness(mesh, coefficient=None, elements=None):
    el = _elements(mesh, elements)
    _check_elements(mesh, el)
    A = _element_coefficient(mesh, coefficient, el)
    g = mesh.gradients[el]
    # K_ij = area * grad(phi_i) . (A grad(phi_j))
    return mesh.areas[el][:, None, None] * np.einsum("tid,tde,tje->tij", g, A, g)


def element_mass(mesh, elements=None):
    el = _elements(mesh, elements)
    _check_elements(mesh, el)
    base = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return mesh.areas[el][:, None, None] * base


def assemble_stiffness(mesh, coefficient=None, dofmap=None, elements=None):
    """Stiffness K[i, j] = sum over elements of int a grad(phi_j) . grad(phi_i)."""
    el = _elements(mesh, elements)
    A = _scatter(mesh, el, element_stiffness(mesh, coefficient, el), dofmap)
    return SparseOperator(A, dofmap)


def assemble_mass(mesh, dofmap=None, elements=None):
    el = _elements(mesh, elements)
    A = _scatter(mesh, el, element_mass(mesh, el), dofmap)
    return SparseOperator(A, dofmap, symmetric=True)


def assemble_load(mesh, f, dofmap=None, elements=None):
    """Load vector int f phi_i with the degree-2 three-point rule.

    ``f`` maps points of shape (n, 2) to values of shape (n,) or (n, k).
    """
    el = _elements(mesh, elements)
    q = mesh.quadrature_points()[el]
    vals = np.asarray(f(q.reshape(-1, 2)), dtype=float)
    vals = vals.reshape((len(el), 3) + vals.shape[1:])
    bary = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
    # local[t, i] = area/3 * sum_q f(x_q) phi_i(x_q)
    local = np.einsum("tq...,qi->ti...", vals, bary) * (mesh.areas[el] / 3.0).reshape((-1, 1) + (1,) * (vals.ndim - 2))
    out = np.zeros((mesh.n_nodes,) + vals.shape[2:])
    np.add.at(out, mesh.triangles[el], local)
    if dofmap is not None:
        out = dofmap.prolongation.T @ out
    return out


def nodal_values(mesh, func):
    return np.asarray(func(mesh.nodes), dtype=float)


def l2_pairing(mesh, u, phi, mass=None):
    """Discrete pairing u^T M phi(nodes); ``phi`` may be a callable or nodal values."""
    M = assemble_mass(mesh).matrix if mass is None else getattr(mass, "matrix", mass)
    u = np.asarray(u, dtype=float)
    if u.shape[0] != M.shape[0]:
        raise DimensionError(f"field has {u.shape[0]} values, mesh has {M.shape[0]} nodes")
    p = nodal_values(mesh, phi) if callable(phi) else np.asarray(phi, dtype=float)
    return u.T @ (M @ p)


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

class SolveInfo:
    __slots__ = ("iterations", "residual")

    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual

    def __repr__(self):
        return f"SolveInfo(iterations={self.iterations}, residual={self.residual:.3e})"


def solve_spd(op, rhs, tol=1e-10, max_iter=None, x0=None, return_info=False):
    """Jacobi-preconditioned conjugate gradients.

    Stops when ||b - A x|| <= tol * ||b||.  ``rhs`` may be a matrix of
    right-hand sides; columns are iterated together and each stops
    updating once converged.
    """
    A = getattr(op, "matrix", op)
    A = sp.csr_matrix(A)
    b = np.asarray(rhs, dtype=float)
    squeeze = b.ndim == 1
    B = b[:, None] if squeeze else b
    n = A.shape[0]
    if B.shape[0] != n:
        raise DimensionError(f"rhs has {B.shape[0]} rows, operator is {n}x{n}")
    d = A.diagonal()
    if np.any(d <= 0):
        raise SingularSystemError("operator has non-positive diagonal entries")
    dinv = (1.0 / d)[:, None]
    max_iter = 10 * n if max_iter is None else int(max_iter)

    X = np.zeros_like(B) if x0 is None else np.array(x0, dtype=float).reshape(B.shape)
    R = B - A @ X
    bnorm = np.linalg.norm(B, axis=0)
    target = tol * np.where(bnorm > 0, bnorm, 1.0)
    rnorm = np.linalg.norm(R, axis=0)
    active = rnorm > target
    Z = dinv * R
    P = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    it = 0
    while active.any():
        if it >= max_iter:
            res = float((rnorm / np.where(bnorm > 0, bnorm, 1.0)).max())
            raise ConvergenceError(f"CG did not converge in {max_iter} iterations (residual {res:.3e})",
                                   residual=res, iterations=it)
        it += 1
        cols = np.flatnonzero(active)
        Pa = P[:, cols]
        AP = A @ Pa
        pAp = np.einsum("ij,ij->j", Pa, AP)
        if np.any(pAp <= 0):
            raise SingularSystemError("operator is not positive definite")
        alpha = rz[cols] / pAp
        X[:, cols] += alpha * Pa
        R[:, cols] -= alpha * AP
        rnorm[cols] = np.linalg.norm(R[:, cols], axis=0)
        Zc = dinv * R[:, cols]
        rz_new = np.einsum("ij,ij->j", R[:, cols], Zc)
        beta = rz_new / rz[cols]
        P[:, cols] = Zc + beta * Pa
        rz[cols] = rz_new
        active = rnorm > target
    # true residual of the returned iterate
    res = np.linalg.norm(B - A @ X, axis=0) / np.where(bnorm > 0, bnorm, 1.0)
    x = X[:, 0] if squeeze else X
    if return_info:
        return x, SolveInfo(it, float(res.max()))
    return x
