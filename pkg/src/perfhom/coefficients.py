"""Periodic conductivity coefficients a(y) on the reference cell."""

from __future__ import annotations

import numpy as np


class Coefficient:
    """A Y-periodic 2x2 matrix field.

    ``func`` receives points of shape (n, 2) already wrapped into the cell
    and must return an array of shape (n, 2, 2).  Constant coefficients
    keep their matrix on ``matrix`` so assembly can skip evaluation.
    """

    def __init__(self, func, lengths=(1.0, 1.0), name="custom", matrix=None):
        self._func = func
        self.lengths = (float(lengths[0]), float(lengths[1]))
        self.name = name
        self.matrix = None if matrix is None else np.asarray(matrix, dtype=float)

    def __repr__(self):
        return f"Coefficient({self.name})"

    def __call__(self, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if self.matrix is not None:
            return np.broadcast_to(self.matrix, (y.shape[0], 2, 2)).copy()
        wrapped = np.mod(y, self.lengths)
        out = np.asarray(self._func(wrapped), dtype=float)
        if out.shape != (y.shape[0], 2, 2):
            out = np.broadcast_to(out, (y.shape[0], 2, 2)).copy()
        return out

    @property
    def is_constant(self):
        return self.matrix is not None

    # -- presets -----------------------------------------------------------
    @classmethod
    def constant(cls, matrix, lengths=(1.0, 1.0), name=None):
        m = np.asarray(matrix, dtype=float)
        if m.ndim == 0:
            m = float(m) * np.eye(2)
        if m.shape != (2, 2):
            raise ValueError("constant coefficient must be a scalar or a 2x2 matrix")
        return cls(None, lengths, name or f"constant({m.tolist()})", matrix=m)

    @classmethod
    def identity(cls, lengths=(1.0, 1.0)):
        return cls.constant(np.eye(2), lengths, name="identity")

    @classmethod
    def diag(cls, a1, a2, lengths=(1.0, 1.0)):
        return cls.constant(np.diag([a1, a2]), lengths, name=f"diag({a1:g},{a2:g})")

    @classmethod
    def checker(cls, a1, a2, lengths=(1.0, 1.0)):
        """Checkerboard: a1*I on the two diagonal quarter cells, a2*I elsewhere."""
        l1, l2 = float(lengths[0]), float(lengths[1])

        def func(y):
            same = (y[:, 0] < 0.5 * l1) == (y[:, 1] < 0.5 * l2)
            s = np.where(same, a1, a2)
            return s[:, None, None] * np.eye(2)

        return cls(func, lengths, name=f"checker({a1:g},{a2:g})")

    @classmethod
    def scalar_field(cls, func, lengths=(1.0, 1.0), name="scalar"):
        """Isotropic coefficient s(y) * I from a scalar function of y1, y2."""

        def matfunc(y):
            s = np.broadcast_to(np.asarray(func(y[:, 0], y[:, 1]), dtype=float), (y.shape[0],))
            return s[:, None, None] * np.eye(2)

        return cls(matfunc, lengths, name=name)

    # -- transformations ---------------------------------------------------
    def scaled(self, c):
        c = float(c)
        if self.matrix is not None:
            return Coefficient.constant(c * self.matrix, self.lengths, name=f"{c:g}*{self.name}")
        return Coefficient(lambda y: c * self._func(y), self.lengths, name=f"{c:g}*{self.name}")

    def transposed(self):
        if self.matrix is not None:
            return Coefficient.constant(self.matrix.T, self.lengths, name=f"{self.name}^T")
        return Coefficient(lambda y: np.swapaxes(self._func(y), 1, 2), self.lengths,
                           name=f"{self.name}^T")

    def oscillating(self, eps, origin=(0.0, 0.0)):
        """Return x -> a((x - origin) / eps), the coefficient of the micro problem."""
        origin = np.asarray(origin, dtype=float)
        if self.matrix is not None:
            return self
        return lambda x: self((np.asarray(x, dtype=float) - origin) / eps)

    # -- checks ------------------------------------------------------------
    def sample_points(self, n=41):
        l1, l2 = self.lengths
        s = (np.arange(n) + 0.5) / n
        y1, y2 = np.meshgrid(s * l1, s * l2, indexing="ij")
        return np.column_stack([y1.ravel(), y2.ravel()])

    def ellipticity(self, points=None):
        """Smallest eigenvalue of the symmetric part over the sample points."""
        pts = self.sample_points() if points is None else points
        a = self(pts)
        sym = 0.5 * (a + np.swapaxes(a, 1, 2))
        return float(np.linalg.eigvalsh(sym).min())

    def sup_norm(self, points=None):
        pts = self.sample_points() if points is None else points
        return float(np.abs(self(pts)).max())
