"""Five-point finite differences for ``-div(b grad p) = g`` on the unit square.

Homogeneous Dirichlet data; unknowns are the interior nodes in row-major
order.  Edge coefficients use the arithmetic mean of the two nodal values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = ["Grid2D", "SolverError", "assemble_stiffness", "solve_darcy",
           "greens_kernel", "interior_mask", "DarcySystem"]


class SolverError(np.linalg.LinAlgError):
    """Raised when a stiffness matrix cannot be factorized."""


@dataclass(frozen=True)
class Grid2D:
    n: int

    def __post_init__(self):
        if self.n < 3:
            raise ValueError(f"grid needs n >= 3, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    @property
    def n_nodes(self) -> int:
        return self.n * self.n

    @property
    def n_interior(self) -> int:
        return (self.n - 2) ** 2

    def coords(self):
        x = np.linspace(0.0, 1.0, self.n)
        return np.meshgrid(x, x, indexing="ij")


def interior_mask(n: int) -> np.ndarray:
    mask = np.zeros((n, n), dtype=bool)
    mask[1:-1, 1:-1] = True
    return mask


def _check_b(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise ValueError(f"permeability must be a square n x n field, got {b.shape}")
    if not np.all(b > 0):
        raise ValueError("permeability must be strictly positive")
    return b


def edge_list(n: int):
    """Edges touching at least one interior node.

    Returns ``(a, b, ia, ib)``: flat node indices of both endpoints and their
    interior indices (``-1`` for boundary endpoints).  ``a`` is always interior.
    """
    m = n - 2
    inner = -np.ones((n, n), dtype=np.intp)
    inner[1:-1, 1:-1] = np.arange(m * m).reshape(m, m)
    a_nodes, b_nodes = [], []
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            for di, dj in ((1, 0), (0, 1), (-1, 0), (0, -1)):
                p, q = i + di, j + dj
                # each interior-interior edge once
                if inner[p, q] >= 0 and (di, dj) in ((-1, 0), (0, -1)):
                    continue
                a_nodes.append(i * n + j)
                b_nodes.append(p * n + q)
    a = np.array(a_nodes, dtype=np.intp)
    b = np.array(b_nodes, dtype=np.intp)
    flat_inner = inner.ravel()
    return a, b, flat_inner[a], flat_inner[b]


def assemble_stiffness(b, grid: Grid2D | None = None) -> np.ndarray:
    """Dense ``(n-2)^2`` square stiffness matrix over interior nodes."""
    b = _check_b(b)
    n = b.shape[0]
    grid = grid or Grid2D(n)
    if grid.n != n:
        raise ValueError(f"field is {n}x{n} but grid has n={grid.n}")
    a, c, ia, ic = edge_list(n)
    bf = b.ravel()
    coef = 0.5 * (bf[a] + bf[c]) / grid.h ** 2
    K = np.zeros((grid.n_interior, grid.n_interior))
    np.add.at(K, (ia, ia), coef)
    both = ic >= 0
    np.add.at(K, (ic[both], ic[both]), coef[both])
    np.add.at(K, (ia[both], ic[both]), -coef[both])
    np.add.at(K, (ic[both], ia[both]), -coef[both])
    return K


class DarcySystem:
    """Factorized stiffness for one permeability field; solves many loads."""

    def __init__(self, b):
        self.b = _check_b(b)
        self.grid = Grid2D(self.b.shape[0])
        self.K = assemble_stiffness(self.b, self.grid)
        # factor K / 2^e so rescaling b by a power of two changes only e,
        # which keeps solve(c b, g) == solve(b, g) / c bit for bit
        self._exp = int(np.frexp(self.b.max())[1])
        try:
            self._chol = scipy.linalg.cho_factor(np.ldexp(self.K, -self._exp), lower=True,
                                                 check_finite=True)
        except np.linalg.LinAlgError as exc:
            cond = np.linalg.cond(self.K)
            raise SolverError(f"stiffness factorization failed (condition estimate {cond:.3e})") from exc

    def solve(self, g) -> np.ndarray:
        """Solutions for ``g`` of shape ``(n, n)`` or ``(k, n, n)``."""
        g = np.asarray(g, dtype=np.float64)
        n = self.grid.n
        single = g.ndim == 2
        gs = g[None] if single else g
        if gs.shape[1:] != (n, n):
            raise ValueError(f"load shape {g.shape} does not match grid {n}x{n}")
        rhs = gs[:, 1:-1, 1:-1].reshape(len(gs), -1).T
        sol = np.ldexp(scipy.linalg.cho_solve(self._chol, rhs), -self._exp)
        p = np.zeros_like(gs)
        p[:, 1:-1, 1:-1] = sol.T.reshape(len(gs), n - 2, n - 2)
        return p[0] if single else p

    def greens_kernel(self) -> np.ndarray:
        n = self.grid.n
        inv = np.ldexp(scipy.linalg.cho_solve(self._chol, np.eye(self.grid.n_interior)), -self._exp)
        inv = 0.5 * (inv + inv.T)
        G = np.zeros((n * n, n * n))
        idx = np.flatnonzero(interior_mask(n).ravel())
        G[np.ix_(idx, idx)] = inv / self.grid.h ** 2
        return G


def solve_darcy(b, g) -> np.ndarray:
    """Pressure ``p`` with ``p = 0`` on the boundary."""
    return DarcySystem(b).solve(g)


def greens_kernel(b, grid: Grid2D | None = None) -> np.ndarray:
    """``K_B^{-1} / h^2`` embedded in an ``N x N`` matrix (boundary rows zero).

    With quadrature weight ``h^2``, ``h^2 * G @ g.ravel()`` equals
    ``solve_darcy(b, g).ravel()``.
    """
    sys_ = DarcySystem(b)
    if grid is not None and grid.n != sys_.grid.n:
        raise ValueError("grid does not match permeability field")
    return sys_.greens_kernel()
