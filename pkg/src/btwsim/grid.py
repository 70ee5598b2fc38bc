"""Rectangular grids, the zero-Dirichlet Laplacian and the discrete norms.

Grid functions are plain ``numpy`` arrays of shape ``grid.shape`` holding
values on every node, boundary included. Operators that need the interior
unknowns only work on the flattened interior vector ``u[grid.interior]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# above this many interior unknowns the Poisson solves switch to CG
DIRECT_SOLVE_LIMIT = 250_000
POISSON_RTOL = 1e-10


class PoissonSolveError(RuntimeError):
    """Raised when the iterative Poisson solve does not reach its tolerance."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform node grid on an interval or a rectangle.

    Parameters
    ----------
    extents : tuple of (a, b)
        One pair per axis, ``b > a``.
    nodes : tuple of int
        Nodes per axis including both boundary nodes, at least 3.
    """

    extents: tuple
    nodes: tuple

    def __post_init__(self):
        extents = tuple((float(a), float(b)) for a, b in self.extents)
        nodes = tuple(int(n) for n in self.nodes)
        if len(extents) not in (1, 2) or len(nodes) != len(extents):
            raise ValueError("grid must be 1D or 2D with one node count per axis")
        for (a, b), n in zip(extents, nodes):
            if not b > a:
                raise ValueError(f"degenerate extent ({a}, {b})")
            if n < 3:
                raise ValueError("need at least 3 nodes per axis")
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def unit(cls, n, dim=1):
        return cls(((0.0, 1.0),) * dim, (n,) * dim)

    @property
    def dim(self):
        return len(self.nodes)

    @property
    def shape(self):
        return self.nodes

    @cached_property
    def h(self):
        return tuple((b - a) / (n - 1) for (a, b), n in zip(self.extents, self.nodes))

    @property
    def volume(self):
        return math.prod(b - a for a, b in self.extents)

    @property
    def cell_volume(self):
        return math.prod(self.h)

    @cached_property
    def axes(self):
        return tuple(np.linspace(a, b, n) for (a, b), n in zip(self.extents, self.nodes))

    @cached_property
    def coords(self):
        """Nodal coordinates, one array of ``shape`` per axis."""
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    @cached_property
    def interior(self):
        mask = np.zeros(self.shape, dtype=bool)
        mask[(slice(1, -1),) * self.dim] = True
        return mask

    @cached_property
    def boundary(self):
        return ~self.interior

    @cached_property
    def n_interior(self):
        return int(self.interior.sum())

    @cached_property
    def quadrature_weights(self):
        """Trapezoid weights per node; they sum to the domain volume."""
        w = np.ones(self.shape)
        for axis, hx in enumerate(self.h):
            wa = np.full(self.nodes[axis], hx)
            wa[0] = wa[-1] = hx / 2
            shape = [1] * self.dim
            shape[axis] = -1
            w = w * wa.reshape(shape)
        return w

    @cached_property
    def laplacian_matrix(self):
        """Interior Laplacian with zero Dirichlet ghosts, as CSR."""
        mats = []
        for hx, n in zip(self.h, self.nodes):
            m = n - 2
            mats.append(sp.diags([np.ones(m - 1), -2 * np.ones(m), np.ones(m - 1)],
                                 [-1, 0, 1]) / hx**2)
        if self.dim == 1:
            return sp.csr_matrix(mats[0])
        i0 = sp.identity(self.nodes[0] - 2)
        i1 = sp.identity(self.nodes[1] - 2)
        return sp.csr_matrix(sp.kron(mats[0], i1) + sp.kron(i0, mats[1]))

    @cached_property
    def _neg_laplacian_lu(self):
        return spla.splu(sp.csc_matrix(-self.laplacian_matrix))

    def zeros(self):
        return np.zeros(self.shape)

    def full(self, value):
        return np.full(self.shape, float(value))

    def with_zero_boundary(self, u):
        out = np.array(u, dtype=float, copy=True)
        out[self.boundary] = 0.0
        return out

    def embed(self, interior_values, boundary=None):
        """Scatter an interior vector into a full grid array."""
        out = self.zeros() if boundary is None else np.array(boundary, dtype=float, copy=True)
        out[self.interior] = interior_values
        return out

    def describe(self):
        return {"dim": self.dim, "extents": [list(e) for e in self.extents],
                "nodes": list(self.nodes)}


@dataclass(frozen=True)
class TorricelliWeight:
    w: np.ndarray = field(repr=False)
    C_w: float


def laplacian_apply(grid, u):
    """Second-order stencil at interior nodes; boundary nodes are passed through."""
    u = np.asarray(u, dtype=float)
    out = u.copy()
    inner = (slice(1, -1),) * grid.dim
    acc = np.zeros(tuple(n - 2 for n in grid.nodes))
    for axis, hx in enumerate(grid.h):
        lo = [slice(1, -1)] * grid.dim
        hi = [slice(1, -1)] * grid.dim
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        acc += (u[tuple(lo)] - 2 * u[inner] + u[tuple(hi)]) / hx**2
    out[inner] = acc
    return out


def solve_poisson(grid, rhs, boundary=None):
    """Solve ``Δu = rhs`` in the interior with ``u = boundary`` on the boundary."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.ndim == 0:
        rhs = grid.full(rhs)
    if not np.all(np.isfinite(rhs)):
        raise ValueError("right-hand side has non-finite entries")
    if boundary is None:
        g = grid.zeros()
    else:
        boundary = np.asarray(boundary, dtype=float)
        g = grid.full(boundary) if boundary.ndim == 0 else boundary.copy()
    g[grid.interior] = 0.0
    b = rhs[grid.interior] - laplacian_apply(grid, g)[grid.interior]
    # solve -A u = -b, the SPD form
    if grid.n_interior <= DIRECT_SOLVE_LIMIT:
        ui = grid._neg_laplacian_lu.solve(-b)
    else:
        ui, info = spla.cg(-grid.laplacian_matrix, -b, rtol=POISSON_RTOL, maxiter=20 * grid.n_interior)
        res = np.linalg.norm(grid.laplacian_matrix @ ui - b) / max(np.linalg.norm(b), 1e-300)
        if info != 0 or res > 10 * POISSON_RTOL:
            raise PoissonSolveError("conjugate gradient did not converge", res)
    return grid.embed(ui, g)


def torricelli_weight(grid):
    """Solution of ``Δw = -1`` with ``w = 1`` on the boundary."""
    w = solve_poisson(grid, -1.0, 1.0)
    return TorricelliWeight(w=w, C_w=float(w.max()))


def gradient(grid, u):
    """Centered differences inside, one-sided on the boundary ring."""
    u = np.asarray(u, dtype=float)
    if grid.dim == 1:
        return (np.gradient(u, grid.h[0], edge_order=1),)
    return tuple(np.gradient(u, *grid.h, edge_order=1))


def gradient_norm(grid, u):
    return np.sqrt(sum(g**2 for g in gradient(grid, u)))


def integrate(grid, u):
    return float(np.sum(np.asarray(u) * grid.quadrature_weights))


def lp_norm(grid, u, p=2.0):
    u = np.abs(np.asarray(u, dtype=float))
    scale = float(u.max())
    if math.isinf(p) or scale == 0:
        return scale
    # rescale so tiny or huge values do not under/overflow in u**p
    return scale * integrate(grid, (u / scale) ** p) ** (1.0 / p)


def weighted_lp_norm(grid, u, p, weight):
    weight = np.asarray(weight, dtype=float)
    if np.any(weight < 0):
        raise ValueError("weight must be nonnegative")
    u = np.abs(np.asarray(u, dtype=float))
    scale = float(u.max())
    if scale == 0:
        return 0.0
    return scale * integrate(grid, (u / scale) ** p * weight) ** (1.0 / p)


def hminus1_norm(grid, u):
    """``sqrt(<(-Δ)^{-1} u, u>)`` with zero Dirichlet data, interior nodes only."""
    ui = np.asarray(u, dtype=float)[grid.interior]
    scale = float(np.abs(ui).max(initial=0.0))
    if scale == 0:
        return 0.0
    ui = ui / scale
    v = grid._neg_laplacian_lu.solve(ui) if grid.n_interior <= DIRECT_SOLVE_LIMIT else \
        solve_poisson(grid, -grid.embed(ui))[grid.interior]
    return scale * math.sqrt(max(float(np.dot(v, ui)) * grid.cell_volume, 0.0))


def sobolev_q(d, q_d2=6.0):
    """Sobolev embedding exponent for ``H^1_0`` in dimension ``d``."""
    if d < 1:
        raise ValueError("dimension must be positive")
    if d == 1:
        return math.inf
    if d == 2:
        if not 2 < q_d2 < math.inf:
            raise ValueError("for d=2 the exponent must lie in (2, inf)")
        return float(q_d2)
    return 2.0 * d / (d - 2)


def save_grid_function(path, grid, u, convention="zero-dirichlet"):
    u = np.asarray(u, dtype=float)
    meta = dict(grid.describe(), boundary=convention)
    idx = np.indices(grid.shape).reshape(grid.dim, -1).T
    cols = ",".join(f"i{k}" for k in range(grid.dim))
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(meta) + "\n")
        fh.write(cols + ",value\n")
        for ij, v in zip(idx, u.ravel()):
            fh.write(",".join(str(int(i)) for i in ij) + f",{float(v)!r}\n")


def load_grid_function(path):
    """Inverse of :func:`save_grid_function`; returns ``(grid, values)``."""
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError(f"{path}: missing grid metadata header")
    meta = json.loads(text[0][1:])
    grid = SpatialGrid(tuple(tuple(e) for e in meta["extents"]), tuple(meta["nodes"]))
    u = grid.zeros()
    for line in text[2:]:
        if not line.strip():
            continue
        parts = line.split(",")
        u[tuple(int(x) for x in parts[:-1])] = float(parts[-1])
    if not np.all(np.isfinite(u)):
        raise ValueError(f"{path}: non-finite values")
    return grid, u
