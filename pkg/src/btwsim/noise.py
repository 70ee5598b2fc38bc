"""Brownian drivers, the drift fields they induce, and path diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d

from .grid import integrate, laplacian_apply

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class NoiseBasis:
    """Spatial noise profiles ``f_k`` on a grid.

    ``c2_norms[k]`` holds ``(sup|f_k|, sup|grad f_k|, sup|lap f_k|)``; the
    derivative parts come from second-order differences.
    """

    grid: object
    components: np.ndarray = field(repr=False)
    c2_norms: np.ndarray = field(repr=False)

    @classmethod
    def from_components(cls, grid, components):
        comps = np.asarray(components, dtype=float).reshape((-1,) + tuple(grid.shape))
        if not np.all(np.isfinite(comps)):
            raise ValueError("noise profiles must be finite")
        norms = np.zeros((len(comps), 3))
        for k, f in enumerate(comps):
            grads = np.gradient(f, *grid.h, edge_order=2)
            if grid.dim == 1:
                grads = [grads]
            norms[k, 0] = np.abs(f).max()
            norms[k, 1] = np.sqrt(sum(g**2 for g in grads)).max()
            norms[k, 2] = np.abs(laplacian_apply(grid, f)[grid.interior]).max()
        comps.setflags(write=False)
        norms.setflags(write=False)
        return cls(grid, comps, norms)

    @classmethod
    def none(cls, grid):
        return cls.from_components(grid, np.zeros((0,) + tuple(grid.shape)))

    @classmethod
    def constant(cls, grid, c=1.0):
        return cls.from_components(grid, grid.full(c)[None])

    @classmethod
    def linear(cls, grid, c=1.0, axis=0):
        return cls.from_components(grid, (c * grid.coords[axis])[None])

    @classmethod
    def sin_product(cls, grid, c=1.0, modes=None):
        """``c * prod_i sin(m_i pi (x_i - a_i)/(b_i - a_i))``."""
        modes = modes or [1] * grid.dim
        f = np.full(grid.shape, float(c))
        for x, (a, b), m in zip(grid.coords, grid.extents, modes):
            f = f * np.sin(m * math.pi * (x - a) / (b - a))
        return cls.from_components(grid, f[None])

    @property
    def count(self):
        return len(self.components)

    def is_spatially_constant(self, rtol=1e-12):
        for f in self.components:
            if np.ptp(f) > rtol * max(1.0, np.abs(f).max()):
                return False
        return True


@dataclass(frozen=True)
class BrownianPath:
    """``N``-dimensional Brownian path sampled on ``t_i = i * dt``.

    ``values[i, k]`` is component ``k`` at step ``i``; row 0 is zero.
    """

    dt: float
    values: np.ndarray = field(repr=False)
    seed: int = 0
    component_streams: tuple = ()

    @property
    def num_steps(self):
        return len(self.values) - 1

    @property
    def count(self):
        return self.values.shape[1]

    @property
    def horizon(self):
        return self.num_steps * self.dt

    @property
    def times(self):
        return np.arange(self.num_steps + 1) * self.dt

    def increment(self, i, j):
        """``beta(t_j) - beta(t_i)``."""
        return self.values[j] - self.values[i]

    def to_csv(self, path):
        header = ",".join(["t"] + [f"beta_{k + 1}" for k in range(self.count)])
        with open(path, "w") as fh:
            fh.write(f"# seed={self.seed} dt={self.dt!r}\n{header}\n")
            for t, row in zip(self.times, self.values):
                fh.write(",".join([repr(float(t))] + [repr(float(v)) for v in row]) + "\n")

    @classmethod
    def from_csv(cls, path):
        lines = Path(path).read_text().splitlines()
        seed, dt = 0, None
        if lines[0].startswith("#"):
            for tok in lines[0][1:].split():
                key, val = tok.split("=")
                if key == "seed":
                    seed = int(val)
                elif key == "dt":
                    dt = float(val)
            lines = lines[1:]
        ncomp = len(lines[0].split(",")) - 1
        rows = [list(map(float, ln.split(","))) for ln in lines[1:] if ln.strip()]
        arr = np.array(rows, dtype=float).reshape(-1, ncomp + 1)
        if dt is None:
            dt = float(arr[1, 0] - arr[0, 0])
        return cls(dt, arr[:, 1:].copy(), seed, tuple(_stream_key(seed, k) for k in range(ncomp)))


def _stream_key(seed, k):
    return (int(seed) & _MASK64, k)


def component_increments(seed, k, num_steps, dt):
    """Gaussian increments of component ``k``: a Philox stream keyed by ``(seed, k)``."""
    bitgen = np.random.Philox(key=np.array(_stream_key(seed, k), dtype=np.uint64))
    return np.random.Generator(bitgen).standard_normal(num_steps) * math.sqrt(dt)


def sample_path(basis, horizon, dt, seed):
    """Sample a Brownian path with one component per noise profile.

    ``basis`` may be a :class:`NoiseBasis` or a component count.
    """
    if not dt > 0 or not horizon >= dt:
        raise ValueError("need dt > 0 and horizon >= dt")
    n = basis if isinstance(basis, int) else basis.count
    num_steps = int(math.floor(horizon / dt + 1e-9))
    values = np.zeros((num_steps + 1, n))
    for k in range(n):
        values[1:, k] = np.cumsum(component_increments(seed, k, num_steps, dt))
    values.setflags(write=False)
    return BrownianPath(dt, values, int(seed), tuple(_stream_key(seed, k) for k in range(n)))


def mu_at(basis, path, step):
    """``mu_t = -sum_k f_k beta^k_t`` at ``t = step * dt``."""
    if not 0 <= step <= path.num_steps:
        raise IndexError(f"step {step} outside 0..{path.num_steps}")
    if basis.count == 0:
        return basis.grid.zeros()
    return -np.tensordot(path.values[step], basis.components, axes=1)


def mu_tilde(basis):
    if basis.count == 0:
        return basis.grid.zeros()
    return 0.5 * np.sum(basis.components**2, axis=0)


@dataclass(frozen=True)
class DriftFields:
    """Itô correction ``mu_tilde`` and the path-driven ``mu_t`` for one realization."""

    basis: NoiseBasis
    path: BrownianPath
    mu_tilde: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, basis, path):
        if path.count != basis.count:
            raise ValueError("path and basis have different component counts")
        mt = mu_tilde(basis)
        mt.setflags(write=False)
        return cls(basis, path, mt)

    @property
    def grid(self):
        return self.basis.grid

    def mu_of_t(self, step):
        return mu_at(self.basis, self.path, step)


@dataclass
class HypothesisReport:
    max_integral: float
    per_t: list
    overflow: bool


def check_hypothesis_H(basis, path, p, t_grid):
    """Quadrature of ``int exp(-p mu_t - p mu_tilde t)`` over the sampled times.

    Overflowing exponentials report ``inf`` and set the ``overflow`` flag.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    grid = basis.grid
    mt = mu_tilde(basis)
    per_t = []
    overflow = False
    for t in t_grid:
        step = int(round(t / path.dt))
        expo = -p * mu_at(basis, path, step) - p * mt * (step * path.dt)
        if expo.max() > 700:
            val, flag = math.inf, True
        else:
            val, flag = integrate(grid, np.exp(expo)), False
        overflow |= flag
        per_t.append({"t": step * path.dt, "integral": val, "overflow": flag})
    return HypothesisReport(max(d["integral"] for d in per_t), per_t, overflow)


@dataclass
class SublevelFit:
    exponent: float | None
    eps: np.ndarray
    measures: np.ndarray
    vacuous: bool


def sublevel_decay_exponent(basis, eps_grid):
    """Fit ``|{0 < mu_tilde <= eps}| ~ eps^delta`` by node counting."""
    eps_grid = np.asarray(eps_grid, dtype=float)
    if np.any(eps_grid <= 0) or np.any(np.diff(eps_grid) <= 0):
        raise ValueError("eps grid must be positive and increasing")
    mt = mu_tilde(basis)
    cell = basis.grid.cell_volume
    measures = np.array([np.count_nonzero((mt > 0) & (mt <= e)) * cell for e in eps_grid])
    good = measures > 0
    if good.sum() < 2:
        return SublevelFit(None, eps_grid, measures, True)
    slope = np.polyfit(np.log(eps_grid[good]), np.log(measures[good]), 1)[0]
    return SublevelFit(float(slope), eps_grid, measures, False)


def flat_window_deviation(path, window):
    """``max_{j in [i, i+window]} |beta_j - beta_i|_inf`` for every admissible ``i``."""
    n = path.num_steps + 1 - window
    if n <= 0:
        return np.zeros(0)
    if path.count == 0:
        return np.zeros(n)
    size = window + 1
    # forward-looking window [i, i + window]: shift the centered filter
    origin = -(size // 2)
    dev = np.zeros(n)
    for k in range(path.count):
        b = np.ascontiguousarray(path.values[:, k])
        hi = maximum_filter1d(b, size, mode="nearest", origin=origin)[:n]
        lo = minimum_filter1d(b, size, mode="nearest", origin=origin)[:n]
        dev = np.maximum(dev, np.maximum(hi - b[:n], b[:n] - lo))
    return dev


def find_flat_interval(path, m, n, eps):
    """Earliest ``[s, s+n]`` with ``s >= m`` on which the path stays within ``eps``.

    Returns ``None`` when the stored horizon holds no such interval.
    """
    if not eps > 0 or not n > 0 or m < 0:
        raise ValueError("need eps > 0, n > 0, m >= 0")
    start = int(math.ceil(m / path.dt - 1e-9))
    window = int(math.ceil(n / path.dt - 1e-9))
    if start + window > path.num_steps:
        return None
    dev = flat_window_deviation(path, window)[start:]
    hits = np.flatnonzero(dev < eps)
    if hits.size == 0:
        return None
    s = (start + int(hits[0])) * path.dt
    return (s, s + window * path.dt)
