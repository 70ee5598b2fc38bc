"""Run configuration: a JSON document validated before anything is computed.

Every field has a default, so ``{}`` is a valid config (deterministic 1D run
from ``x0 = 1`` on a 65-node unit interval). :func:`load_config` resolves the
defaults that depend on other fields and :meth:`RunConfig.echo` returns the
fully resolved document for the run summaries.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .estimates import ExtinctionBoundParams
from .grid import SpatialGrid, load_grid_function
from .noise import BrownianPath, NoiseBasis
from .regularize import RegParams
from .solver import SchemeConfig


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit code 2."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridSpec(_Section):
    dim: Literal[1, 2] = 1
    nodes: list[int] = Field(default_factory=lambda: [65])
    extents: list[tuple[float, float]] | None = None
    file: str | None = None

    @model_validator(mode="after")
    def _shape(self):
        if self.file is None:
            if len(self.nodes) == 1:
                self.nodes = self.nodes * self.dim
            if len(self.nodes) != self.dim or min(self.nodes) < 3:
                raise ValueError("grid.nodes needs one entry >= 3 per dimension")
            if self.extents is None:
                self.extents = [(0.0, 1.0)] * self.dim
            if len(self.extents) != self.dim or any(b <= a for a, b in self.extents):
                raise ValueError("grid.extents needs one increasing pair per dimension")
        return self


class NoiseSpec(_Section):
    kind: Literal["none", "constant", "linear", "sin_product", "files"] = "none"
    amplitude: float = 1.0
    axis: int = 0
    modes: list[int] | None = None
    files: list[str] = Field(default_factory=list)
    path_file: str | None = None

    @model_validator(mode="after")
    def _files(self):
        if self.kind == "files" and not self.files:
            raise ValueError("noise.kind='files' needs noise.files")
        if not math.isfinite(self.amplitude):
            raise ValueError("noise.amplitude must be finite")
        return self


class InitialSpec(_Section):
    kind: Literal["constant", "bump", "file"] = "constant"
    value: float = 1.0
    center: list[float] | None = None
    radius: float = 0.25
    file: str | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "file" and self.file is None:
            raise ValueError("initial.kind='file' needs initial.file")
        if self.value < 0 or not math.isfinite(self.value):
            raise ValueError("initial.value must be finite and nonnegative")
        if self.radius <= 0:
            raise ValueError("initial.radius must be positive")
        return self


class SchemeSpec(_Section):
    dt: float = Field(1e-3, gt=0)
    eps: float = Field(1e-3, gt=0)
    delta: float | None = Field(None, ge=0)
    tau: float = Field(0.0, ge=0)
    newton_tol: float = Field(1e-10, gt=0)
    newton_max_iter: int = Field(50, ge=1)
    extinction_threshold: float | None = Field(None, gt=0)
    monitor_stride: int = Field(1, ge=1)
    lp_p: float = Field(2.0, ge=1)


class MonitorSpec(_Section):
    lp_decay: list[float] = Field(default_factory=lambda: [1.0, 2.0, 4.0])
    lp_tol: float = Field(1e-6, gt=0)
    energy_l1: bool = True
    energy_tol: float = Field(1e-6, gt=0)
    supersolution: bool = True
    supersolution_tol: float = Field(1e-6, gt=0)
    extinction_bound: bool = True
    bound_tol: float = Field(1e-4, gt=0)
    x_chain: bool = False

    @field_validator("lp_decay")
    @classmethod
    def _p(cls, v):
        if any(p < 1 for p in v):
            raise ValueError("lp_decay exponents must be >= 1")
        return v


class BoundSpec(_Section):
    p: float = 2.0
    q_d2: float = 6.0
    C1_hat: float | None = Field(None, gt=0)
    t0_hat: float = Field(0.0, ge=0)
    margin: float = Field(0.05, gt=0, lt=1)


def _parse_seeds(text):
    try:
        a, b = (int(x) for x in str(text).split(".."))
    except ValueError:
        raise ValueError(f"seed range must look like A..B, got {text!r}") from None
    if b < a:
        raise ValueError("seed range is empty")
    return a, b


class RunConfig(_Section):
    grid: GridSpec = Field(default_factory=GridSpec)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    initial: InitialSpec = Field(default_factory=InitialSpec)
    scheme: SchemeSpec = Field(default_factory=SchemeSpec)
    monitors: MonitorSpec = Field(default_factory=MonitorSpec)
    bound: BoundSpec = Field(default_factory=BoundSpec)
    horizon: float = Field(1.0, gt=0)
    path_dt: float | None = Field(None, gt=0)
    stop_at_extinction: bool = True
    seed: int = 0
    seeds: str | None = None
    workers: int = Field(1, ge=1)
    out: str = "out"

    @model_validator(mode="after")
    def _resolve(self):
        s = self.scheme
        if s.delta is None:
            s.delta = s.eps**2
        if self.path_dt is None:
            self.path_dt = s.dt
        ratio = s.dt / self.path_dt
        if ratio < 1 - 1e-9 or abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ValueError("scheme.dt must be an integer multiple of path_dt")
        if self.horizon < s.dt:
            raise ValueError("horizon must be at least one step")
        if self.seeds is not None:
            _parse_seeds(self.seeds)
        return self

    @property
    def seed_range(self):
        if self.seeds is None:
            return [self.seed]
        a, b = _parse_seeds(self.seeds)
        return list(range(a, b + 1))

    def echo(self):
        return json.loads(self.model_dump_json())

    def referenced_files(self):
        files = [self.grid.file, self.initial.file if self.initial.kind == "file" else None,
                 self.noise.path_file]
        if self.noise.kind == "files":
            files += self.noise.files
        return [f for f in files if f is not None]


def load_config(path=None, overrides=None):
    """Read, merge overrides, validate, and check every referenced file exists."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        base = p.parent
    else:
        base = Path(".")
    for key, val in (overrides or {}).items():
        if val is not None:
            data[key] = val
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
    _resolve_paths(cfg, base)
    missing = [f for f in cfg.referenced_files() if not Path(f).is_file()]
    if missing:
        raise ConfigError("referenced files not found: " + ", ".join(missing))
    try:
        grid = build_grid(cfg)
        ExtinctionBoundParams(d=grid.dim, p=cfg.bound.p, q_d2=cfg.bound.q_d2)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _resolve_paths(cfg, base):
    def fix(f):
        return f if f is None or Path(f).is_absolute() else str(base / f)
    cfg.grid.file = fix(cfg.grid.file)
    cfg.initial.file = fix(cfg.initial.file)
    cfg.noise.path_file = fix(cfg.noise.path_file)
    cfg.noise.files = [fix(f) for f in cfg.noise.files]


# ---------------------------------------------------------------------------
# builders


def build_grid(cfg):
    if cfg.grid.file is not None:
        return load_grid_function(cfg.grid.file)[0]
    return SpatialGrid(tuple(tuple(e) for e in cfg.grid.extents), tuple(cfg.grid.nodes))


def build_basis(cfg, grid):
    n = cfg.noise
    if n.kind == "none":
        return NoiseBasis.none(grid)
    if n.kind == "constant":
        return NoiseBasis.constant(grid, n.amplitude)
    if n.kind == "linear":
        if not 0 <= n.axis < grid.dim:
            raise ConfigError("noise.axis outside the grid dimension")
        return NoiseBasis.linear(grid, n.amplitude, n.axis)
    if n.kind == "sin_product":
        return NoiseBasis.sin_product(grid, n.amplitude, n.modes)
    comps = []
    for f in n.files:
        g, u = load_grid_function(f)
        if g != grid:
            raise ConfigError(f"{f}: noise profile grid differs from the run grid")
        comps.append(n.amplitude * u)
    return NoiseBasis.from_components(grid, np.array(comps))


def build_initial(cfg, grid):
    ic = cfg.initial
    if ic.kind == "constant":
        return grid.with_zero_boundary(grid.full(ic.value))
    if ic.kind == "bump":
        center = ic.center or [0.5 * (a + b) for a, b in grid.extents]
        r2 = sum((x - c) ** 2 for x, c in zip(grid.coords, center)) / ic.radius**2
        return grid.with_zero_boundary(ic.value * np.maximum(1.0 - r2, 0.0) ** 2)
    g, u = load_grid_function(ic.file)
    if g != grid:
        raise ConfigError(f"{ic.file}: initial datum grid differs from the run grid")
    if np.any(u < 0):
        raise ConfigError(f"{ic.file}: initial datum has negative nodes")
    return grid.with_zero_boundary(u)


def build_scheme(cfg):
    s = cfg.scheme
    return SchemeConfig(dt=s.dt, reg=RegParams(s.eps, s.delta, s.tau), newton_tol=s.newton_tol,
                        newton_max_iter=s.newton_max_iter,
                        extinction_threshold=s.extinction_threshold,
                        monitor_stride=s.monitor_stride, lp_p=s.lp_p)


def load_path(cfg, basis):
    """Stored Brownian path from ``noise.path_file``, or ``None`` to sample one."""
    if cfg.noise.path_file is None:
        return None
    path = BrownianPath.from_csv(cfg.noise.path_file)
    if path.count != basis.count:
        raise ConfigError("stored path and noise profiles have different component counts")
    return path
