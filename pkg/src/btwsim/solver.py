"""Time stepping for the transformed equation and the direct Itô equation.

The Y-chain advances

    dY/dt = e^mu lap phi(Y) + delta e^mu lap Y - mu_tilde Y

with ``mu`` frozen at the left end of each step. The diffusive part is
backward Euler solved by damped Newton; the linear decay ``-mu_tilde Y`` is
then applied through its exact factor ``exp(-mu_tilde dt)``, which keeps
``exp(-mu_tilde t) ||x0||_inf`` an exact discrete supersolution.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import hminus1_norm, integrate, lp_norm
from .noise import DriftFields
from .regularize import RegParams, nonlinearity

log = logging.getLogger(__name__)

MAX_HALVINGS = 5
MAX_DAMPING = 20
ABSORPTION_STEPS = 10


class NewtonError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class StepFailure(RuntimeError):
    """A chain step failed even after the halving retries."""

    def __init__(self, t, step, cause):
        super().__init__(f"step {step} from t={t:.6g} failed: {cause}")
        self.t, self.step, self.cause = t, step, cause
        self.residual = getattr(cause, "residual", None)


@dataclass(frozen=True)
class SchemeConfig:
    dt: float
    reg: RegParams
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    extinction_threshold: float | None = None
    monitor_stride: int = 1
    lp_p: float = 2.0

    def __post_init__(self):
        if not self.dt > 0 or not self.newton_tol > 0:
            raise ValueError("dt and newton_tol must be positive")
        if self.extinction_threshold is not None and not self.extinction_threshold > 0:
            raise ValueError("extinction_threshold must be positive")
        if self.monitor_stride < 1 or self.newton_max_iter < 1:
            raise ValueError("monitor_stride and newton_max_iter must be >= 1")

    def threshold_for(self, x0):
        if self.extinction_threshold is not None:
            return self.extinction_threshold
        return 1e-8 * max(1.0, float(np.abs(x0).max()))

    def echo(self):
        d = asdict(self)
        d["reg"] = asdict(self.reg)
        return d


@dataclass(frozen=True)
class SolverState:
    t: float
    Y: np.ndarray = field(repr=False)
    eta: np.ndarray = field(repr=False)
    step_index: int = 0


@dataclass
class RunResult:
    """Monitored series of one chain.

    ``snapshots[k]`` is the full nodal field at ``times[k]``; ``path_steps[k]``
    is the matching index into the Brownian path.
    """

    times: np.ndarray
    path_steps: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    lp_weighted: np.ndarray
    hminus1: np.ndarray
    snapshots: np.ndarray = field(repr=False)
    extinction_time: float | None
    final_state: SolverState = field(repr=False)
    min_value: float
    threshold: float
    post_extinction_max_l1: float | None
    dt: float
    horizon: float
    dt_halvings: int = 0
    lp_p: float = 2.0
    residuals: dict = field(default_factory=dict)

    @property
    def absorbed(self):
        if self.extinction_time is None:
            return None
        return self.post_extinction_max_l1 <= 2 * self.threshold * self._volume

    _volume: float = 1.0

    def series_table(self):
        cols = {"t": self.times, "l1": self.l1, "l2": self.l2,
                "lp_weighted": self.lp_weighted, "hminus1": self.hminus1}
        for name, vals in self.residuals.items():
            cols[f"residual_{name}"] = np.asarray(vals)
        return cols


# ---------------------------------------------------------------------------
# Newton kernels


def _solve_tridiag_or_sparse(grid, diag, offdiag_scale, rhs, row_scale):
    """Solve ``(diag - diag(row_scale) L diag(offdiag_scale)) x = rhs`` on the interior."""
    if grid.dim == 1:
        h2 = grid.h[0] ** 2
        m = rhs.size
        ab = np.zeros((3, m))
        ab[1] = diag + 2.0 * row_scale * offdiag_scale / h2
        ab[0, 1:] = -row_scale[:-1] * offdiag_scale[1:] / h2
        ab[2, :-1] = -row_scale[1:] * offdiag_scale[:-1] / h2
        return sla.solve_banded((1, 1), ab, rhs, check_finite=False)
    A = sp.diags(diag) - sp.diags(row_scale) @ grid.laplacian_matrix @ sp.diags(offdiag_scale)
    return spla.spsolve(sp.csc_matrix(A), rhs)


def _residual(grid, u, b, c, delta, phi):
    # interior values only; zero Dirichlet data, phi(0) = 0
    v = phi(u) + delta * u if delta else phi(u)
    return u - c * (grid.laplacian_matrix @ v) - b


def _u_newton(grid, rhs, c, delta, phi, dphi, tol, max_iter, guess):
    # plain damped Newton in u; only used for the mollified nonlinearity
    u = guess.copy()
    G = _residual(grid, u, rhs, c, delta, phi)
    r = np.abs(G).max(initial=0.0)
    ones = np.ones_like(u)
    for _ in range(max_iter):
        if r <= tol:
            return u
        du = _solve_tridiag_or_sparse(grid, ones, dphi(u) + delta, -G, c)
        lam = 1.0
        for _ in range(MAX_DAMPING + 1):
            trial = u + lam * du
            G_trial = _residual(grid, trial, rhs, c, delta, phi)
            r_trial = np.abs(G_trial).max(initial=0.0)
            if r_trial < r:
                break
            lam *= 0.5
        else:
            raise NewtonError("damping could not reduce the residual", r)
        u, G, r = trial, G_trial, r_trial
    if r <= tol:
        return u
    raise NewtonError(f"no convergence after {max_iter} iterations", r)


class _Flux:
    """Piecewise-quadratic energy of the flux ``v = phi_eps(u) + delta u``.

    With ``u = b + c lap v`` the step equation is the stationarity condition
    of ``E(v) = sum (Gamma(v) - b v)/c + v.(-lap v)/2`` where ``Gamma' `` is
    the inverse of ``u -> phi_eps(u) + delta u``. For ``delta = 0`` that
    inverse is ``eps v`` on the box ``|v| <= 1``.
    """

    def __init__(self, grid, b, c, eps, delta):
        self.grid, self.b, self.c, self.eps, self.delta = grid, b, c, eps, delta
        self.K = 1.0 / eps + delta
        self.vb = self.K * eps
        self.box = delta == 0

    def pieces(self, v):
        if self.box:
            return np.where(v >= 1.0, 1, np.where(v <= -1.0, -1, 0))
        return np.where(v > self.vb, 1, np.where(v < -self.vb, -1, 0))

    def inverse(self, v):
        eps, delta = self.eps, self.delta
        if self.box:
            return eps * v, np.full_like(v, eps)
        a = np.abs(v)
        inner = a <= self.vb
        return (np.where(inner, v / self.K, np.sign(v) * (eps + (a - self.vb) / delta)),
                np.where(inner, 1.0 / self.K, 1.0 / delta))

    def energy(self, v):
        a = np.abs(v)
        if self.box:
            G = a * a * self.eps / 2
        else:
            vb = self.vb
            G = np.where(a <= vb, a * a / (2 * self.K),
                         vb * vb / (2 * self.K) + self.eps * (a - vb) + (a - vb) ** 2 / (2 * self.delta))
        return float(np.sum((G - self.b * v) / self.c) - 0.5 * v @ (self.grid.laplacian_matrix @ v))

    def gradient(self, v):
        u = self.b + self.c * (self.grid.laplacian_matrix @ v)
        inv, dinv = self.inverse(v)
        return (inv - u) / self.c, dinv


def _flux_newton(grid, b, c, eps, delta, guess, max_iter):
    """Locate the piece pattern of the solution by damped Newton on the flux energy.

    A full Newton step that keeps the pattern (and, for ``delta = 0``, the
    multiplier signs at the box) is the exact minimizer; otherwise the step is
    backtracked on the energy. Returns the flux at the minimizer.
    """
    F = _Flux(grid, b, c, eps, delta)
    v = np.clip(guess / eps, -1.0, 1.0) + delta * guess
    E = F.energy(v)
    for _ in range(max_iter):
        g, dinv = F.gradient(v)
        P = F.pieces(v)
        fixed = (P != 0) & (P * g <= 0) if F.box else np.zeros(v.size, dtype=bool)
        # fixed nodes become identity rows with zero update
        diag = np.where(fixed, 1.0, dinv / c)
        coupling = np.where(fixed, 0.0, 1.0)
        dv = _solve_tridiag_or_sparse(grid, diag, coupling, np.where(fixed, 0.0, -g), coupling)
        trial = v + dv
        if F.box:
            g_new, _ = F.gradient(np.clip(trial, -1.0, 1.0))
            done = np.all(np.abs(trial[~fixed]) <= 1.0) and np.all(P[fixed] * g_new[fixed] <= 0)
            trial = np.clip(trial, -1.0, 1.0)
        else:
            done = np.array_equal(F.pieces(trial), P)
        if done:
            return trial
        E_trial, lam = F.energy(trial), 1.0
        while E_trial > E + 1e-4 * float(g @ (trial - v)):
            lam *= 0.5
            if lam < 1e-12:
                raise NewtonError("line search stalled on the flux energy", float(np.abs(c * g).max()))
            trial = v + lam * dv
            if F.box:
                trial = np.clip(trial, -1.0, 1.0)
            E_trial = F.energy(trial)
        v, E = trial, E_trial
    raise NewtonError(f"piece pattern not settled after {max_iter} iterations",
                      float(np.abs(c * F.gradient(v)[0]).max()))


def _polish(grid, b, c, eps, delta, v):
    # with the pattern fixed the equation is linear in u
    P = (np.where(np.abs(v) >= 1.0, np.sign(v), 0.0) if delta == 0
         else np.where(np.abs(v) > 1.0 + delta * eps, np.sign(v), 0.0))
    kappa = np.where(P == 0, 1.0 / eps + delta, delta)
    return _solve_tridiag_or_sparse(grid, np.ones_like(b), kappa, b + c * (grid.laplacian_matrix @ P), c)


def implicit_diffusion(grid, rhs, c, reg, tol, max_iter, guess=None):
    """Solve ``u - c (lap phi(u) + delta lap u) = rhs`` on the interior.

    ``rhs`` and ``c`` are interior vectors; ``phi`` is the smoothed sign of
    ``reg``. For the clipped nonlinearity (``tau = 0``) Newton runs on the
    flux energy and finishes with a linear solve in ``u``. The mollified
    nonlinearity uses damped Newton in ``u`` directly. The accepted max-norm
    residual is ``tol * max(1, ||rhs||_inf)``.
    """
    guess = rhs.copy() if guess is None else guess.copy()
    phi, dphi = nonlinearity(reg)
    scale = tol * max(1.0, float(np.abs(rhs).max(initial=0.0)))
    if reg.tau > 0:
        return _u_newton(grid, rhs, c, reg.delta, phi, dphi, scale, max_iter, guess)
    v = _flux_newton(grid, rhs, c, reg.eps, reg.delta, guess, max_iter)
    u = _polish(grid, rhs, c, reg.eps, reg.delta, v)
    r = float(np.abs(_residual(grid, u, rhs, c, reg.delta, phi)).max(initial=0.0))
    if r > scale:
        raise NewtonError("residual above tolerance after the final solve", r)
    return u


# ---------------------------------------------------------------------------
# Y-chain


def _path_stride(config, path):
    k = int(round(config.dt / path.dt))
    if k < 1 or abs(k * path.dt - config.dt) > 1e-9 * config.dt:
        raise ValueError(f"solver dt {config.dt} is not a multiple of path dt {path.dt}")
    return k


def _y_update(grid, Y, dt, mu, mt, config):
    inner = grid.interior
    c = dt * np.exp(mu[inner])
    u = implicit_diffusion(grid, Y[inner], c, config.reg, config.newton_tol,
                           config.newton_max_iter, guess=Y[inner])
    out = grid.zeros()
    out[inner] = u * np.exp(-mt[inner] * dt)
    return out


def _y_update_retry(grid, Y, dt, mu, mt, config, level=0, counter=None):
    try:
        return _y_update(grid, Y, dt, mu, mt, config)
    except NewtonError:
        if level >= MAX_HALVINGS:
            raise
        if counter is not None:
            counter[0] += 1
        log.debug("Newton failed at dt=%g, halving", dt)
        Y = _y_update_retry(grid, Y, dt / 2, mu, mt, config, level + 1, counter)
        return _y_update_retry(grid, Y, dt / 2, mu, mt, config, level + 1, counter)


def step_Y(state, config, drift):
    """One step of the Y-chain from ``state``; raises :class:`NewtonError`."""
    phi, _ = nonlinearity(config.reg)
    k = _path_stride(config, drift.path)
    mu = drift.mu_of_t(state.step_index * k)
    Y = _y_update(drift.grid, state.Y, config.dt, mu, drift.mu_tilde, config)
    return SolverState(state.t + config.dt, Y, phi(Y), state.step_index + 1)


def detect_extinction(grid, Y, threshold):
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    return lp_norm(grid, Y, 1.0) <= threshold * grid.volume


def _check_initial(grid, x0, check_positivity):
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != tuple(grid.shape):
        raise ValueError("initial datum does not match the grid")
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial datum has non-finite entries")
    if check_positivity and np.any(x0 < 0):
        raise ValueError("initial datum has negative nodes")
    return grid.with_zero_boundary(x0)


class _Recorder:
    def __init__(self, grid, mt, p):
        self.grid, self.mt, self.p = grid, mt, p
        self.rows, self.snaps = [], []

    def add(self, t, path_step, Y):
        g = self.grid
        w = np.exp(self.p * self.mt * t)
        self.rows.append((t, path_step, lp_norm(g, Y, 1.0), lp_norm(g, Y, 2.0),
                          integrate(g, w * np.abs(Y) ** self.p) ** (1.0 / self.p),
                          hminus1_norm(g, Y)))
        self.snaps.append(Y.copy())

    def result(self, **kw):
        a = np.array(self.rows).reshape(-1, 6)
        res = RunResult(times=a[:, 0], path_steps=a[:, 1].astype(int), l1=a[:, 2], l2=a[:, 3],
                        lp_weighted=a[:, 4], hminus1=a[:, 5], snapshots=np.array(self.snaps),
                        lp_p=self.p, **kw)
        res._volume = self.grid.volume
        return res


def _run_chain(x0, drift, config, horizon, update, check_positivity, stop_at_extinction):
    grid = drift.grid
    Y = _check_initial(grid, x0, check_positivity)
    k = _path_stride(config, drift.path)
    n_steps = int(round(horizon / config.dt))
    if n_steps * k > drift.path.num_steps:
        raise ValueError("Brownian path is shorter than the requested horizon")
    threshold = config.threshold_for(Y)
    rec = _Recorder(grid, drift.mu_tilde, config.lp_p)
    rec.add(0.0, 0, Y)
    min_value = float(Y.min())
    tau0, post_max, after = None, None, 0
    if detect_extinction(grid, Y, threshold):
        tau0, post_max = 0.0, lp_norm(grid, Y, 1.0)
    halvings = [0]
    n = 0
    while n < n_steps:
        if tau0 is not None and stop_at_extinction and after >= ABSORPTION_STEPS:
            break
        try:
            Y = update(Y, n, k, halvings)
        except NewtonError as exc:
            raise StepFailure(n * config.dt, n, exc) from exc
        n += 1
        t = n * config.dt
        min_value = min(min_value, float(Y.min()))
        l1 = lp_norm(grid, Y, 1.0)
        newly = False
        if tau0 is None and l1 <= threshold * grid.volume:
            tau0, post_max, newly = t, l1, True
        elif tau0 is not None:
            after += 1
            post_max = max(post_max, l1)
        if n % config.monitor_stride == 0 or newly or n == n_steps:
            rec.add(t, n * k, Y)
    if rec.rows[-1][0] != n * config.dt:
        rec.add(n * config.dt, n * k, Y)
    phi, _ = nonlinearity(config.reg)
    final = SolverState(n * config.dt, Y, phi(Y), n)
    return rec.result(extinction_time=tau0, final_state=final, min_value=min_value,
                      threshold=threshold, post_extinction_max_l1=post_max, dt=config.dt,
                      horizon=horizon, dt_halvings=halvings[0])


def run_Y(x0, drift, config, horizon, check_positivity=True, stop_at_extinction=True):
    """Iterate :func:`step_Y` up to ``horizon`` or extinction.

    A failing Newton solve is retried on halved sub-steps (at most
    ``MAX_HALVINGS`` levels). After the first detection the chain runs
    ``ABSORPTION_STEPS`` more steps to record re-ignition, then stops.
    """
    grid = drift.grid

    def update(Y, n, k, halvings):
        mu = drift.mu_of_t(n * k)
        return _y_update_retry(grid, Y, config.dt, mu, drift.mu_tilde, config, counter=halvings)

    return _run_chain(x0, drift, config, horizon, update, check_positivity, stop_at_extinction)


def transform_to_X(Y, mu_t):
    Y = np.asarray(Y, dtype=float)
    mu_t = np.asarray(mu_t, dtype=float)
    if Y.shape != mu_t.shape:
        raise ValueError("shape mismatch")
    return np.exp(-mu_t) * Y


# ---------------------------------------------------------------------------
# direct Itô chain


def step_X_ito(X, config, basis, dbeta, drift_enabled=True):
    """IMEX Euler-Maruyama step: implicit ``lap phi(X)``, then explicit noise."""
    grid = basis.grid
    X = np.asarray(X, dtype=float)
    if drift_enabled:
        Xs = _x_drift_retry(grid, X, config.dt, config)
    else:
        Xs = X.copy()
    if basis.count:
        Xs = Xs * (1.0 + np.tensordot(np.asarray(dbeta, dtype=float), basis.components, axes=1))
    Xs[grid.boundary] = 0.0
    return Xs


def _x_drift_retry(grid, X, dt, config, level=0):
    inner = grid.interior
    try:
        c = np.full(grid.n_interior, dt)
        u = implicit_diffusion(grid, X[inner], c, config.reg, config.newton_tol,
                               config.newton_max_iter, guess=X[inner])
        return grid.embed(u)
    except NewtonError:
        if level >= MAX_HALVINGS:
            raise
        X = _x_drift_retry(grid, X, dt / 2, config, level + 1)
        return _x_drift_retry(grid, X, dt / 2, config, level + 1)


def run_X_ito(x0, drift, config, horizon, drift_enabled=True, check_positivity=True,
              stop_at_extinction=False):
    """Direct Itô chain driven by the increments of ``drift.path``."""
    basis = drift.basis

    def update(X, n, k, halvings):
        db = drift.path.increment(n * k, (n + 1) * k)
        return step_X_ito(X, config, basis, db, drift_enabled)

    return _run_chain(x0, drift, config, horizon, update, check_positivity, stop_at_extinction)


@dataclass
class ConsistencyReport:
    max_discrepancy: float
    times: np.ndarray
    discrepancy: np.ndarray
    y_run: RunResult = field(repr=False)
    x_run: RunResult = field(repr=False)


def consistency_check_transformation(x0, drift, config, horizon):
    """Max over monitored times of ``||X_direct - e^{-mu} Y||_{H^-1}``."""
    y_run = run_Y(x0, drift, config, horizon, stop_at_extinction=False)
    x_run = run_X_ito(x0, drift, config, horizon)
    grid = drift.grid
    disc = np.array([
        hminus1_norm(grid, xs - transform_to_X(ys, drift.mu_of_t(ps)))
        for xs, ys, ps in zip(x_run.snapshots, y_run.snapshots, y_run.path_steps)
    ])
    return ConsistencyReport(float(disc.max(initial=0.0)), y_run.times, disc, y_run, x_run)


def positivity_monitor(run):
    return run.min_value


@dataclass
class ContractionReport:
    C_hat: float
    times: np.ndarray
    distances: np.ndarray
    initial_distance: float


def contraction_check(x0_a, x0_b, drift, config, horizon, slack=1e-12):
    """Smallest ``C >= 0`` with ``|Ya - Yb|^2_{H^-1} <= e^{C t} |xa - xb|^2_{H^-1}``."""
    grid = drift.grid
    ra = run_Y(x0_a, drift, config, horizon, stop_at_extinction=False)
    rb = run_Y(x0_b, drift, config, horizon, stop_at_extinction=False)
    d = np.array([hminus1_norm(grid, a - b) for a, b in zip(ra.snapshots, rb.snapshots)])
    d0 = d[0]
    if d0 == 0.0:
        return ContractionReport(0.0, ra.times, d, 0.0)
    C = 0.0
    for t, dist in zip(ra.times[1:], d[1:]):
        ratio = dist**2 / d0**2
        if ratio > 1 + slack:
            C = max(C, math.log(ratio) / t)
    return ContractionReport(C, ra.times, d, d0)


def time_change_homogeneous(path, basis, t):
    """``F(t) = int_0^t exp(mu_r + mu_tilde r) dr`` for spatially constant profiles."""
    if not basis.is_spatially_constant():
        raise ValueError("time change requires spatially constant noise profiles")
    n = int(round(t / path.dt))
    if n > path.num_steps:
        raise ValueError("t beyond the path horizon")
    if basis.count == 0:
        return n * path.dt
    f = basis.components.reshape(basis.count, -1)[:, 0]
    r = path.times[: n + 1]
    integrand = np.exp(-path.values[: n + 1] @ f + 0.5 * np.sum(f**2) * r)
    return float(np.trapezoid(integrand, dx=path.dt))


def deterministic_drift(grid, horizon, dt):
    """Noise-free drift fields over ``[0, horizon]`` (zero-component path)."""
    from .noise import NoiseBasis, sample_path
    basis = NoiseBasis.none(grid)
    return DriftFields.build(basis, sample_path(basis, horizon, dt, 0))
