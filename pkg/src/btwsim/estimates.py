"""Constants, a-priori bounds and run monitors for the extinction argument."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import gradient, integrate, laplacian_apply, lp_norm, sobolev_q
from .noise import check_hypothesis_H, find_flat_interval, mu_at
from .regularize import phi_eps, psi_eps


@dataclass(frozen=True)
class ExtinctionBoundParams:
    """Exponents and constants feeding the extinction-time bound.

    ``p`` is the integrability of the initial datum; the derived exponents
    follow ``p_tilde = (p + d/2)/2`` and ``tau_exp = p - p_tilde``. For
    ``d = 1`` the embedding exponent is infinite and ``alpha = 0``.
    """

    d: int
    p: float
    C_w: float = 1.0
    C1_hat: float = 1.0
    t0_hat: float = 0.0
    q_d2: float = 6.0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        if not self.p > max(self.d / 2, 1.0):
            raise ValueError(f"p must exceed max(d/2, 1) = {max(self.d / 2, 1.0)}")
        if self.d == 1 and not self.p_tilde > 1:
            raise ValueError("d=1 needs p_tilde > 1, i.e. p > 3/2")
        if not 0 <= self.alpha < 1:
            raise ValueError(f"alpha = {self.alpha:.4g} is not below 1; increase p")

    @property
    def q(self):
        return sobolev_q(self.d, self.q_d2)

    @property
    def p_tilde(self):
        return (self.p + self.d / 2) / 2

    @property
    def tau_exp(self):
        return self.p - self.p_tilde

    @property
    def p_tilde_star(self):
        return self.p_tilde / (self.p_tilde - 1)

    @property
    def alpha(self):
        q = self.q
        return 0.0 if math.isinf(q) else 2 * self.p_tilde_star / q

    def as_dict(self):
        return {"d": self.d, "p": self.p, "p_tilde": self.p_tilde, "tau_exp": self.tau_exp,
                "q": self.q, "alpha": self.alpha, "C_w": self.C_w, "C1_hat": self.C1_hat,
                "t0_hat": self.t0_hat}


@dataclass
class EnergyReport:
    name: str
    times: np.ndarray
    residuals: np.ndarray
    tolerance: float

    @property
    def worst_violation(self):
        return float(np.max(self.residuals, initial=-math.inf))

    @property
    def passed(self):
        return bool(self.worst_violation <= self.tolerance)

    def summary(self):
        return {"pass": self.passed, "worst_violation": self.worst_violation,
                "tolerance": self.tolerance}


# ---------------------------------------------------------------------------
# h1, h2, g


def _exp_weight(drift, step, p):
    t = step * drift.path.dt
    expo = drift.mu_of_t(step) + p * drift.mu_tilde * t
    return None if expo.max() > 700 else np.exp(expo)


def h1(drift, step, p):
    """``sup_interior |lap exp(mu_r + p mu_tilde r)|``; ``inf`` on overflow."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if drift.basis.count == 0:
        return 0.0
    w = _exp_weight(drift, step, p)
    if w is None:
        return math.inf
    grid = drift.grid
    return float(np.abs(laplacian_apply(grid, w)[grid.interior]).max())


def h1_series(drift, steps, p):
    return np.array([h1(drift, s, p) for s in steps])


def h2(x, p, params, reg, times=None, h1_values=None):
    """A-priori bound on ``int |e^{-mu_s} w Y_r|^p`` at the last of ``times``.

    ``h1_values`` must be sampled for exponent ``p + tau_exp`` on ``times``
    starting at 0; without them (or with ``eps = delta = 0``) the value is
    the limit ``C1 C_w^p x^{p/(p+tau)}``.
    """
    tau = params.tau_exp
    eps, delta = (reg.eps, reg.delta) if reg is not None else (0.0, 0.0)
    inner = x
    if times is not None and len(times) > 1 and (eps > 0 or delta > 0):
        times = np.asarray(times, dtype=float)
        hv = np.asarray(h1_values, dtype=float)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (hv[1:] + hv[:-1]) * np.diff(times))])
        total = cum[-1]
        inner = math.exp(delta * total) * x
        if eps > 0:
            inner += eps ** (p + tau - 1) * float(np.trapezoid(np.exp(delta * (total - cum)) * hv, times))
    return params.C1_hat * params.C_w**p * inner ** (p / (p + tau))


def g_rate(mu_r, mu_s, params, eta_r=None, h2_value=1.0):
    """Decay rate of the weighted L1 functional at time ``r`` of a flat interval."""
    inf_e = float(np.exp(np.asarray(mu_r) - np.asarray(mu_s)).min())
    if params.d == 1:
        if eta_r is None:
            raise ValueError("d=1 needs the selection eta_r")
        return inf_e * float(np.abs(eta_r).max(initial=0.0))
    expo = 2 * params.p_tilde_star / (params.p_tilde * params.q)
    return inf_e / h2_value**expo


def g_floor(params, x0_norm):
    """Lower bound for ``g`` on sufficiently flat intervals.

    ``d >= 2``: ``(1/(2 (1 v C1 C_w ||x0||_p)))^alpha``. ``d = 1``: 1/2,
    from ``inf e^{mu_r - mu_s} >= 1/2`` and ``||eta||_inf = 1`` before the
    functional drops below the smoothing offset.
    """
    if params.d == 1:
        return 0.5
    scale = max(1.0, params.C1_hat * params.C_w * x0_norm)
    return (1.0 / (2 * scale)) ** params.alpha


def flatness_cap(basis, params):
    """Largest path oscillation keeping ``inf e^{mu_r - mu_s}`` above the floor's factor."""
    total = float(np.sum(basis.c2_norms[:, 0])) if basis.count else 0.0
    if total == 0:
        return math.inf
    factor = 1.0 if params.d == 1 else params.alpha
    return factor * math.log(2.0) / total


def flatness_threshold(basis, weight, margin=0.05, iters=200):
    """Largest path oscillation ``eps`` that keeps ``lap(w e^nu) <= -margin e^nu``.

    With ``|grad nu| <= eps a`` and ``|lap nu| <= eps b`` (``a``, ``b`` summed
    over the profiles) the expansion of ``lap(w e^nu)`` is bounded by
    ``-1 + 2 eps a |grad w| + C_w (eps^2 a^2 + eps b)``.
    """
    if basis.count == 0:
        return math.inf
    a = float(np.sum(basis.c2_norms[:, 1]))
    b = float(np.sum(basis.c2_norms[:, 2]))
    if a == 0 and b == 0:
        return math.inf
    grid = basis.grid
    gw = float(np.sqrt(sum(g**2 for g in gradient(grid, weight.w))).max())

    def bound(e):
        return -1 + 2 * e * a * gw + weight.C_w * (e * e * a * a + e * b)

    lo, hi = 0.0, 1.0
    while bound(hi) <= -margin:
        hi *= 2
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if bound(mid) <= -margin:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * hi:
            break
    return lo


@dataclass
class ExtinctionBound:
    scale: float
    alpha: float
    g_floor: float
    L_star: float

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        a = self.alpha
        base = np.maximum(self.scale ** (1 - a) - (1 - a) * self.g_floor * t, 0.0)
        out = base ** (1 / (1 - a))
        return float(out) if out.ndim == 0 else out

    def table(self, n=100):
        t = np.linspace(0.0, max(self.L_star, 1e-12) * 1.1, n)
        return t, self(t)


def extinction_upper_bound(params, x0_norm, g_floor_value, offset=None):
    """Bound curve ``B(t)`` and the flat length ``L_star`` where it reaches 0.

    ``offset`` overrides ``C1 C_w ||x0||_p`` as the starting value.
    """
    if not g_floor_value > 0:
        raise ValueError("g_floor must be positive")
    a = params.alpha
    scale = params.C1_hat * params.C_w * x0_norm if offset is None else offset
    L = scale ** (1 - a) / ((1 - a) * g_floor_value) if scale > 0 else 0.0
    return ExtinctionBound(scale, a, g_floor_value, L)


# ---------------------------------------------------------------------------
# comparison ODE


def ode_h_closed_form(q0, alpha, K, g_integral, t):
    """Solution of ``h' = -g (h - K)^alpha`` from ``q0``, frozen at ``K`` after the hit."""
    G = g_integral(t) if callable(g_integral) else g_integral
    base = np.maximum((q0 - K) ** (1 - alpha) - (1 - alpha) * np.asarray(G, dtype=float), 0.0)
    out = base ** (1 / (1 - alpha)) + K
    return float(out) if np.ndim(out) == 0 else out


def ode_bound_oracle(q0, alpha, K, g, horizon, dt):
    """RK4 for ``f' = -g(t) ((f - K) v 0)^alpha``, clamped at ``K``.

    Returns ``(times, values)``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = int(math.ceil(horizon / dt - 1e-12))
    ts = np.linspace(0.0, n * dt, n + 1)

    def rhs(t, f):
        return -g(t) * max(f - K, 0.0) ** alpha

    vals = np.empty(n + 1)
    f = float(q0)
    vals[0] = f
    for i in range(n):
        t = ts[i]
        k1 = rhs(t, f)
        k2 = rhs(t + dt / 2, f + dt / 2 * k1)
        k3 = rhs(t + dt / 2, f + dt / 2 * k2)
        k4 = rhs(t + dt, f + dt * k3)
        f = max(f + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4), K)
        vals[i + 1] = f
    return ts, vals


# ---------------------------------------------------------------------------
# run monitors


def _snapshot_mu(drift, run):
    return [drift.mu_of_t(int(s)) for s in run.path_steps]


def monitor_weighted_lp(run, p, drift, x0, reg, tol=1e-6):
    """``int e^{p mu_tilde t}|Y_t|^p <= int |x0|^p + Slack(t) + tol`` at each checkpoint.

    ``Slack`` carries the smoothing term ``eps^(p-1) int int |lap e^{mu + p mu_tilde r}|``
    and the viscosity term ``delta int int |Y|^p lap e^{mu + p mu_tilde r}``, both
    by left-endpoint sums on the monitored times.
    """
    grid = drift.grid
    x0 = grid.with_zero_boundary(x0)
    base = integrate(grid, np.abs(x0) ** p)
    mt = drift.mu_tilde
    lhs = np.array([integrate(grid, np.exp(p * mt * t) * np.abs(Y) ** p)
                    for t, Y in zip(run.times, run.snapshots)])
    slack = np.zeros(len(run.times))
    acc = 0.0
    for i in range(1, len(run.times)):
        dt = run.times[i] - run.times[i - 1]
        t = run.times[i - 1]
        e = np.exp(drift.mu_of_t(int(run.path_steps[i - 1])) + p * mt * t)
        lap = laplacian_apply(grid, e)
        lap[grid.boundary] = 0.0
        acc += dt * reg.eps ** (p - 1) * integrate(grid, np.abs(lap))
        if reg.delta:
            acc += dt * reg.delta * integrate(grid, np.abs(run.snapshots[i - 1]) ** p * lap)
        slack[i] = acc
    resid = lhs - base - slack
    return EnergyReport(f"lp_decay_p{p:g}", run.times.copy(), resid, tol)


def monitor_energy_L1(run, drift, rho, reg, u=0.0, v=None, tol=1e-6):
    """Weighted energy inequality for ``psi_eps(Y)`` on ``[u, t]`` for every checkpoint ``t``.

    Dissipation and source integrals use right-endpoint sums on the
    monitored times (matching the implicit step). Residuals are
    ``LHS - RHS``; the tolerance scales with the interval length.
    """
    grid = drift.grid
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("weight must be nonnegative")
    eps, delta = reg.eps, reg.delta
    times = run.times
    v = times[-1] if v is None else v
    sel = np.flatnonzero((times >= u - 1e-12) & (times <= v + 1e-12))
    i0 = sel[0]
    start = integrate(grid, psi_eps(run.snapshots[i0], eps) * rho)
    acc = 0.0
    resid = [0.0]
    out_t = [times[i0]]
    for i in sel[1:]:
        dt = times[i] - times[i - 1]
        Y = run.snapshots[i]
        mu = drift.mu_of_t(int(run.path_steps[i - 1]))
        em = np.exp(mu)
        ph = phi_eps(Y, eps)
        dis = integrate(grid, rho * em * sum(g**2 for g in gradient(grid, ph)))
        lap = laplacian_apply(grid, rho * em)
        lap[grid.boundary] = 0.0
        src = 0.5 * integrate(grid, ph**2 * lap)
        if delta:
            src += delta * integrate(grid, psi_eps(Y, eps) * lap)
        acc += dt * (dis - src)
        lhs_minus_rhs = integrate(grid, psi_eps(Y, eps) * rho) + acc - start
        resid.append(lhs_minus_rhs - tol * (times[i] - times[i0]))
        out_t.append(times[i])
    return EnergyReport("energy_l1", np.array(out_t), np.array(resid), 0.0)


def supersolution_field(t, mu_tilde, M, nu=0.0):
    """``K(t) = e^{-mu_tilde t} M + nu t``; ``nu > 0`` is the perturbed version."""
    return np.exp(-np.asarray(mu_tilde) * t) * M + nu * t


def supersolution_check(run_y, drift, x0_sup, tol=1e-6):
    """Nodal ``X_t <= exp(-mu_t - mu_tilde t) ||x0||_inf`` with ``X = e^{-mu} Y``."""
    grid = drift.grid
    resid = []
    for t, ps, Y in zip(run_y.times, run_y.path_steps, run_y.snapshots):
        mu = drift.mu_of_t(int(ps))
        X = np.exp(-mu) * Y
        bound = np.exp(-mu) * supersolution_field(t, drift.mu_tilde, x0_sup)
        resid.append(float((X - bound)[grid.interior].max()))
    return EnergyReport("supersolution", run_y.times.copy(), np.array(resid), tol)


# ---------------------------------------------------------------------------
# noise constants and the end-to-end verdict


def estimate_noise_constants(drift, params, horizon, inflation=2.0, samples=200):
    """Pathwise surrogate for the constant of the moment hypothesis.

    Hölder with exponents ``(r, 1 + tau)`` gives
    ``int e^{-mu_s}|Y_s| <= (int e^{-r(mu_s + mu_tilde s)})^{1/r} ||e^{mu_tilde s} Y_s||_{1+tau}``
    with ``r = (1 + tau)/tau``; the max over the sampled horizon is inflated.
    """
    tau = params.tau_exp
    r = (1 + tau) / tau
    steps = np.unique(np.linspace(int(round(params.t0_hat / drift.path.dt)),
                                  int(round(horizon / drift.path.dt)), samples).astype(int))
    rep = check_hypothesis_H(drift.basis, drift.path, r, steps * drift.path.dt)
    return inflation * rep.max_integral ** (1 / r), rep


@dataclass
class ExtinctionVerdict:
    verdict: str
    s: float | None = None
    L_star: float | None = None
    eps_star: float | None = None
    g_floor: float | None = None
    start_value: float | None = None
    tau0: float | None = None
    worst_violation: float | None = None
    tolerance: float = 1e-4
    detail: dict = field(default_factory=dict)

    def summary(self):
        # inconclusive is neither a pass nor a failure
        passed = None if self.verdict == "inconclusive" else self.verdict == "pass"
        return {"pass": passed, "verdict": self.verdict,
                "worst_violation": self.worst_violation, "tolerance": self.tolerance,
                "s": self.s, "L_star": self.L_star, "tau0": self.tau0}


def _h2_along_path(drift, params, reg, x0, max_samples=2000):
    """``(times, h2(t))`` for the weighted L1 functional (``p = 1``) on a step subsample."""
    path = drift.path
    grid = drift.grid
    tau = params.tau_exp
    x_pow = lp_norm(grid, x0, 1 + tau) ** (1 + tau)
    steps = np.arange(0, path.num_steps + 1, max(1, path.num_steps // max_samples))
    times = steps * path.dt
    hv = h1_series(drift, steps, 1 + tau)
    if not np.all(np.isfinite(hv)):
        raise OverflowError("h1 overflowed on the stored path")
    # int_0^s e^{delta (H(s) - H(r))} h1(r) dr with H the running integral of h1
    H = np.concatenate([[0.0], np.cumsum(0.5 * (hv[1:] + hv[:-1]) * np.diff(times))])
    f = np.exp(-reg.delta * H) * hv
    inner_int = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(times))])
    inner = np.exp(reg.delta * H) * (x_pow + reg.eps ** tau * inner_int)
    return times, params.C1_hat * params.C_w * inner ** (1 / (1 + tau))


def predict_and_verify_extinction(run, drift, params, reg, x0, weight, tol=1e-4,
                                  margin=0.05, max_rounds=100):
    """Find a flat interval of length ``L_star`` and check the weighted L1 bound on it.

    The start value at ``s`` is ``max(h2(s), C1 C_w ||x0||_p)``, so ``L_star``
    grows with ``s``; the interval search alternates between the two until the
    flat interval found is at least as long as the ``L_star`` of its start.
    The monitored functional is ``int psi_eps(Y_t) w e^{-mu_s}``; it must stay
    under ``B(t - s) + K_eps + tol`` with ``K_eps = C_w ||e^{-mu_s}||_inf eps |O|/2``,
    and the detected extinction time must not exceed ``s + L_star + 2 dt``.
    Without noise every interval is flat and ``s = t0_hat``.
    """
    grid = drift.grid
    path = drift.path
    x0 = grid.with_zero_boundary(x0)
    eps_star = min(flatness_threshold(drift.basis, weight, margin), flatness_cap(drift.basis, params))
    x_norm = lp_norm(grid, x0, params.p)
    gf = g_floor(params, x_norm)
    h_t, h_v = _h2_along_path(drift, params, reg, x0)

    def bound_at(s):
        i = min(int(np.searchsorted(h_t, s - 1e-12)), len(h_t) - 1)
        start = max(float(h_v[i]), params.C1_hat * params.C_w * x_norm)
        return extinction_upper_bound(params, x_norm, gf, offset=start)

    tau0 = run.extinction_time

    def verdict(kind, s=None, bound=None, worst=None, **detail):
        return ExtinctionVerdict(kind, s, None if bound is None else bound.L_star, eps_star, gf,
                                 None if bound is None else bound.scale, tau0, worst, tol, detail)

    s = params.t0_hat
    bound = bound_at(s)
    if bound.L_star == 0:
        return verdict("pass", s, bound, 0.0, reason="zero initial datum")
    if not math.isinf(eps_star):
        for _ in range(max_rounds):
            interval = find_flat_interval(path, s, bound.L_star, eps_star)
            if interval is None:
                return verdict("inconclusive", bound=bound,
                               reason="no flat interval of the required length on the path")
            s = interval[0]
            needed = bound_at(s)
            if needed.L_star <= interval[1] - interval[0]:
                bound = needed
                break
            bound = needed
        else:
            return verdict("inconclusive", bound=bound, reason="interval search did not settle")
    if tau0 is not None and tau0 < s:
        return verdict("pass", s, bound, 0.0, reason="extinct before the interval")
    s_step = int(round(s / path.dt))
    mu_s = mu_at(drift.basis, path, s_step)
    rho = weight.w * np.exp(-mu_s)
    K_eps = weight.C_w * float(np.exp(-mu_s).max()) * reg.eps / 2 * grid.volume
    t_end = s + bound.L_star
    sel = np.flatnonzero((run.times >= s - 1e-12) & (run.times <= t_end + 1e-12))
    series = []
    worst = -math.inf
    for i in sel:
        val = integrate(grid, psi_eps(run.snapshots[i], reg.eps) * rho)
        b = bound(run.times[i] - s) + K_eps
        worst = max(worst, val - b)
        series.append((float(run.times[i]), val, b))
    worst = float(worst) if sel.size else None
    if tau0 is None:
        if run.times[-1] < t_end + 2 * run.dt:
            return verdict("inconclusive", s, bound, worst, K_eps=K_eps, series=series,
                           reason="run ends before s + L_star")
        return verdict("fail", s, bound, worst, K_eps=K_eps, series=series,
                       reason="not extinct by s + L_star")
    ok = (worst is None or worst <= tol) and tau0 <= t_end + 2 * run.dt
    return verdict("pass" if ok else "fail", s, bound, worst, K_eps=K_eps, series=series)
