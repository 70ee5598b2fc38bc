"""Invariant suite behind ``btwsim verify``.

Each check returns ``{"pass": bool, ...details}``; the run-level checks use
the configured experiment, the rest are fixed oracles that take well under a
second together.
"""

from __future__ import annotations

import math

import numpy as np

from . import estimates as est
from .grid import SpatialGrid, hminus1_norm, laplacian_apply, torricelli_weight
from .regularize import phi_eps, psi_eps, resolvent_J, zeta
from .solver import StepFailure, implicit_diffusion, step_X_ito


def check_regularization(n_samples=10_000, seed=0):
    rng = np.random.default_rng(seed)
    r = np.sort(rng.normal(scale=2.0, size=n_samples))
    worst = 0.0
    for eps in np.geomspace(1e-4, 1.0, 5):
        ph = phi_eps(r, eps)
        dphi, dr = np.diff(ph), np.diff(r)
        gap = np.abs(r) - psi_eps(r, eps)
        worst = max(worst,
                    np.max(np.abs(ph)) - 1.0,
                    -np.min(dphi),
                    np.max(dphi - dr / eps),
                    np.max(np.abs(resolvent_J(r, eps) - (r - eps * ph))),
                    -np.min(gap),
                    np.max(gap) - 2 * eps,
                    max(np.max(zeta(r, p, eps)) - eps ** (p - 1) / p for p in (1.0, 2.0, 4.0)))
    return {"pass": bool(worst <= 1e-12), "worst_violation": float(worst), "tolerance": 1e-12}


def check_grid_oracles():
    g = SpatialGrid.unit(1001)
    cw = torricelli_weight(g).C_w
    errs, hs = [], []
    for n in (33, 65, 129):
        gg = SpatialGrid.unit(n)
        x = gg.coords[0]
        u = np.sin(np.pi * x)
        lap = laplacian_apply(gg, u)
        errs.append(np.abs(lap + np.pi**2 * u)[gg.interior].max())
        hs.append(gg.h[0])
    order = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    hm = hminus1_norm(g, np.sin(np.pi * g.coords[0]))
    hm_rel = abs(hm - 1 / (math.pi * math.sqrt(2))) * math.pi * math.sqrt(2)
    ok = abs(cw - 1.125) <= 1e-8 and 1.9 <= order <= 2.1 and hm_rel <= 5e-3
    return {"pass": ok, "C_w": cw, "laplacian_order": order, "hminus1_rel_error": hm_rel}


def check_ode_oracle():
    ts, vals = est.ode_bound_oracle(1.0, 0.5, 0.0, lambda t: 1.0, 1.8, 1e-3)
    closed = est.ode_h_closed_form(1.0, 0.5, 0.0, ts, ts)
    err = float(np.abs(vals - closed).max())
    hit = est.ode_h_closed_form(1.0, 0.5, 0.0, 2.0, 2.0)
    return {"pass": err <= 1e-6 and hit == 0.0, "max_error": err, "value_at_2": hit}


def check_zero_fixed_point(setup):
    """``Y = 0`` is invariant under the implicit solve and the Itô step."""
    grid, scheme = setup.grid, setup.scheme
    n = grid.n_interior
    u = implicit_diffusion(grid, np.zeros(n), np.full(n, scheme.dt), scheme.reg,
                           scheme.newton_tol, scheme.newton_max_iter)
    x = step_X_ito(grid.zeros(), scheme, setup.basis, np.ones(setup.basis.count))
    worst = float(max(np.abs(u).max(initial=0.0), np.abs(x).max()))
    return {"pass": worst == 0.0, "worst_violation": worst}


def check_eta_selection(run, eps):
    """``eta = phi_eps(Y)`` lies in [-1, 1], has the sign of ``Y`` and equals it where ``|Y| > eps``."""
    worst = 0.0
    for Y in run.snapshots:
        eta = phi_eps(Y, eps)
        big = np.abs(Y) > eps
        worst = max(worst, float(np.abs(eta).max()) - 1.0, float(-(eta * Y).min()),
                    float(np.abs(eta[big] - np.sign(Y[big])).max(initial=0.0)))
    return {"pass": worst <= 0.0, "worst_violation": worst}


def run_checks(cfg, simulate):
    """All checks for ``cfg``; ``simulate`` is :func:`experiment.simulate`."""
    checks = {"regularization": check_regularization(), "grid_oracles": check_grid_oracles(),
              "ode_oracle": check_ode_oracle()}
    try:
        res = simulate(cfg)
    except StepFailure as exc:
        checks["newton"] = {"pass": False, "t": exc.t, "step": exc.step,
                            "residual": exc.residual, "message": str(exc)}
        return checks, None
    s = res.summary
    checks["zero_fixed_point"] = check_zero_fixed_point(res.setup)
    checks["eta_selection"] = check_eta_selection(res.run, cfg.scheme.eps)
    floor = -10 * cfg.scheme.newton_tol
    checks["positivity"] = {"pass": s["min_value"] >= floor, "min_value": s["min_value"],
                            "floor": floor}
    if s["extinction_time"] is not None:
        checks["absorption"] = {"pass": bool(s["absorbed"]),
                                "post_extinction_max_l1": s["post_extinction_max_l1"],
                                "threshold": s["threshold"]}
    if res.setup.basis.count == 0:
        inc = float(np.max(np.diff(res.run.l1), initial=-math.inf))
        checks["l1_monotone"] = {"pass": inc <= cfg.scheme.newton_tol, "max_increase": inc}
    if "x_chain" in s:
        xm = s["x_chain"]["min_value"]
        checks["x_chain_positivity"] = {"pass": xm >= floor, "min_value": xm, "floor": floor}
    for name, rep in s["monitors"].items():
        checks[f"monitor_{name}"] = rep
    return checks, res


def all_passed(checks):
    # ``pass: None`` marks an inconclusive verdict, which is not a failure
    return all(c.get("pass") is not False for c in checks.values())
