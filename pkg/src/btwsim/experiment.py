"""Assemble runs and monitors from a validated :class:`RunConfig`."""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import estimates as est
from .config import build_basis, build_grid, build_initial, build_scheme, load_path
from .grid import hminus1_norm, lp_norm, torricelli_weight
from .noise import DriftFields, sample_path
from .solver import positivity_monitor, run_X_ito, run_Y, transform_to_X


@dataclass
class Setup:
    grid: object
    basis: object
    drift: DriftFields
    x0: np.ndarray
    scheme: object
    weight: object


def build_setup(cfg, seed):
    grid = build_grid(cfg)
    basis = build_basis(cfg, grid)
    path = load_path(cfg, basis)
    if path is None:
        path = sample_path(basis, cfg.horizon, cfg.path_dt, seed)
    return Setup(grid, basis, DriftFields.build(basis, path), build_initial(cfg, grid),
                 build_scheme(cfg), torricelli_weight(grid))


def bound_params(cfg, setup, C1_hat=None):
    return est.ExtinctionBoundParams(d=setup.grid.dim, p=cfg.bound.p, C_w=setup.weight.C_w,
                                     C1_hat=C1_hat if C1_hat is not None else (cfg.bound.C1_hat or 1.0),
                                     t0_hat=cfg.bound.t0_hat, q_d2=cfg.bound.q_d2)


def _combine(reports, tol):
    return {"pass": all(r.passed for r in reports),
            "worst_violation": max(r.worst_violation for r in reports), "tolerance": tol,
            "per_exponent": {r.name: r.summary() for r in reports}}


@dataclass
class SimulationResult:
    run: object
    summary: dict
    setup: Setup = field(repr=False)
    x_run: object = None


def simulate(cfg, seed=None):
    """One Y-chain run (plus the X-chain if enabled) with all configured monitors."""
    seed = cfg.seed if seed is None else seed
    setup = build_setup(cfg, seed)
    drift, reg = setup.drift, setup.scheme.reg
    run = run_Y(setup.x0, drift, setup.scheme, cfg.horizon,
                stop_at_extinction=cfg.stop_at_extinction)
    mon = cfg.monitors
    monitors = {}
    if mon.lp_decay:
        reports = [est.monitor_weighted_lp(run, p, drift, setup.x0, reg, mon.lp_tol)
                   for p in mon.lp_decay]
        for r in reports:
            run.residuals[r.name] = r.residuals
        monitors["lp_decay"] = _combine(reports, mon.lp_tol)
    if mon.energy_l1:
        r = est.monitor_energy_L1(run, drift, setup.weight.w, reg, tol=mon.energy_tol)
        run.residuals["energy_l1"] = r.residuals
        monitors["energy_l1"] = r.summary()
    if mon.supersolution:
        r = est.supersolution_check(run, drift, float(np.abs(setup.x0).max()), mon.supersolution_tol)
        run.residuals["supersolution"] = r.residuals
        monitors["supersolution"] = dict(r.summary(), constant_bound=setup.basis.count == 0)
    if mon.extinction_bound:
        monitors["extinction_bound"] = _extinction_bound(cfg, setup, run)
    x_run = None
    extra = {}
    if mon.x_chain:
        x_run = run_X_ito(setup.x0, drift, setup.scheme, cfg.horizon)
        disc = [hminus1_norm(setup.grid, xs - transform_to_X(ys, drift.mu_of_t(int(ps))))
                for xs, ys, ps in zip(x_run.snapshots, run.snapshots, run.path_steps)]
        extra["x_chain"] = {"min_value": x_run.min_value,
                            "max_hminus1_discrepancy": float(max(disc, default=0.0)),
                            "extinction_time": x_run.extinction_time}
    summary = {
        "config": cfg.echo(),
        "seed": seed,
        "extinction_time": run.extinction_time,
        "censored": run.extinction_time is None,
        "absorbed": run.absorbed,
        "threshold": run.threshold,
        "min_value": positivity_monitor(run),
        "post_extinction_max_l1": run.post_extinction_max_l1,
        "dt_halvings": run.dt_halvings,
        "final_time": float(run.times[-1]),
        "x0_norms": {"l1": lp_norm(setup.grid, setup.x0, 1.0),
                     "linf": float(np.abs(setup.x0).max())},
        "monitors": monitors,
        **extra,
    }
    return SimulationResult(run, summary, setup, x_run)


def _extinction_bound(cfg, setup, run):
    params = bound_params(cfg, setup)
    if cfg.bound.C1_hat is None and setup.basis.count:
        C1, _ = est.estimate_noise_constants(setup.drift, params, setup.drift.path.horizon)
        params = bound_params(cfg, setup, C1)
    try:
        v = est.predict_and_verify_extinction(run, setup.drift, params, setup.scheme.reg, setup.x0,
                                              setup.weight, cfg.monitors.bound_tol,
                                              cfg.bound.margin)
    except OverflowError as exc:
        return {"pass": None, "verdict": "inconclusive", "worst_violation": None,
                "tolerance": cfg.monitors.bound_tol, "reason": str(exc)}
    out = v.summary()
    out.update(eps_star=_finite(v.eps_star), g_floor=v.g_floor, start_value=v.start_value,
               C1_hat=params.C1_hat, reason=v.detail.get("reason"))
    return out


def _finite(x):
    return None if x is None or math.isinf(x) else x


# ---------------------------------------------------------------------------
# output files


def _fmt(x):
    return "" if x is None else repr(float(x))


def write_series(path, run):
    cols = run.series_table()
    names = list(cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for i in range(len(run.times)):
            w.writerow([_fmt(cols[n][i]) for n in names])


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else (None if math.isnan(x) else ("inf" if x > 0 else "-inf"))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# ensembles


def extinction_replica(cfg, seed):
    """``(seed, extinction_time, censored, error)`` for one seed; never raises."""
    try:
        setup = build_setup(cfg, seed)
        run = run_Y(setup.x0, setup.drift, setup.scheme, cfg.horizon, stop_at_extinction=True)
    except Exception as exc:  # recorded per replica, the ensemble carries on
        return (seed, None, False, f"{type(exc).__name__}: {exc}")
    tau0 = run.extinction_time
    return (seed, tau0, tau0 is None, "")


def _replica_star(args):
    return extinction_replica(*args)


def run_ensemble(cfg, seeds, workers=1):
    """Rows sorted by seed; content does not depend on ``workers``."""
    args = [(cfg, s) for s in seeds]
    if workers <= 1 or len(seeds) <= 1:
        rows = [_replica_star(a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_replica_star, args))
    return sorted(rows, key=lambda r: r[0])


def write_stats(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "extinction_time", "censored", "error"])
        for seed, tau0, censored, err in rows:
            w.writerow([seed, _fmt(tau0), int(censored), err])


def ensemble_summary(rows, horizon):
    times = np.array([r[1] for r in rows if r[1] is not None], dtype=float)
    n_ok = sum(1 for r in rows if not r[3])
    out = {"replicas": len(rows), "failed": len(rows) - n_ok,
           "censored": sum(1 for r in rows if r[2]),
           "censored_fraction": (sum(1 for r in rows if r[2]) / n_ok) if n_ok else None,
           "horizon": horizon}
    if times.size:
        qs = [0.1, 0.25, 0.5, 0.75, 0.9]
        out["quantiles"] = {f"q{int(q * 100):02d}": float(np.quantile(times, q)) for q in qs}
        out["mean_uncensored"] = float(times.mean())
    return out
