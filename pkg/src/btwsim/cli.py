"""Command line entry point: ``btwsim {simulate,extinction-stats,verify,bound}``.

Exit codes: 0 success, 1 solver or monitor failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import estimates as est
from . import experiment as ex
from . import suite
from .config import ConfigError, build_basis, build_grid, build_initial, load_config
from .grid import lp_norm, torricelli_weight
from .solver import StepFailure


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="seed of the Brownian path")
    common.add_argument("--seeds", help="seed range A..B (inclusive)")
    common.add_argument("--workers", type=int, help="worker processes for ensembles")
    common.add_argument("--out", help="output directory")
    common.add_argument("--horizon", type=float, help="final time")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="btwsim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="one run with monitors")
    sub.add_parser("extinction-stats", parents=[common], help="extinction times over seeds")
    sub.add_parser("verify", parents=[common], help="invariant suite; exit 0 iff all pass")
    sub.add_parser("bound", parents=[common], help="extinction-bound constants, no simulation")
    return p


def _load(args):
    overrides = {"seed": args.seed, "seeds": args.seeds, "workers": args.workers,
                 "out": args.out, "horizon": args.horizon}
    return load_config(args.config, overrides)


def _outdir(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(cfg):
    out = _outdir(cfg)
    try:
        res = ex.simulate(cfg)
    except StepFailure as exc:
        ex.write_json(out / "diagnostics.json",
                      {"error": str(exc), "t": exc.t, "step": exc.step, "residual": exc.residual,
                       "config": cfg.echo()})
        print(f"solver failure: {exc}", file=sys.stderr)
        return 1
    ex.write_series(out / "series.csv", res.run)
    ex.write_json(out / "summary.json", res.summary)
    res.setup.drift.path.to_csv(out / "path.csv")
    tau0 = res.summary["extinction_time"]
    print(f"extinction_time: {'censored' if tau0 is None else f'{tau0:.6g}'}")
    for name, rep in res.summary["monitors"].items():
        print(f"{name}: pass={rep['pass']} worst_violation={rep['worst_violation']}")
    return 0


def cmd_extinction_stats(cfg):
    seeds = cfg.seed_range
    rows = ex.run_ensemble(cfg, seeds, cfg.workers)
    out = _outdir(cfg)
    ex.write_stats(out / "stats.csv", rows)
    summary = ex.ensemble_summary(rows, cfg.horizon)
    summary["config"] = cfg.echo()
    ex.write_json(out / "stats_summary.json", summary)
    print(f"replicas={summary['replicas']} censored={summary['censored']} failed={summary['failed']}")
    for k, v in summary.get("quantiles", {}).items():
        print(f"{k}: {v:.6g}")
    return 1 if summary["failed"] == len(rows) else 0


def cmd_verify(cfg):
    checks, _ = suite.run_checks(cfg, ex.simulate)
    ok = suite.all_passed(checks)
    out = _outdir(cfg)
    ex.write_json(out / "verify_report.json", {"pass": ok, "checks": checks, "config": cfg.echo()})
    for name, c in checks.items():
        status = {True: "pass", False: "FAIL", None: "inconclusive"}[c.get("pass")]
        print(f"{status:12s} {name}")
    if not ok:
        failed = [n for n, c in checks.items() if c.get("pass") is False]
        print("failed: " + ", ".join(failed), file=sys.stderr)
    return 0 if ok else 1


def cmd_bound(cfg):
    grid = build_grid(cfg)
    weight = torricelli_weight(grid)
    basis = build_basis(cfg, grid)
    x0 = build_initial(cfg, grid)
    params = est.ExtinctionBoundParams(d=grid.dim, p=cfg.bound.p, C_w=weight.C_w,
                                       C1_hat=cfg.bound.C1_hat or 1.0, t0_hat=cfg.bound.t0_hat,
                                       q_d2=cfg.bound.q_d2)
    x_norm = lp_norm(grid, x0, params.p)
    gf = est.g_floor(params, x_norm)
    bound = est.extinction_upper_bound(params, x_norm, gf)
    eps_star = min(est.flatness_threshold(basis, weight, cfg.bound.margin),
                   est.flatness_cap(basis, params))
    for k, v in params.as_dict().items():
        if k == "alpha" and math.isinf(params.q):
            v = "0 (q = inf in one dimension)"
        print(f"{k}: {v:.6g}" if isinstance(v, float) else f"{k}: {v}")
    print(f"x0_norm_p: {x_norm:.6g}")
    print(f"g_floor: {gf:.6g}")
    print(f"L_star: {bound.L_star:.6g}")
    print(f"eps_star: {eps_star:.6g}")
    out = _outdir(cfg)
    t, b = bound.table(100)
    np.savetxt(out / "bound.csv", np.column_stack([t, b]), delimiter=",", header="t,B",
               comments="", fmt="%.17g")
    return 0


COMMANDS = {"simulate": cmd_simulate, "extinction-stats": cmd_extinction_stats,
            "verify": cmd_verify, "bound": cmd_bound}


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    return COMMANDS[args.command](cfg)


if __name__ == "__main__":
    sys.exit(main())
