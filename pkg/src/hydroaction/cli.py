"""Command-line entry point: ``hydroaction <subcommand> [--config PATH] ...``.

Exit codes: 0 success, 1 runtime or check failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from .errors import ConfigError, HydroActionError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

DENSITY_HEADER = ("t", "cell_index", "u", "rho")
ENSEMBLE_HEADER = ("L", "n_traj", "action_rescaled", "stderr", "girsanov_rescaled", "girsanov_stderr", "mean_events")
KMC_DENSITY_HEADER = ("t", "site_index", "u", "rho", "stderr")
EXACT_HEADER = (
    "L", "sector_size", "action_rescaled", "free_energy_0", "free_energy_T",
    "psi_integral", "psi_star_integral", "quadrature_error",
)
ACTION_HEADER = ("quantity", "value", "scheme_error")
HYDRO_ERROR_HEADER = ("t", "l2_error")


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


class _Writer:
    """Writes the files of one run into the output directory."""

    def __init__(self, cfg):
        self.dir = cfg["output"]["directory"]
        self.formats = cfg["output"]["formats"]
        os.makedirs(self.dir, exist_ok=True)

    def path(self, name):
        return os.path.join(self.dir, name)

    def csv(self, name, header, rows):
        if "csv" not in self.formats:
            return
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])

    def text(self, name, text):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            fh.write(text)

    def json(self, name, obj):
        from .lab import jsonable

        self.text(name, json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def _check(name, threshold, fn, lower=False):
    """Run one check; model errors count as a failure with value ``nan``."""
    try:
        value = float(fn())
    except HydroActionError:
        return name, float("nan"), threshold, False
    return name, value, threshold, (value >= threshold if lower else value <= threshold)


def run_checks(cfg, seed=0):
    """Model invariant suite; returns a list of ``(name, value, threshold, passed)``."""
    from .exact import ConfigSector, detailed_balance_residual, gradient_identity_residual, psi, psi_star
    from .lattice import phi_chi

    model = cfgmod.build_model(cfg)
    pot = cfgmod.build_potential(cfg)
    rng = np.random.default_rng(seed)
    T = cfg["time"]["T"]
    L = 4 if model.dim == 1 else 2
    N = min(4, L**model.dim - 1) if model.kind == "sep" else 4

    def monotone():
        return model.rate_monotonicity()[0] if model.kind == "zrp" else 0.0

    def gradient():
        sector = ConfigSector(model, L, model.dim, N)
        return max(gradient_identity_residual(sector, rng.dirichlet(np.ones(sector.size))) for _ in range(5))

    def balance():
        sector = ConfigSector(model, L, model.dim, N)
        return max(detailed_balance_residual(sector, pot, t) for t in (0.0, 0.5 * T, T))

    def einstein():
        alphas = np.linspace(0.05, 0.95 if model.kind == "sep" else 5.0, 25)
        info = phi_chi(model, alphas, full_output=True)
        return np.max(np.abs(info["phi_prime"] - info["f_second"] * info["chi"]))

    a = rng.uniform(0.05, 3.0, 1000)
    F = rng.normal(0.0, 2.0, 1000)
    j = rng.normal(0.0, 3.0, 1000)

    def om(jj):
        return np.array([psi(a[k:k + 1], jj[k:k + 1]) - jj[k] * F[k] + psi_star(a[k:k + 1], F[k:k + 1])
                         for k in range(a.size)])

    return [
        _check("rate monotonicity (min increment)", 0.0, monotone, lower=True),
        _check("gradient identity", 1e-12, gradient),
        _check("detailed balance", 1e-12, balance),
        _check("Einstein relation", 1e-8, einstein),
        _check("Fenchel-Young lower bound", -1e-10, lambda: om(j).min(), lower=True),
        _check("Fenchel-Young equality", 1e-10, lambda: np.abs(om(a * np.sinh(0.5 * F))).max()),
    ]


def cmd_validate(cfg, args):
    checks = run_checks(cfg, cfg["engine"]["seed"])
    width = max(len(c[0]) for c in checks)
    print(f"{'check':<{width}}  {'value':>12}  {'threshold':>10}  result")
    for name, val, thr, ok in checks:
        print(f"{name:<{width}}  {val:>12.3e}  {thr:>10.1e}  {'PASS' if ok else 'FAIL'}")
    ok = all(c[3] for c in checks)
    if args.out is not None:
        w = _Writer(cfg)
        w.json("config.json", cfg)
        w.json("summary.json", {"command": "validate", "passed": ok,
                                "checks": [{"name": n, "value": v, "threshold": t, "passed": p}
                                           for n, v, t, p in checks]})
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# module pipelines
# ---------------------------------------------------------------------------


def _heat_solution(cfg, scenario):
    """Exact cell averages when the hydrodynamic equation is the heat equation."""
    from .lattice import FourierSeries

    linear = scenario.model.kind == "sep" or scenario.model.is_linear_zrp
    if not (linear and scenario.potential.V.is_zero and scenario.potential.H.is_zero):
        return None
    rho0 = scenario.rho0

    def at(t, M):
        modes = []
        for k, a, b in rho0.modes:
            damp = math.exp(-4.0 * math.pi**2 * float(np.dot(k, k)) * t)
            modes.append((k, a * damp, b * damp))
        return FourierSeries(tuple(modes), rho0.constant, rho0.dim).cell_average((M,) * rho0.dim)

    return at


def cmd_hydro(cfg, args):
    from .hydro import cell_profile, solve_pde
    from .lattice import ScalarFunctions, cell_centers

    scenario = cfgmod.build_scenario(cfg)
    scalars = ScalarFunctions(scenario.model)
    M, d = scenario.M, scenario.dim
    series = solve_pde(scalars, scenario.potential, cell_profile(scenario.rho0, M, d), scenario.T,
                       n_times=scenario.n_times, rtol=scenario.ode_tol)
    c = cell_centers((M,) * d).reshape(-1, d)
    ucol = [repr(float(x[0])) if d == 1 else " ".join(repr(float(v)) for v in x) for x in c]
    rows = []
    for k, t in enumerate(series.times):
        vals = series.values[k].reshape(-1)
        rows.extend((t, i, ucol[i], vals[i]) for i in range(vals.size))
    w = _Writer(cfg)
    w.csv("density.csv", DENSITY_HEADER, rows)
    summary = {"command": "hydro", "M": M, "n_times": int(series.times.size), "info": series.info,
               "mass": [float(series.values[k].mean()) for k in (0, -1)]}
    exact = _heat_solution(cfg, scenario)
    if exact is not None:
        errs = [math.sqrt(float(np.mean((series.values[k] - exact(t, M)) ** 2))) for k, t in enumerate(series.times)]
        w.csv("hydro_error.csv", HYDRO_ERROR_HEADER, list(zip(series.times, errs)))
        summary["heat_l2_error_final"] = errs[-1]
        summary["heat_l2_error_max"] = max(errs)
    return summary


def cmd_action(cfg, args):
    from .lab import macro_targets

    scenario = cfgmod.build_scenario(cfg)
    macro, _ = macro_targets(scenario)
    keys = ("A", "alternative", "tilt_target", "free_energy_0", "free_energy_T", "delta_free_energy",
            "E", "E_star", "chain_rule_residual")
    _Writer(cfg).csv("action.csv", ACTION_HEADER, [(k, macro[k], macro["scheme_error"][k]) for k in keys])
    return {"command": "action", "alpha": scenario.alpha, "macro": macro}


def cmd_exact(cfg, args):
    from .errors import SectorSizeError
    from .exact import sector_size
    from .lab import exact_row

    scenario = cfgmod.build_scenario(cfg)
    rows, out = [], []
    incomplete = False
    for L in scenario.L_list:
        try:
            size = sector_size(scenario.model, L, scenario.dim, scenario.n_particles(L))
            if size > scenario.state_cap:
                raise SectorSizeError(f"sector at L={L} has {size} states (cap {scenario.state_cap:g})")
            r = exact_row(scenario, L)
            r["L"] = L
            rows.append(tuple(r[k] for k in EXACT_HEADER))
            out.append(r)
        except HydroActionError as exc:
            incomplete = True
            out.append({"L": L, "complete": False, "error": f"{type(exc).__name__}: {exc}"})
    _Writer(cfg).csv("exact.csv", EXACT_HEADER, rows)
    return {"command": "exact", "rows": out, "complete": not incomplete}


def cmd_simulate(cfg, args):
    from .kmc import action_stats, run_ensemble
    from .lattice import TorusLattice

    scenario = cfgmod.build_scenario(cfg)
    snap = np.linspace(0.0, scenario.T, scenario.n_snapshots + 1)[1:]
    ens_rows, dens_rows, out = [], [], []
    for k, L in enumerate(scenario.L_list):
        res = run_ensemble(scenario.model, scenario.potential, L, scenario.rho0, scenario.T, scenario.n_traj,
                           scenario.seed, snapshot_times=snap, stream_offset=(k + 1) << 32)
        st = action_stats(res)
        ens_rows.append((L, scenario.n_traj, st.mean["kl_action_rescaled"], st.stderr["kl_action_rescaled"],
                         st.mean["action_rescaled"], st.stderr["action_rescaled"], st.mean["events"]))
        lat = TorusLattice(L, scenario.dim)
        mean = res.snapshots.mean(axis=0)
        se = res.snapshots.std(axis=0, ddof=1) / math.sqrt(scenario.n_traj)
        ucol = [repr(float(p[0])) if scenario.dim == 1 else " ".join(repr(float(v)) for v in p)
                for p in lat.positions]
        for m, t in enumerate(snap):
            dens_rows.extend((t, i, ucol[i], mean[m, i], se[m, i]) for i in range(lat.n_sites))
        out.append({"L": L, "stats": {"mean": st.mean, "stderr": st.stderr, "extra": st.extra}})
    w = _Writer(cfg)
    w.csv("ensemble.csv", ENSEMBLE_HEADER, ens_rows)
    w.csv("kmc_density.csv", KMC_DENSITY_HEADER, dens_rows)
    return {"command": "simulate", "rows": out}


def cmd_converge(cfg, args):
    from .lab import run_all

    scenario = cfgmod.build_scenario(cfg)
    reports = run_all(scenario)
    w = _Writer(cfg)
    for name, rep in reports.items():
        if "csv" in w.formats:
            w.text(f"{name}.csv", rep.csv_text())
    timing = {name: rep.timing for name, rep in reports.items()}
    w.json("timing.json", timing)
    complete = all(r.get("complete", True) for r in reports["tilted_limit"].rows)
    return {
        "command": "converge",
        "complete": complete,
        "reports": {name: rep.summary() for name, rep in reports.items()},
        "passed": {name: rep.passed for name, rep in reports.items()},
    }


COMMANDS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "exact": cmd_exact,
    "hydro": cmd_hydro,
    "action": cmd_action,
    "converge": cmd_converge,
}


def build_parser():
    p = argparse.ArgumentParser(prog="hydroaction", description="Micro/macro action toolkit for gradient particle systems.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", metavar="PATH", help="JSON configuration file")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides output.directory)")
    p.add_argument("--seed", type=int, metavar="U64", help="master seed (overrides engine.seed)")
    p.add_argument("--threads", type=int, metavar="N", help="worker threads (fallback: HYDROACTION_THREADS)")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), help="base configuration")
    return p


def _resolve(args):
    cfg = cfgmod.load(args.config, args.preset)
    if args.out is not None:
        cfg["output"]["directory"] = args.out
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer", "/engine/seed")
        cfg["engine"]["seed"] = args.seed
    cfgmod.validate_document(cfg)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    from .kmc import set_threads

    set_threads(args.threads)
    if args.command == "validate":
        try:
            return cmd_validate(cfg, args)
        except HydroActionError as exc:
            print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_FAIL
    w = _Writer(cfg)
    w.json("config.json", cfg)
    t0 = time.perf_counter()
    try:
        summary = COMMANDS[args.command](cfg, args)
    except HydroActionError as exc:
        record = {"type": type(exc).__name__, "message": str(exc)}
        if getattr(exc, "time", None) is not None:
            record["time"] = exc.time
        w.json("summary.json", {"command": args.command, "error": record})
        print(f"error: {record['type']}: {record['message']}", file=sys.stderr)
        return EXIT_FAIL
    w.json("summary.json", summary)
    print(f"{args.command}: wrote results to {w.dir} ({time.perf_counter() - t0:.1f} s)")
    return EXIT_OK if summary.get("complete", True) else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
