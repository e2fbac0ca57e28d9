"""Command-line entry point: ``qnum run | sweep | stability-check | oracle-compare | validate``.

Exit codes: 0 success, 2 invalid scenario or arguments, 3 numeric blow-up,
4 no convergence (only with ``--require-convergence``).
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics
from . import stability as stab
from . import utility as ut
from .core import GRID_STEP, StepSizes, brute_force_oracle, initial_state, solve_centralized
from .protocol.network import Simulation
from .scenario import SWEEP_AXES, Scenario, ScenarioError, load, uniform_d

log = logging.getLogger("qnum")

EXIT_OK, EXIT_INVALID, EXIT_BLOWUP, EXIT_NOCONV = 0, 2, 3, 4
OUT_ENV = "QNUM_OUT"
TRACE_TAIL = 10


def out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "runs")


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


# ------------------------------------------------------------------ run

def run_one(sc: Scenario, seed: int, outdir: Path | None) -> dict:
    """Run one seed of a scenario and write its outputs; returns the summary."""
    topo = sc.build_topology()
    sessions = sc.build_sessions(topo, seed)
    sim = Simulation(topo, sessions, sc.protocol, seed=seed, duration=sc.duration,
                     interventions=sc.interventions)
    res = sim.run()
    summary = res.summary()
    if outdir is not None:
        res.write(outdir)
    if res.status != "ok":
        summary["trace_tail"] = " | ".join(f"{t:.6f} {who} {what}"
                                           for t, who, what in res.events[-TRACE_TAIL:])
    return summary


def _run_job(args):
    sc, seed, outdir = args
    try:
        return run_one(sc, seed, outdir)
    except Exception as exc:  # keep the sweep going and record the failure
        s = {"status": "error", "message": f"{type(exc).__name__}: {exc}",
             "steady_utility_abs": math.nan, "convergence_time_s": "none", "converged": False}
        if outdir is not None:
            outdir.mkdir(parents=True, exist_ok=True)
            metrics.write_summary_csv(outdir / "summary.csv", s)
        return s


def cmd_run(args, sc: Scenario) -> int:
    seed = args.seed if args.seed is not None else sc.seeds[0]
    outdir = out_root(args.out) / sc.name / f"seed{seed}"
    summary = run_one(sc, seed, outdir)
    conv = summary["convergence_time_s"]
    print(f"{sc.name} seed {seed}: status {summary['status']}, steady utility "
          f"{summary['steady_utility_abs']:.4g}, convergence time {conv}")
    print(f"outputs in {outdir}")
    if summary["status"] != "ok":
        print(f"error: {summary.get('message', '')}", file=sys.stderr)
        print(f"last events: {summary.get('trace_tail', '')}", file=sys.stderr)
        return EXIT_BLOWUP
    if args.require_convergence and not summary["converged"]:
        print("error: run did not converge", file=sys.stderr)
        return EXIT_NOCONV
    return EXIT_OK


# ------------------------------------------------------------------ sweep

SWEEP_COLUMNS = ("axis", "value", "seed", "status", "steady_utility_abs", "convergence_time_s",
                 "converged")
POINT_COLUMNS = ("axis", "value", "runs", "steady_mean", "steady_ci95", "converged_runs",
                 "convergence_time_mean", "failed_runs")


def sweep_points(sc: Scenario, axis: str, values: list[str], seeds: list[int], root: Path,
                 jobs: int = 1):
    """All ``values x seeds`` runs; returns ``(per-run rows, per-point rows)``."""
    if not values:
        raise ScenarioError("sweep needs at least one value")
    if axis not in SWEEP_AXES:
        raise ScenarioError(f"unknown sweep axis {axis!r} (expected one of {', '.join(SWEEP_AXES)})")
    points = [(v, sc.with_axis(axis, v)) for v in values]
    for _, p in points:
        p.validate()
    jobs_list = [(p, seed, root / f"{axis}={v}" / f"seed{seed}") for v, p in points for seed in seeds]
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_job, jobs_list))
    else:
        results = [_run_job(j) for j in jobs_list]

    rows, agg = [], []
    k = 0
    for v, _ in points:
        chunk = results[k:k + len(seeds)]
        k += len(seeds)
        for seed, s in zip(seeds, chunk):
            rows.append({"axis": axis, "value": v, "seed": seed, **{c: s.get(c, "") for c in SWEEP_COLUMNS[3:]}})
        steady = [s["steady_utility_abs"] for s in chunk if s["status"] == "ok"]
        mean, ci = metrics.mean_ci(steady)
        times = [s["convergence_time_s"] for s in chunk if s["converged"]]
        agg.append({
            "axis": axis, "value": v, "runs": len(chunk), "steady_mean": mean, "steady_ci95": ci,
            "converged_runs": sum(bool(s["converged"]) for s in chunk),
            "convergence_time_mean": float(np.mean(times)) if times else "none",
            "failed_runs": sum(s["status"] != "ok" for s in chunk),
        })
    return rows, agg


def _write_rows(path: Path, columns, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def cmd_sweep(args, sc: Scenario) -> int:
    seeds = [args.seed] if args.seed is not None else sc.seeds
    values = [v for v in (args.values or "").replace(",", " ").split() if v]
    root = out_root(args.out) / f"{sc.name}-sweep-{args.axis}"
    rows, agg = sweep_points(sc, args.axis, values, seeds, root, args.jobs)
    _write_rows(root / "runs.csv", SWEEP_COLUMNS, rows)
    _write_rows(root / "sweep.csv", POINT_COLUMNS, agg)
    for a in agg:
        print(f"{args.axis}={a['value']}: steady {a['steady_mean']:.4g} +/- {a['steady_ci95']:.2g}, "
              f"converged {a['converged_runs']}/{a['runs']}, failed {a['failed_runs']}")
    print(f"outputs in {root}")
    if any(a["failed_runs"] for a in agg):
        return EXIT_BLOWUP
    if args.require_convergence and any(a["converged_runs"] < a["runs"] for a in agg):
        return EXIT_NOCONV
    return EXIT_OK


# ------------------------------------------------------------------ stability

def stability_report(sc: Scenario, allow_nonconcave: bool = False, sample_every: float = 0.1):
    """Equilibrium, integrated trajectories and per-link local stability flags for a scenario.

    Returns ``(summary, trajectory rows, lyapunov rows)``. Random starts are
    used for concave instances (global check) and small perturbations
    for the rest.
    """
    opt = sc.stability
    inst = uniform_d(sc.instance(), opt.d)
    concave = all(k is ut.UtilityKind.LOGPROD for k in inst.kinds)
    if not concave and not allow_nonconcave:
        raise ScenarioError("instance has non-concave utilities; pass --allow-nonconcave")
    sol = solve_centralized(inst, opt.steps, tolerance=1e-8, rng=np.random.default_rng(0))
    x_star = stab.equilibrium(inst, stab.from_state(sol.state))
    lin = stab.linearization_matrix(x_star, inst)
    th2 = stab.theorem2_condition(x_star, inst)

    summary: dict[str, object] = {"status": "ok", "concave": concave,
                                  "solver_residual": sol.residual,
                                  "equilibrium_residual": float(np.max(np.abs(stab.ode_rhs(x_star, inst))))}
    starts = (stab.random_starts(inst, x_star, opt.starts, opt.seed) if concave
              else stab.perturb(x_star, opt.starts, opt.seed, opt.perturbation))
    summary["start_mode"] = "random" if concave else f"perturbation {opt.perturbation}"
    traj = stab.integrate(starts, inst, opt.dt, opt.t_end, sample_every=sample_every)
    V = stab.lyapunov_value(traj.states, x_star)
    Vdot = stab.lyapunov_derivative(traj.states, x_star, inst)
    dist = np.max(np.abs(traj.final - x_star), axis=-1)
    summary["starts"] = opt.starts
    summary["vdot_violations"] = int(np.sum(Vdot > 1e-9)) if concave else "n/a"
    summary["max_vdot"] = float(Vdot.max())
    summary["max_final_distance"] = float(dist.max())
    summary["returned_within_tolerance"] = int(np.sum(dist < opt.tolerance))
    summary["theorem2_all_links"] = th2.all_links
    for l, ok in enumerate(th2.holds):
        summary[f"theorem2_l{l}"] = bool(ok)
    spec = lin.spectrum
    summary["max_real_eigenvalue"] = float(np.max(spec.real))
    summary["max_b_eigenvalue"] = float(np.max(lin.b_eigenvalues))

    lay = stab.Layout.of(inst)
    names = ([f"w{l}" for l in range(lay.n_links)] + [f"mu{r}" for r in range(lay.n_sessions)]
             + [f"lambda{l}" for l in range(lay.n_links)])

    def traj_rows():
        for i, t in enumerate(traj.times):
            for k in range(starts.shape[0]):
                for j, name in enumerate(names):
                    yield (float(t), f"start{k}:{name}", float(traj.states[i, k, j]))

    def lyap_rows():
        for i, t in enumerate(traj.times):
            for k in range(starts.shape[0]):
                yield (float(t), f"start{k}:V", float(V[i, k]))
                yield (float(t), f"start{k}:Vdot", float(Vdot[i, k]))

    return summary, traj_rows(), lyap_rows()


def cmd_stability(args, sc: Scenario) -> int:
    outdir = out_root(args.out) / f"{sc.name}-stability"
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        summary, traj_rows, lyap_rows = stability_report(sc, args.allow_nonconcave)
    except (stab.IntegrationBlowup, RuntimeError) as exc:
        metrics.write_summary_csv(outdir / "summary.csv", {"status": "blowup", "message": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    metrics.write_long_csv(outdir / "trajectory.csv", traj_rows)
    metrics.write_long_csv(outdir / "lyapunov.csv", lyap_rows)
    ok = summary["returned_within_tolerance"] == summary["starts"]
    if summary["concave"] and summary["vdot_violations"]:
        ok = False
    if not ok:
        summary["status"] = "not_converged"
    metrics.write_summary_csv(outdir / "summary.csv", summary)
    for key, value in summary.items():
        print(f"{key}: {_fmt(value)}")
    print(f"outputs in {outdir}")
    if args.require_convergence and not ok:
        return EXIT_NOCONV
    return EXIT_OK


# ------------------------------------------------------------------ oracle

def oracle_steps(instance) -> StepSizes:
    """Price step scaled with the rate parameter so the iteration is scale free."""
    return StepSizes(k_lambda=1.0 / float(instance.d.max()) ** 2, k_mu=1e-2, k_w=1e-3)


def oracle_gap(sc: Scenario, step: float = GRID_STEP) -> dict:
    inst = sc.instance()
    if inst.n_links > 2 or inst.n_sessions > 2:
        raise ScenarioError(f"oracle comparison handles at most 2 links and 2 sessions, "
                            f"got {inst.n_links} links and {inst.n_sessions} sessions")
    sol = solve_centralized(inst, oracle_steps(inst), tolerance=1e-8,
                            state=initial_state(inst, np.random.default_rng(0)))
    w_grid, r_grid, u_grid = brute_force_oracle(inst, step)
    return {"solver_utility": sol.utility, "grid_utility": u_grid,
            "gap": abs(sol.utility - u_grid), "grid_step": step,
            "solver_w": " ".join(f"{x:.6g}" for x in sol.state.w),
            "grid_w": " ".join(f"{x:.6g}" for x in w_grid),
            "solver_R": " ".join(f"{x:.6g}" for x in sol.state.R),
            "grid_R": " ".join(f"{x:.6g}" for x in r_grid),
            "solver_converged": sol.converged}


def cmd_oracle(args, sc: Scenario) -> int:
    rep = oracle_gap(sc)
    for key, value in rep.items():
        print(f"{key}: {_fmt(value)}")
    within = rep["gap"] < 2 * rep["grid_step"]
    print(f"gap {'<' if within else '>='} 2x grid step")
    if args.require_convergence and not (within and rep["solver_converged"]):
        return EXIT_NOCONV
    return EXIT_OK


def cmd_validate(args, sc: Scenario) -> int:
    inst = sc.instance()
    print(f"{sc.source}: ok ({sc.topology}, {inst.n_links} links, {inst.n_sessions} sessions, "
          f"variant {sc.protocol.variant.value}, {len(sc.interventions)} interventions)")
    return EXIT_OK


# ------------------------------------------------------------------ entry

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qnum", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"qnum {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=True):
        sp.add_argument("scenario", help="scenario file")
        sp.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
        sp.add_argument("--duration", type=float, help="override the simulated duration in seconds")
        sp.add_argument("--require-convergence", action="store_true",
                        help="exit 4 when a run does not converge")
        if seeds:
            sp.add_argument("--seed", type=int, help="override the scenario seed(s)")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("run", help="run one simulation"))
    sw = sub.add_parser("sweep", help="Monte Carlo sweep over one axis")
    common(sw)
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", required=True, help="comma separated values")
    sw.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    st = sub.add_parser("stability-check", help="integrate the fluid model around its equilibrium")
    common(st, seeds=False)
    st.add_argument("--allow-nonconcave", action="store_true")
    common(sub.add_parser("oracle-compare", help="centralized solver against the grid oracle"), seeds=False)
    common(sub.add_parser("validate", help="parse and check a scenario"), seeds=False)
    return p


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "stability-check": cmd_stability,
            "oracle-compare": cmd_oracle, "validate": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        sc = load(args.scenario)
        if args.duration is not None:
            if not args.duration > 0:
                raise ScenarioError("--duration must be positive")
            sc = replace(sc, duration=args.duration)
            sc.validate()
        return COMMANDS[args.command](args, sc)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
