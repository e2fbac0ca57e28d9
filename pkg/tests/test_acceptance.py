"""Acceptance suite: one test per criterion at its stated tolerance.

Simulation runs are cached per module so criteria sharing a setup reuse them.
The whole file takes on the order of twenty minutes on one core.
"""

import functools
import math

import numpy as np
import pytest

from qnum import utility as ut
from qnum.cli import oracle_gap, oracle_steps, stability_report
from qnum.core import ProblemInstance, StepSizes, slater_point, solve_centralized
from qnum.protocol import ProtocolConfig, Simulation
from qnum.scenario import load, loads
from qnum.topology import build_dumbbell, build_nsfnet, random_sessions

pytestmark = pytest.mark.slow

SEEDS = tuple(range(1, 9))
NSFNET_DURATION = 80.0  # every NSFNet run settles within about 35 s


@functools.lru_cache(maxsize=None)
def scenario(name, **axes):
    from pathlib import Path

    sc = load(Path(__file__).resolve().parents[1] / "scenarios" / f"{name}.ini")
    for axis, value in axes.items():
        sc = sc.with_axis(axis, value)
    return sc


@functools.lru_cache(maxsize=None)
def result(name, seed, duration=None, **axes):
    sc = scenario(name, **axes)
    topo = sc.build_topology()
    sessions = sc.build_sessions(topo, seed)
    res = Simulation(topo, sessions, sc.protocol, seed=seed, duration=duration or sc.duration,
                     interventions=sc.interventions).run()
    assert res.status == "ok", res.message
    return res


def steady(name, **axes):
    return np.array([result(name, s, **axes).steady() for s in SEEDS])


@functools.lru_cache(maxsize=None)
def centralized_dumbbell():
    sc = scenario("dumbbell")
    res = solve_centralized(sc.instance(), StepSizes(), tolerance=1e-6, rng=0)
    assert res.converged
    return res.absolute


def fmt(xs):
    return "[" + ", ".join(f"{x:.1f}" for x in xs) + "]"


def test_criterion_01_near_optimal(acceptance):
    qpd = steady("dumbbell")
    bound = centralized_dumbbell()
    ratio = qpd.mean() / bound
    ok = acceptance(1, ratio >= 0.93,
                    f"QPD mean {qpd.mean():.2f} = {100 * ratio:.1f}% of centralized {bound:.3f} "
                    f"(need >= 93%)")
    assert ok


def test_criterion_02_qtcp_below_qpd(acceptance):
    qpd = steady("dumbbell")
    qtcp = steady("dumbbell", variant="qtcp")
    ok = acceptance(2, bool(np.all(qtcp < qpd)),
                    f"QTCP {fmt(qtcp)} < QPD {fmt(qpd)} on every seed")
    assert ok


def test_criterion_03_outer_period(acceptance):
    conv = {}
    for t_outer in (1, 10, 50, 250):
        axes = {} if t_outer == 10 else {"t_outer": t_outer}
        conv[t_outer] = [result("dumbbell", s, **axes).convergence_time() for s in SEEDS]
    ok = all(c is not None for t in (1, 10, 50) for c in conv[t])

    def show(cs):
        done = [c for c in cs if c is not None]
        return f"{len(done)}/{len(cs)} converged, max {max(done):.1f} s" if done else "0 converged"

    acceptance(3, ok, "; ".join(f"T_outer={t}: {show(conv[t])}" for t in (1, 10, 50))
               + f"; T_outer=250 (reported only): {show(conv[250])}")
    assert ok


def test_criterion_04_failure_recovery(acceptance):
    sc = scenario("failure")
    topo = sc.build_topology()
    failed = topo.find_link("1-3").id
    survivors = [s for s in sc.build_sessions(topo, SEEDS[0]) if failed not in s.path]
    reduced = solve_centralized(ProblemInstance(topo, survivors), StepSizes(), tolerance=1e-6, rng=0)
    assert reduced.converged
    post = np.array([result("failure", s).steady(since=100.0) for s in SEEDS])
    conv = [result("failure", s).convergence_time(since=100.0) for s in SEEDS]
    rel = np.abs(post - reduced.absolute) / reduced.absolute
    ok = bool(np.all(rel <= 0.10)) and all(c is not None for c in conv)
    acceptance(4, ok, f"post-failure {fmt(post)} vs reduced optimum {reduced.absolute:.3f} "
                      f"(max gap {100 * rel.max():.1f}%, need <= 10%); converged after failure "
                      f"{sum(c is not None for c in conv)}/{len(conv)}, latest at "
                      f"{max((c for c in conv if c is not None), default=math.nan):.1f} s")
    assert ok


def test_criterion_05_decoherence(acceptance):
    qpd = steady("decoherence", variant="qpd")
    da = steady("decoherence")
    pi = steady("decoherence", variant="qpd-pi")
    da_approx = steady("decoherence", variant="qpd-da-approx")
    rel = abs(da_approx.mean() - da.mean()) / da.mean()
    ok = bool(np.all(da > qpd) and np.all(pi > qpd)) and rel <= 0.10
    acceptance(5, ok, f"T_c=1: QPD {fmt(qpd)}, DA {fmt(da)}, PI {fmt(pi)}; DA-approx mean "
                      f"{da_approx.mean():.2f} vs DA {da.mean():.2f} ({100 * rel:.1f}%, need <= 10%)")
    assert ok


def test_criterion_06_workload_switch(acceptance):
    sc = scenario("workload_switch")
    topo = sc.build_topology()
    bottleneck = topo.find_link("3-4").id
    lower, argmin = 0, 0
    for s in SEEDS:
        res = result("workload_switch", s)
        before = np.array([res.steady_channel("links", "w", l, 140.0, 160.0) for l in range(topo.n_links)])
        after = np.array([res.steady_channel("links", "w", l, 380.0, 400.0) for l in range(topo.n_links)])
        lower += bool(np.all(after < before))
        argmin += int(np.argmin(before)) == bottleneck
    ok = lower == len(SEEDS) and argmin == len(SEEDS)
    acceptance(6, ok, f"every w_l lower after the switch on {lower}/{len(SEEDS)} seeds; "
                      f"bottleneck has minimum SKR-phase w_l on {argmin}/{len(SEEDS)} seeds")
    assert ok


def test_criterion_07_approx(acceptance):
    qpd = steady("dumbbell")
    approx = steady("dumbbell", variant="qpd-approx")
    rel = abs(approx.mean() - qpd.mean()) / qpd.mean()
    ok = acceptance(7, rel <= 0.10, f"approx mean {approx.mean():.2f} vs QPD {qpd.mean():.2f} "
                                    f"({100 * rel:.1f}%, need <= 10%)")
    assert ok


def test_criterion_08_nsfnet_scaling(acceptance):
    lines, ok = [], True
    for n in (4, 8, 12):
        vals = {v: np.array([result("nsfnet", s, NSFNET_DURATION, n_sessions=n, variant=v).steady()
                             for s in SEEDS]) for v in ("qpd", "qpd-approx", "qtcp")}
        point_ok = vals["qpd"].mean() > vals["qtcp"].mean() and vals["qpd-approx"].mean() > vals["qtcp"].mean()
        ok &= bool(point_ok)
        worst = min((vals["qpd"] / vals["qtcp"]).min(), (vals["qpd-approx"] / vals["qtcp"]).min())
        lines.append(f"n={n}: QPD {vals['qpd'].mean():.0f}, approx {vals['qpd-approx'].mean():.0f}, "
                     f"QTCP {vals['qtcp'].mean():.0f} (worst seed ratio {worst:.2f})")
    acceptance(8, ok, "; ".join(lines))
    assert ok


@pytest.fixture(scope="module")
def stability_reports():
    logprod, _, _ = stability_report(scenario("stability_logprod"))
    skr, _, _ = stability_report(scenario("stability_skr"), allow_nonconcave=True)
    return logprod, skr


def test_criterion_09_stability(acceptance, stability_reports):
    lp, skr = stability_reports
    a = (lp["returned_within_tolerance"] == lp["starts"] == 20 and lp["max_vdot"] <= 1e-9
         and lp["vdot_violations"] == 0 and lp["max_final_distance"] <= 1e-4)
    b = (skr["theorem2_all_links"] is True and skr["returned_within_tolerance"] == skr["starts"]
         and skr["max_final_distance"] <= 1e-4)
    ok = acceptance(9, a and b,
                    f"(a) LOGPROD {lp['returned_within_tolerance']}/{lp['starts']} starts within 1e-4, "
                    f"max Vdot {lp['max_vdot']:.2e}; (b) condition true on all links: "
                    f"{skr['theorem2_all_links']}, {skr['returned_within_tolerance']}/{skr['starts']} "
                    f"perturbations returned (max distance {skr['max_final_distance']:.1e})")
    assert ok


TWO_LINK = """
[scenario]
name = chain
[topology]
builtin = custom
links = 0-1:40, 1-2:60
[sessions]
mode = pairs
pairs = {pairs}
utility = {utility}
f_min = 0.5
"""


def test_criterion_10_oracle(acceptance):
    sc = scenario("single_link_neg")
    inst = sc.instance()
    d = float(inst.d[0])
    sol = solve_centralized(inst, oracle_steps(inst), tolerance=1e-10, rng=0)
    w_err = abs(sol.state.w[0] - 2 / 3) / (2 / 3)
    r_err = abs(sol.state.R[0] - d / 3) / (d / 3)
    fixtures = {"single link NEG": sc}
    for pairs, utility in (("0-2", "neg"), ("0-2, 1-2", "neg"), ("0-1, 0-2", "skr")):
        fixtures[f"chain {pairs} {utility}"] = loads(TWO_LINK.format(pairs=pairs, utility=utility))
    gaps = {k: oracle_gap(v) for k, v in fixtures.items()}
    gaps_ok = all(g["gap"] < 2 * g["grid_step"] for g in gaps.values())
    ok = w_err <= 1e-3 and r_err <= 1e-3 and gaps_ok
    acceptance(10, ok, f"w* rel err {w_err:.1e}, R* rel err {r_err:.1e}; oracle gaps "
                       + ", ".join(f"{k} {g['gap']:.1e}" for k, g in gaps.items())
                       + f" (limit {2 * next(iter(gaps.values()))['grid_step']:.0e})")
    assert ok


def central(f, x, h):
    return (f(x + h) - f(x - h)) / (2 * h)


def test_criterion_11_numerics(acceptance):
    worst = {}

    def check(name, analytic, numeric):
        err = np.max(np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-12))
        worst[name] = max(worst.get(name, 0.0), float(err))

    R = np.geomspace(0.1, 1e4, 60)
    for kind in ("skr", "neg"):
        check("f_r", ut.rate_derivative(kind, R),
              central(lambda r: ut.utility_value(kind, r, 0.95), R, R * 1e-6))
        lo = ut.domain_floor(kind) + 0.02
        W = np.linspace(lo, 0.99, 60)
        check("U'_W", ut.werner_derivative(kind, W),
              central(lambda x: ut.utility_value(kind, 1.0, x), W, 1e-6))
        for P in (1.0, 0.97):  # rest of the path
            w_l = W / P
            keep = w_l < 1
            w_l = w_l[keep]
            check("U''", ut.link_second_derivative(kind, P * w_l, w_l),
                  central(lambda x: ut.link_derivative(kind, P * x, x), w_l, 1e-6))
    t = build_dumbbell(80)
    from qnum.topology import dumbbell_sessions

    slater = []
    nsf = build_nsfnet(25)
    for inst in (ProblemInstance(t, dumbbell_sessions(t)),
                 ProblemInstance(nsf, random_sessions(nsf, 12, seed=1, f_min=0.85))):
        Rs, ws = slater_point(inst)
        slater.append(bool(np.all(inst.load(Rs) < inst.capacity(ws)) and np.all(Rs > 0)
                           and np.all(inst.log_werner(ws) > inst.K) and np.all(ws < 1)))
    ok = all(v <= 1e-6 for v in worst.values()) and all(slater)
    acceptance(11, ok, ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
                       + f" (need <= 1e-6); Slater strictly feasible on dumbbell/NSFNet: {slater}")
    assert ok


def test_criterion_12_conservation(acceptance, tmp_path):
    t = build_dumbbell(80)
    from qnum.topology import dumbbell_sessions

    s = dumbbell_sessions(t)
    approx = Simulation(t, s, ProtocolConfig(variant="qpd-approx", n_mem=1, audit=True), seed=5,
                        duration=30).run().audit
    exact_run = Simulation(t, s, ProtocolConfig(variant="qpd", n_mem=1, audit=True), seed=5, duration=30).run()
    exact = exact_run.audit
    for name in ("a", "b"):
        Simulation(t, s, ProtocolConfig(n_mem=2), seed=11, duration=20).run().write(tmp_path / name)
    files = ("sessions.csv", "links.csv", "aggregate.csv", "events.csv", "summary.csv")
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    ok = (approx["weight_checks"] > 0 and approx["weight_violations"] == 0
          and exact["trace_checks"] > 0 and exact["trace_violations"] == 0
          and exact_run.counters["drops"] > 0 and same)
    acceptance(12, ok, f"weight conservation {approx['weight_checks']} checks, "
                       f"{approx['weight_violations']} violations; exact trace {exact['trace_checks']} checks "
                       f"over {exact_run.counters['drops']} drops, {exact['trace_violations']} violations; "
                       f"replay byte-identical: {same}")
    assert ok
