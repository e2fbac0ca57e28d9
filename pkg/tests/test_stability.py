import numpy as np
import pytest

from qnum import stability as stab
from qnum.core import ProblemInstance, StepSizes, solve_centralized, update_w, PrimalDualState
from qnum.topology import Link, Topology, build_dumbbell, make_session

LOGPROD_STEPS = StepSizes(k_lambda=1e-2, k_mu=1e-2, k_w=1e-3)


def dumbbell_instance(utility, f_min, d):
    t = build_dumbbell(80)
    sessions = [make_session(t, i, i, i + 5, utility=utility, f_min=f_min) for i in range(3)]
    return ProblemInstance(t, sessions, d=np.full(7, float(d)))


@pytest.fixture(scope="module")
def logprod():
    inst = dumbbell_instance("logprod", 0.3, 1.0)
    sol = solve_centralized(inst, LOGPROD_STEPS, tolerance=1e-8, rng=0)
    return inst, stab.equilibrium(inst, stab.from_state(sol.state)), sol


@pytest.fixture(scope="module")
def skr():
    inst = dumbbell_instance("skr", 0.85, 50.0)
    sol = solve_centralized(inst, StepSizes(k_lambda=1e-4, k_mu=1e-2, k_w=1e-3), tolerance=1e-8, rng=0)
    return inst, stab.equilibrium(inst, stab.from_state(sol.state)), sol


def test_full_column_rank(logprod):
    inst, _, _ = logprod
    assert inst.full_column_rank and inst.rank == 3


def test_equilibrium_values(logprod):
    inst, xs, sol = logprod
    w, mu, lam = stab.Layout.of(inst).split(xs)
    # polished equilibrium of this fixture, frozen
    assert w[[0, 1, 2, 4, 5, 6]] == pytest.approx([0.86443] * 6, abs=1e-4)
    assert w[3] == pytest.approx(0.59312, abs=1e-4)
    assert np.all(mu == 0)
    assert np.max(np.abs(stab.ode_rhs(xs, inst))) < 1e-8


@pytest.mark.parametrize("name", ["logprod", "skr"])
def test_solver_output_is_near_rest(name, request):
    inst, _, sol = request.getfixturevalue(name)
    # the unpolished solver output already satisfies the dynamics to 10x its tolerance
    assert np.max(np.abs(stab.ode_rhs(stab.from_state(sol.state), inst))) < 10 * 1e-8


def test_fixed_point_trajectory_constant(logprod):
    inst, xs, _ = logprod
    tr = stab.integrate(xs, inst, t_end=1.0)
    assert np.max(np.abs(tr.states - xs)) < 1e-10


def test_lambda_projection():
    inst = dumbbell_instance("logprod", 0.3, 1.0)
    x = stab.pack(np.full(7, 0.5), np.zeros(3), np.r_[0.0, np.full(6, 10.0)])
    # link 0 carries one session at rate 1/(10+10)=0.05 < capacity 0.5
    assert stab.ode_rhs(x, inst)[-7] == 0.0


def test_w_sign_matches_discrete_update():
    t = Topology([0, 1], [Link(0, 0, 1, 50.0)])
    inst = ProblemInstance(t, [make_session(t, 0, 0, 1, utility="neg", f_min=0.5)])
    d = inst.d[0]
    for lam in (2.0 / d, 3.0 / d, 4.0 / d):
        x = stab.pack([2 / 3], [0.0], [lam])
        wdot = stab.ode_rhs(x, inst)[0]
        s = PrimalDualState(np.array([d / 3]), np.array([2 / 3]), np.array([lam]), np.array([0.0]))
        step = update_w(s, inst, StepSizes(k_w=1e-6))[0] - 2 / 3
        assert np.sign(wdot) == np.sign(step)


def test_step_halving(logprod):
    inst, xs, _ = logprod
    x0 = stab.perturb(xs, 1, seed=4, rel=0.05)[0]
    a = stab.integrate(x0, inst, dt=2e-3, t_end=2.0).final
    b = stab.integrate(x0, inst, dt=1e-3, t_end=2.0).final
    assert np.max(np.abs(a - b)) < 1e-6


def test_blowup_detected():
    inst = dumbbell_instance("logprod", 0.3, 1.0)
    x = stab.pack(np.full(7, 0.9), np.zeros(3), np.full(7, 1e13))
    with pytest.raises(stab.IntegrationBlowup):
        stab.integrate(x, inst, dt=1e-3, t_end=0.01)


def test_lyapunov_basics(logprod):
    inst, xs, _ = logprod
    assert stab.lyapunov_value(xs, xs) == 0.0
    assert stab.lyapunov_derivative(xs, xs, inst) == pytest.approx(0.0, abs=1e-12)
    assert stab.g_term(0.7, 0.7) == 0.0


def test_vdot_nonpositive_short(logprod):
    inst, xs, _ = logprod
    starts = stab.random_starts(inst, xs, 4, seed=9)
    tr = stab.integrate(starts, inst, t_end=5.0, sample_every=0.05)
    assert np.max(stab.lyapunov_derivative(tr.states, xs, inst)) <= 1e-9
    V = stab.lyapunov_value(tr.states, xs)
    assert np.all(V[-1] < V[0])


def test_linearization_structure(logprod):
    inst, xs, _ = logprod
    lin = stab.linearization_matrix(xs, inst)
    L, S = inst.n_links, inst.n_sessions
    R = stab.rates(stab.Layout.of(inst).split(xs)[2], inst)
    assert np.allclose(np.diag(lin.J_f), -1.0 / R**2)
    assert np.all(lin.j_y_eigenvalues <= 1e-12)
    sym = lin.symmetric_part
    # with D = I the off-diagonal blocks cancel
    expected = np.zeros_like(sym)
    expected[:L, :L] = 2 * lin.B
    expected[L + S:, L + S:] = 2 * lin.J_y
    assert np.allclose(sym, expected, atol=1e-12)
    assert np.max(lin.spectrum.real) < 0


def test_linearization_matches_numerical_jacobian(skr):
    inst, xs, _ = skr
    lin = stab.linearization_matrix(xs, inst)
    num = stab.numerical_jacobian(xs, inst)
    # B is the diagonal part of the w block; off-diagonal w-w coupling is dropped
    L = inst.n_links
    mask = np.ones_like(lin.A, bool)
    mask[:L, :L] = np.eye(L, dtype=bool)
    assert np.allclose(lin.A[mask], num[mask], rtol=1e-4, atol=1e-5 * np.abs(num).max())


def test_b_entry_negative_when_u2_zero():
    t = Topology([0, 1], [Link(0, 0, 1, 50.0)])
    inst = ProblemInstance(t, [make_session(t, 0, 0, 1, utility="neg", f_min=0.9)])
    # NEG on a single link: U'' = -9/(3w-1)^2 < 0, and mu > 0 makes B more negative still
    x = stab.pack([0.9], [0.5], [0.01])
    lin = stab.linearization_matrix(x, inst)
    assert lin.B[0, 0] < lin.u2[0] < 0


def test_theorem2_logprod(logprod):
    inst, xs, _ = logprod
    rep = stab.theorem2_condition(xs, inst)
    assert rep.all_links
    assert np.all(rep.u2 < 0)
    assert rep.fd_error < 1e-5


def test_theorem2_false_case():
    # a positive U'' with no fidelity price: SKR near its floor is convex in w
    t = Topology([0, 1], [Link(0, 0, 1, 50.0)])
    inst = ProblemInstance(t, [make_session(t, 0, 0, 1, utility="skr", f_min=0.5)])
    for w in np.linspace(0.79, 0.999, 50):
        x = stab.pack([w], [0.0], [0.01])
        rep = stab.theorem2_condition(x, inst)
        assert rep.holds[0] == (rep.u2[0] < 0)
    assert not stab.theorem2_condition(stab.pack([0.999], [0.0], [0.01]), inst).all_links


def test_theorem2_skr_reported(skr):
    inst, xs, _ = skr
    rep = stab.theorem2_condition(xs, inst)
    assert rep.holds.shape == (7,)
    assert rep.fd_error < 1e-5


def test_skr_perturbation_recovery(skr):
    inst, xs, _ = skr
    starts = stab.perturb(xs, 5, seed=3, rel=0.01)
    tr = stab.integrate(starts, inst, t_end=3.0)
    assert np.max(np.abs(tr.final - xs)) < 1e-4
