"""Primal-dual updates for network utility maximization over rates and Werner parameters.

The problem: maximize the summed session utilities subject to

* link capacity: ``sum_{r on l} R_r <= d_l (1 - w_l) - slack_l``
* end-to-end fidelity: ``sum_{l on r} log w_l >= K_r``
* ``0 <= w_l <= 1`` and ``R_r >= 0``.

Link prices ``lam`` and fidelity prices ``mu`` are the multipliers of the two
constraint families. All updates below are Jacobi style: every quantity at
``t + 1`` is computed from the state at ``t``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import utility as ut
from .topology import SessionSpec, Topology, routing_matrix

log = logging.getLogger(__name__)

W_FLOOR = 1e-4
W_INIT = 0.967


@dataclass
class ProblemInstance:
    topology: Topology
    sessions: list[SessionSpec]
    d: np.ndarray = None  # per-link rate parameter, pairs/s
    slack: np.ndarray = None  # per-link capacity reduction (G / T_c), 0 when disabled

    def __post_init__(self):
        for s in self.sessions:
            s.validate(self.topology)
        n = self.topology.n_links
        self.d = self.topology.link_rates() if self.d is None else np.asarray(self.d, float).copy()
        self.slack = np.zeros(n) if self.slack is None else np.broadcast_to(
            np.asarray(self.slack, float), (n,)).copy()
        if self.d.shape != (n,) or np.any(self.d <= 0):
            raise ValueError("d must hold one positive value per link")
        if np.any(self.slack < 0):
            raise ValueError("capacity slack must be non-negative")
        report = routing_matrix(self.topology, [s.path for s in self.sessions])
        self.routing = report.matrix
        self.rank = report.rank
        self.full_column_rank = report.full_column_rank
        self.K = np.array([ut.k_threshold(s.f_min) for s in self.sessions])
        self.kinds = [ut.UtilityKind.parse(s.utility) for s in self.sessions]
        # per (link, session) logprod weights; zero off-path
        self.weights = self.routing * np.array([s.weight for s in self.sessions])[None, :]
        self.kind_index = {}
        for r, k in enumerate(self.kinds):
            self.kind_index.setdefault(k, []).append(r)
        self.kind_index = {k: np.array(v) for k, v in self.kind_index.items()}
        is_lp = np.array([k is ut.UtilityKind.LOGPROD for k in self.kinds], bool)
        self.logprod_weight = self.weights[:, is_lp].sum(axis=1)

    @property
    def n_links(self) -> int:
        return self.routing.shape[0]

    @property
    def n_sessions(self) -> int:
        return self.routing.shape[1]

    def capacity(self, w) -> np.ndarray:
        return self.d * (1.0 - np.asarray(w)) - self.slack

    def load(self, R) -> np.ndarray:
        return self.routing @ np.asarray(R)

    def log_werner(self, w) -> np.ndarray:
        """Per-session ``sum_{l on r} log w_l``."""
        return self.routing.T @ np.log(np.asarray(w))

    def e2e(self, w) -> np.ndarray:
        return np.exp(self.log_werner(w))

    def with_sessions(self, sessions) -> ProblemInstance:
        return ProblemInstance(self.topology, list(sessions), self.d, self.slack)


@dataclass
class StepSizes:
    k_lambda: float | np.ndarray = 1e-5
    k_mu: float | np.ndarray = 1e-2
    k_w: float | np.ndarray = 1e-4
    t_outer: int = 10

    def __post_init__(self):
        for name in ("k_lambda", "k_mu", "k_w"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise ValueError(f"{name} must be strictly positive")
        if int(self.t_outer) != self.t_outer or self.t_outer < 1:
            raise ValueError("t_outer must be an integer >= 1")
        self.t_outer = int(self.t_outer)


@dataclass
class PrimalDualState:
    R: np.ndarray
    w: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    t: int = 0
    held_rates: int = 0  # rate updates skipped because the path price was zero

    def copy(self) -> PrimalDualState:
        return replace(self, R=self.R.copy(), w=self.w.copy(), lam=self.lam.copy(), mu=self.mu.copy())

    def check(self, w_floor: float = W_FLOOR) -> None:
        assert np.all(self.lam >= 0) and np.all(self.mu >= 0)
        assert np.all(self.w >= w_floor) and np.all(self.w <= 1)
        assert np.all(self.R > 0)


def _open_uniform(rng, high, size):
    """Uniform on ``(0, high]``."""
    return high - rng.uniform(0.0, high, size)


def initial_state(instance: ProblemInstance, rng=None, w0: float = W_INIT) -> PrimalDualState:
    """Random start: ``w = w0``; prices on ``(0, 0.1]``; rates on ``(0, c_min / (2 N_max)]``.

    ``c_min`` is the smallest capacity ``d_l (1 - w0)``, so the starting rates
    are feasible at the starting Werner parameters.
    """
    rng = np.random.default_rng(rng)
    n_max = max(1.0, instance.routing.sum(axis=1).max())
    c_min = instance.d.min() * (1.0 - w0)
    return PrimalDualState(
        R=_open_uniform(rng, c_min / (2.0 * n_max), instance.n_sessions),
        w=np.full(instance.n_links, float(w0)),
        lam=_open_uniform(rng, 0.1, instance.n_links),
        mu=_open_uniform(rng, 0.1, instance.n_sessions),
    )


def update_lambda(state: PrimalDualState, instance: ProblemInstance, steps: StepSizes) -> np.ndarray:
    grad = instance.load(state.R) - instance.capacity(state.w)
    return np.maximum(state.lam + steps.k_lambda * grad, 0.0)


def update_rate(state: PrimalDualState, instance: ProblemInstance):
    """Best-response rates ``1 / sum(path prices)``; zero-price sessions keep their rate.

    Returns ``(R, n_held)``.
    """
    price = instance.routing.T @ state.lam
    held = price <= 0
    R = state.R.copy()
    R[~held] = 1.0 / price[~held]
    return R, int(held.sum())


def update_mu(state: PrimalDualState, instance: ProblemInstance, steps: StepSizes) -> np.ndarray:
    if np.any(state.w <= 0):
        raise ValueError("degenerate state: w_l = 0 on some path")
    grad = instance.K - instance.log_werner(state.w)
    return np.maximum(state.mu + steps.k_mu * grad, 0.0)


def utility_link_gradient(instance: ProblemInstance, w) -> np.ndarray:
    """``dU/dw_l`` summed over sessions, i.e. ``sum_r f_l(r)``.

    SKR/NEG slopes are evaluated at the end-to-end value clipped into the
    utility domain, so transients below the domain floor see a large finite
    push back up instead of a domain error.
    """
    w = np.asarray(w, float)
    W = instance.e2e(w)
    wu = np.zeros(instance.n_sessions)
    for kind, idx in instance.kind_index.items():
        if kind is not ut.UtilityKind.LOGPROD:
            wu[idx] = ut.wu_prime_clipped(kind, W[idx])
    return (instance.routing @ wu + instance.logprod_weight) / w


def werner_gradient(state: PrimalDualState, instance: ProblemInstance) -> np.ndarray:
    w = state.w
    return (
        -instance.d * state.lam
        + utility_link_gradient(instance, w)
        + (instance.routing @ state.mu) / w
    )


def update_w(state: PrimalDualState, instance: ProblemInstance, steps: StepSizes,
             w_floor: float = W_FLOOR) -> np.ndarray:
    return np.clip(state.w + steps.k_w * werner_gradient(state, instance), w_floor, 1.0)


def bilevel_step(state: PrimalDualState, instance: ProblemInstance, steps: StepSizes,
                 w_floor: float = W_FLOOR) -> PrimalDualState:
    """One iteration; ``mu`` and ``w`` move only when ``t`` is a multiple of ``t_outer``.

    Updates run in the order a link controller and then a session controller
    apply them: prices first, then ``w`` against the fresh prices, then the
    rates and fidelity prices against the fresh ``lam`` and ``w``. Evaluating
    everything from the old state instead turns the price/Werner coupling into
    an explicit Euler oscillator that grows for the step sizes used here.
    """
    outer = state.t % steps.t_outer == 0
    nxt = state.copy()
    nxt.lam = update_lambda(state, instance, steps)
    if outer:
        nxt.w = update_w(nxt, instance, steps, w_floor)
    nxt.R, held = update_rate(nxt, instance)
    if outer:
        nxt.mu = update_mu(nxt, instance, steps)
    nxt.t = state.t + 1
    nxt.held_rates = state.held_rates + held
    return nxt


def kkt_residual(state: PrimalDualState, instance: ProblemInstance, w_floor: float = W_FLOOR) -> float:
    """Infinity norm over stationarity, feasibility and complementary slackness terms."""
    R, w, lam, mu = state.R, state.w, state.lam, state.mu
    price = instance.routing.T @ lam
    rate_grad = 1.0 / R - price
    wg = werner_gradient(state, instance)
    wg = np.where((w >= 1.0) & (wg > 0), 0.0, wg)
    wg = np.where((w <= w_floor) & (wg < 0), 0.0, wg)
    cap_gap = instance.load(R) - instance.capacity(w)
    fid_gap = instance.K - instance.log_werner(w)
    terms = [
        np.abs(rate_grad),
        np.abs(wg),
        np.maximum(cap_gap, 0.0),
        np.maximum(fid_gap, 0.0),
        np.abs(lam * cap_gap),
        np.abs(mu * fid_gap),
    ]
    return float(max(np.max(t) if t.size else 0.0 for t in terms))


def session_utilities(instance: ProblemInstance, R, w) -> np.ndarray:
    W = instance.e2e(w)
    out = np.empty(instance.n_sessions)
    for r, kind in enumerate(instance.kinds):
        if kind is ut.UtilityKind.LOGPROD:
            on = instance.routing[:, r] > 0
            out[r] = ut.utility_value(kind, R[r], np.asarray(w)[on], instance.weights[on, r])
        else:
            out[r] = ut.utility_value(kind, R[r], min(W[r], 1.0))
    return out


def absolute_utilities(instance: ProblemInstance, R, w) -> np.ndarray:
    """``R_r * max(0, g(W_r))``: key rate for SKR sessions, negativity rate for NEG."""
    W = instance.e2e(w)
    out = np.zeros(instance.n_sessions)
    for r, kind in enumerate(instance.kinds):
        if kind is not ut.UtilityKind.LOGPROD:
            out[r] = R[r] * max(0.0, ut.pair_factor(kind, W[r]))
    return out


@dataclass
class SolveResult:
    state: PrimalDualState
    utility: float
    residual: float
    converged: bool
    iterations: int
    absolute: float = 0.0  # summed R * g(W) at the returned point
    history: list[float] = field(default_factory=list, repr=False)


def solve_centralized(instance: ProblemInstance, steps: StepSizes | None = None, tolerance: float = 1e-6,
                      max_iter: int = 2_000_000, state: PrimalDualState | None = None, rng=None,
                      check_every: int = 200) -> SolveResult:
    """Iterate the primal-dual map with every update applied each iteration.

    Stops once the KKT residual drops below ``tolerance``. Non-convergence is
    reported through ``converged`` together with the final residual.
    """
    steps = StepSizes() if steps is None else steps
    steps = replace(steps, t_outer=1)
    state = initial_state(instance, rng) if state is None else state.copy()
    history = []
    residual = kkt_residual(state, instance)
    it = 0
    while it < max_iter and residual >= tolerance:
        for _ in range(check_every):
            state = bilevel_step(state, instance, steps)
        it += check_every
        residual = kkt_residual(state, instance)
        history.append(residual)
        if not np.isfinite(residual):
            break
    converged = residual < tolerance
    if not converged:
        log.warning("centralized solve stopped at residual %.3g after %d iterations", residual, it)
    total = float(session_utilities(instance, state.R, state.w).sum())
    absolute = float(absolute_utilities(instance, state.R, state.w).sum())
    return SolveResult(state, total, residual, converged, it, absolute, history)


def slater_point(instance: ProblemInstance):
    """A strictly feasible ``(R, w)``: uniform ``w = 1 - delta`` and uniform small ``R``."""
    if np.any(instance.K >= 0):
        raise ValueError("no strictly feasible point: some session requires F_min = 1")
    hops = instance.routing.sum(axis=0)
    # each session needs |r| log(1 - delta) > K_r; long paths are the binding ones
    k_need = np.max(instance.K / hops)
    delta = 0.5 * (1.0 - np.exp(k_need))
    if not 0 < delta < 1:
        raise ValueError("no valid delta for the fidelity constraints")
    users = instance.routing.sum(axis=1)
    margin = instance.d * delta - instance.slack
    used = users > 0
    if np.any(margin[used] <= 0):
        raise ValueError("capacity slack leaves no strictly feasible rate")
    eps = 0.5 * np.min(margin[used] / users[used])
    R = np.full(instance.n_sessions, eps)
    w = np.full(instance.n_links, 1.0 - delta)
    return R, w


GRID_STEP = 1e-3


def _pf_rates(caps_alone, cap_shared):
    """Proportionally fair split for two sessions (vectorized over grid points)."""
    c1, c2 = caps_alone
    r1 = np.minimum(c1, np.maximum(cap_shared / 2.0, cap_shared - c2))
    r2 = np.minimum(c2, cap_shared - r1)
    return r1, r2


def brute_force_oracle(instance: ProblemInstance, step: float = GRID_STEP):
    """Grid search over ``w`` with the exact best rates for each grid point.

    Limited to two links and two sessions. Returns ``(w, R, utility)``.
    """
    L, S = instance.n_links, instance.n_sessions
    if L > 2 or S > 2:
        raise ValueError("brute-force oracle handles at most 2 links and 2 sessions")
    axis = np.arange(step, 1.0 + step / 2, step)
    grids = np.meshgrid(*([axis] * L), indexing="ij")
    W_links = np.stack([g.ravel() for g in grids], axis=1)  # points x links
    cap = instance.d[None, :] * (1.0 - W_links) - instance.slack[None, :]
    A = instance.routing
    big = np.inf
    if S == 1:
        on = A[:, 0] > 0
        rates = [np.min(np.where(on[None, :], cap, big), axis=1)]
    else:
        only1 = (A[:, 0] > 0) & (A[:, 1] == 0)
        only2 = (A[:, 1] > 0) & (A[:, 0] == 0)
        both = (A[:, 0] > 0) & (A[:, 1] > 0)
        c1 = np.min(np.where(only1[None, :], cap, big), axis=1)
        c2 = np.min(np.where(only2[None, :], cap, big), axis=1)
        cs = np.min(np.where(both[None, :], cap, big), axis=1)
        shared = np.isfinite(cs)
        r1, r2 = _pf_rates((c1, c2), np.where(shared, cs, 0.0))
        rates = [np.where(shared, r1, c1), np.where(shared, r2, c2)]
    logw = np.log(W_links)
    total = np.zeros(len(W_links))
    ok = np.ones(len(W_links), bool)
    for r, kind in enumerate(instance.kinds):
        on = A[:, r] > 0
        lw = logw[:, on].sum(axis=1)
        ok &= (rates[r] > 0) & (lw >= instance.K[r] - 1e-12)
        with np.errstate(divide="ignore", invalid="ignore"):
            if kind is ut.UtilityKind.LOGPROD:
                part = logw[:, on] @ instance.weights[on, r]
            else:
                g = np.asarray(ut.pair_factor(kind, np.exp(lw)))
                ok &= g > 0
                part = np.log(np.where(g > 0, g, 1.0))
            total += np.log(np.where(rates[r] > 0, rates[r], 1.0)) + part
    if not ok.any():
        raise ValueError("no feasible grid point")
    total = np.where(ok, total, -np.inf)
    best = int(np.argmax(total))
    return W_links[best].copy(), np.array([r[best] for r in rates]), float(total[best])
