"""Continuous-time primal-dual dynamics, Lyapunov checks and local linearization.

The state vector is ``x = [w, mu, lam]``. Rates are not part of the state:
they follow the prices through ``R_r = 1 / sum_{l on r} lam_l``. Every
function here accepts either one state of shape ``(n,)`` or a batch of shape
``(batch, n)``, so many trajectories can be integrated in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import utility as ut
from .core import W_FLOOR, PrimalDualState, ProblemInstance

BLOWUP = 1e12
PRICE_FLOOR = 1e-12


class IntegrationBlowup(RuntimeError):
    pass


@dataclass(frozen=True)
class Layout:
    n_links: int
    n_sessions: int

    @classmethod
    def of(cls, instance: ProblemInstance) -> Layout:
        return cls(instance.n_links, instance.n_sessions)

    @property
    def size(self) -> int:
        return 2 * self.n_links + self.n_sessions

    def split(self, x):
        L, S = self.n_links, self.n_sessions
        return x[..., :L], x[..., L:L + S], x[..., L + S:]


def pack(w, mu, lam) -> np.ndarray:
    return np.concatenate([np.asarray(w, float), np.asarray(mu, float), np.asarray(lam, float)], axis=-1)


def from_state(state: PrimalDualState) -> np.ndarray:
    return pack(state.w, state.mu, state.lam)


def rates(lam, instance: ProblemInstance) -> np.ndarray:
    price = np.asarray(lam) @ instance.routing
    return 1.0 / np.maximum(price, PRICE_FLOOR)


def _utility_gradient(w, instance: ProblemInstance) -> np.ndarray:
    A = instance.routing
    W = np.exp(np.log(w) @ A)
    wu = np.zeros_like(W)
    for kind, idx in instance.kind_index.items():
        if kind is not ut.UtilityKind.LOGPROD:
            wu[..., idx] = ut.wu_prime_clipped(kind, W[..., idx])
    return (wu @ A.T + instance.logprod_weight) / w


def ode_rhs(x, instance: ProblemInstance, w_floor: float = W_FLOOR) -> np.ndarray:
    """Time derivative with the one-sided clamps on the box and the duals."""
    lay = Layout.of(instance)
    x = np.asarray(x, float)
    w, mu, lam = lay.split(x)
    A = instance.routing
    R = rates(lam, instance)
    wdot = _utility_gradient(w, instance) - instance.d * lam + (mu @ A.T) / w
    wdot = np.where((w <= w_floor) & (wdot < 0), 0.0, wdot)
    wdot = np.where((w >= 1.0) & (wdot > 0), 0.0, wdot)
    lamdot = R @ A.T - (instance.d * (1.0 - w) - instance.slack)
    lamdot = np.where((lam <= 0) & (lamdot < 0), 0.0, lamdot)
    mudot = instance.K - np.log(w) @ A
    mudot = np.where((mu <= 0) & (mudot < 0), 0.0, mudot)
    return np.concatenate([wdot, mudot, lamdot], axis=-1)


def project(x, instance: ProblemInstance, w_floor: float = W_FLOOR) -> np.ndarray:
    lay = Layout.of(instance)
    w, mu, lam = lay.split(np.array(x, float))
    return np.concatenate([np.clip(w, w_floor, 1.0), np.maximum(mu, 0.0), np.maximum(lam, 0.0)], axis=-1)


@dataclass
class Trajectory:
    times: np.ndarray  # (samples,)
    states: np.ndarray  # (samples, ...) with the shape of x0 after the first axis

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def integrate(x0, instance: ProblemInstance, dt: float = 1e-3, t_end: float = 10.0,
              sample_every: float | None = None, w_floor: float = W_FLOOR) -> Trajectory:
    """Classical RK4 with fixed step ``dt`` and a projection onto the box after each step.

    Raises ``IntegrationBlowup`` as soon as any component exceeds ``1e12`` in
    magnitude or stops being finite.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not t_end >= 0:
        raise ValueError("t_end must be non-negative")
    n = int(round(t_end / dt))
    every = max(1, int(round((sample_every or dt) / dt)))
    x = project(x0, instance, w_floor)
    times, states = [0.0], [x.copy()]

    def f(y):
        return ode_rhs(y, instance, w_floor)

    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        for i in range(1, n + 1):
            x = _rk4(f, x, dt, instance, w_floor)
            if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > BLOWUP:
                bad = np.flatnonzero(~np.isfinite(x.ravel()) | (np.abs(x.ravel()) > BLOWUP))
                raise IntegrationBlowup(f"state left the finite range at t={i * dt:.6g} "
                                        f"(flat component {int(bad[0])})")
            if i % every == 0 or i == n:
                times.append(i * dt)
                states.append(x.copy())
    return Trajectory(np.array(times), np.array(states))


def _rk4(f, x, dt, instance, w_floor):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return project(x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), instance, w_floor)


def lyapunov_value(x, x_star) -> np.ndarray:
    d = np.asarray(x, float) - np.asarray(x_star, float)
    return 0.5 * np.sum(d * d, axis=-1)


def lyapunov_derivative(x, x_star, instance: ProblemInstance, w_floor: float = W_FLOOR) -> np.ndarray:
    d = np.asarray(x, float) - np.asarray(x_star, float)
    return np.sum(d * ode_rhs(x, instance, w_floor), axis=-1)


def g_term(xi, xj):
    """Summand ``(xi - xj) / xi + log(xj / xi)`` of the fidelity part of the Lyapunov derivative."""
    xi = np.asarray(xi, float)
    xj = np.asarray(xj, float)
    return (xi - xj) / xi + np.log(xj / xi)


# ---------------------------------------------------------------- equilibria

def equilibrium(instance: ProblemInstance, guess, tol: float = 1e-12, w_floor: float = W_FLOOR,
                active_tol: float = 1e-6) -> np.ndarray:
    """Polish an approximate equilibrium with a root solve on the active set.

    A dual whose value is below ``active_tol`` and whose constraint is slack
    at ``guess`` is pinned to zero; every other component must make its
    derivative vanish.
    """
    lay = Layout.of(instance)
    x0 = project(guess, instance, w_floor)
    rhs0 = ode_rhs(x0, instance, w_floor)
    _, mu0, lam0 = lay.split(x0)
    _, mud0, lamd0 = lay.split(rhs0)
    L, S = lay.n_links, lay.n_sessions
    pinned = np.zeros(lay.size, bool)
    pinned[L:L + S] = (mu0 < active_tol) & (mud0 <= 0)
    pinned[L + S:] = (lam0 < active_tol) & (lamd0 <= 0)

    def F(z):
        x = np.where(pinned, 0.0, z)
        raw = _raw_rhs(x, instance)
        return np.where(pinned, z, raw)

    sol = optimize.root(F, np.where(pinned, 0.0, x0), method="hybr", tol=tol)
    x = np.where(pinned, 0.0, sol.x)
    res = float(np.max(np.abs(ode_rhs(x, instance, w_floor))))
    if not sol.success and res > 1e-8:
        raise RuntimeError(f"equilibrium polish failed: {sol.message} (residual {res:.3g})")
    return x


def _raw_rhs(x, instance: ProblemInstance) -> np.ndarray:
    """Right-hand side without any clamps, for root finding and Jacobians."""
    lay = Layout.of(instance)
    w, mu, lam = lay.split(np.asarray(x, float))
    A = instance.routing
    R = rates(lam, instance)
    wdot = _utility_gradient(w, instance) - instance.d * lam + (mu @ A.T) / w
    lamdot = R @ A.T - (instance.d * (1.0 - w) - instance.slack)
    mudot = instance.K - np.log(w) @ A
    return np.concatenate([wdot, mudot, lamdot], axis=-1)


def numerical_jacobian(x, instance: ProblemInstance, h: float = 1e-7) -> np.ndarray:
    """Central-difference Jacobian of the unclamped right-hand side."""
    x = np.asarray(x, float)
    n = x.size
    J = np.empty((n, n))
    for j in range(n):
        step = h * max(1.0, abs(x[j]))
        e = np.zeros(n)
        e[j] = step
        J[:, j] = (_raw_rhs(x + e, instance) - _raw_rhs(x - e, instance)) / (2.0 * step)
    return J


# ------------------------------------------------------------ linearization

def link_second_derivative(instance: ProblemInstance, w, l: int) -> float:
    """``d^2 U / dw_l^2`` of the summed utility with the other links held fixed."""
    w = np.asarray(w, float)
    W = instance.e2e(w)
    total = 0.0
    for r, kind in enumerate(instance.kinds):
        if instance.routing[l, r] <= 0:
            continue
        a = instance.weights[l, r]
        total += float(ut.link_second_derivative(kind, W[r], w[l], a))
    return total


def summed_utility(instance: ProblemInstance, w) -> float:
    """Werner part of the summed utility (rates do not depend on ``w``)."""
    w = np.asarray(w, float)
    W = instance.e2e(w)
    total = 0.0
    for r, kind in enumerate(instance.kinds):
        on = instance.routing[:, r] > 0
        if kind is ut.UtilityKind.LOGPROD:
            total += float(np.log(w[on]) @ instance.weights[on, r])
        else:
            total += float(np.log(ut.pair_factor(kind, W[r])))
    return total


def second_derivative_fd(instance: ProblemInstance, w, l: int, h: float = 1e-4) -> float:
    w = np.asarray(w, float)
    e = np.zeros_like(w)
    e[l] = h
    return (summed_utility(instance, w + e) - 2.0 * summed_utility(instance, w)
            + summed_utility(instance, w - e)) / (h * h)


@dataclass
class Linearization:
    A: np.ndarray
    B: np.ndarray  # diagonal matrix
    W: np.ndarray  # diag(w*)
    J_f: np.ndarray  # diag(-1 / R*^2)
    J_y: np.ndarray
    u2: np.ndarray  # U'' per link
    mu_term: np.ndarray  # sum mu* / w*^2 per link

    @property
    def symmetric_part(self) -> np.ndarray:
        return self.A + self.A.T

    @property
    def b_eigenvalues(self) -> np.ndarray:
        return np.sort(np.diag(self.B))

    @property
    def j_y_eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(0.5 * (self.J_y + self.J_y.T))

    @property
    def spectrum(self) -> np.ndarray:
        return np.linalg.eigvals(self.A)


def linearization_matrix(x_star, instance: ProblemInstance) -> Linearization:
    """Jacobian of the dynamics at ``x_star`` with ``B`` kept diagonal.

    Block layout follows the state order ``[w, mu, lam]``:
    ``[[B, W^-1 R, -D], [-R^T W^-1, 0, 0], [D, 0, J_y]]`` where ``D`` holds
    the link rate parameters. With ``D = I`` the symmetric part reduces to
    ``diag(2B, 0, 2 J_y)``.
    """
    lay = Layout.of(instance)
    w, mu, lam = lay.split(np.asarray(x_star, float))
    if np.any(w <= 0) or np.any(w >= 1):
        raise ValueError("linearization needs every w* strictly inside (0, 1)")
    Rm = instance.routing
    R = rates(lam, instance)
    J_f = np.diag(-1.0 / R**2)
    J_y = Rm @ np.linalg.inv(J_f) @ Rm.T
    u2 = np.array([link_second_derivative(instance, w, l) for l in range(lay.n_links)])
    mu_term = (Rm @ mu) / w**2
    B = np.diag(u2 - mu_term)
    Wd = np.diag(w)
    Winv = np.diag(1.0 / w)
    D = np.diag(instance.d)
    L, S = lay.n_links, lay.n_sessions
    A = np.zeros((lay.size, lay.size))
    A[:L, :L] = B
    A[:L, L:L + S] = Winv @ Rm
    A[:L, L + S:] = -D
    A[L:L + S, :L] = -Rm.T @ Winv
    A[L + S:, :L] = D
    A[L + S:, L + S:] = J_y
    return Linearization(A, B, Wd, J_f, J_y, u2, mu_term)


@dataclass
class Theorem2Report:
    holds: np.ndarray  # per link
    u2: np.ndarray
    mu_term: np.ndarray
    u2_fd: np.ndarray

    @property
    def all_links(self) -> bool:
        return bool(np.all(self.holds))

    @property
    def fd_error(self) -> float:
        scale = np.maximum(np.abs(self.u2), 1e-12)
        return float(np.max(np.abs(self.u2 - self.u2_fd) / scale))


def theorem2_condition(x_star, instance: ProblemInstance, used_only: bool = True) -> Theorem2Report:
    """Per-link check of ``U''(w*) < sum mu* / w*^2``.

    Links no session uses have neither side defined and are reported as
    holding when ``used_only`` is set.
    """
    lay = Layout.of(instance)
    w, mu, _ = lay.split(np.asarray(x_star, float))
    Rm = instance.routing
    u2 = np.array([link_second_derivative(instance, w, l) for l in range(lay.n_links)])
    u2_fd = np.array([second_derivative_fd(instance, w, l) for l in range(lay.n_links)])
    mu_term = (Rm @ mu) / w**2
    holds = u2 < mu_term
    if used_only:
        holds = holds | (Rm.sum(axis=1) == 0)
    return Theorem2Report(holds, u2, mu_term, u2_fd)


def random_starts(instance: ProblemInstance, x_star, count: int, seed: int,
                  spread: float = 0.5) -> np.ndarray:
    """Starts scattered around ``x_star``: each ``w`` within ``spread`` of the
    distance to the box edge, and each dual multiplied by a factor in
    ``[1 - spread, 1 + spread]`` (zero duals start on ``(0, 0.1]``)."""
    rng = np.random.default_rng(seed)
    lay = Layout.of(instance)
    w, mu, lam = lay.split(np.asarray(x_star, float))
    u = rng.uniform(-1.0, 1.0, (count, lay.n_links))
    w0 = np.where(u > 0, w + u * spread * (1.0 - w), w + u * spread * w)
    def dual(v, size):
        f = rng.uniform(1.0 - spread, 1.0 + spread, (count, size))
        zero = v <= 0
        return np.where(zero, 0.1 * (1.0 - rng.random((count, size))), v * f)
    return pack(w0, dual(mu, lay.n_sessions), dual(lam, lay.n_links))


def perturb(x_star, count: int, seed: int, rel: float = 0.01) -> np.ndarray:
    """Copies of ``x_star`` with every component scaled by a factor in ``[1 - rel, 1 + rel]``."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x_star, float)
    return x * rng.uniform(1.0 - rel, 1.0 + rel, (count, x.size))
