"""Per-link and per-session controllers of the sequential-network protocol."""

from __future__ import annotations

import math
from collections import deque
from enum import Enum
from typing import NamedTuple

from .. import utility as ut
from ..core import W_FLOOR, StepSizes
from .header import Ack, QDatagram


class Variant(str, Enum):
    QPD = "qpd"
    QPD_APPROX = "qpd-approx"
    QPD_DA = "qpd-da"
    QPD_DA_APPROX = "qpd-da-approx"
    QPD_PI = "qpd-pi"
    QTCP = "qtcp"

    @classmethod
    def parse(cls, value) -> Variant:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown protocol variant {value!r} (expected one of {names})") from None

    @property
    def approx(self) -> bool:
        return self in (Variant.QPD_APPROX, Variant.QPD_DA_APPROX)

    @property
    def da(self) -> bool:
        return self in (Variant.QPD_DA, Variant.QPD_DA_APPROX)


def approx_rate_estimate(t_int: float | None, gap: float, alpha: float = 0.9,
                         weight: int = 1) -> tuple[float, float]:
    """Exponential average of interarrival gaps and the implied aggregate rate.

    A weight-``m`` arrival counts as ``m`` arrivals spread evenly over the gap.
    ``t_int=None`` means no gap has been seen yet; the first sub-update then
    sets ``T_int`` to the gap directly.
    """
    if gap < 0:
        raise ValueError("interarrival gap must be non-negative")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if weight < 1:
        raise ValueError("weight must be at least 1")
    sub = gap / weight
    for _ in range(weight):
        t_int = sub if t_int is None else alpha * t_int + (1.0 - alpha) * sub
    t_int = max(t_int, 1e-12)
    return t_int, 1.0 / t_int


class DACapacity(NamedTuple):
    value: float
    feasible: bool


def da_capacity(d: float, w: float, G: float, t_c: float) -> DACapacity:
    """Capacity left after reserving ``G / T_c`` pairs/s of headroom.

    ``G = 0`` disables the reservation. Otherwise ``G`` must exceed 1; the
    queueing delay of an M/M/1 link is then held below ``T_c / G``.
    """
    if G != 0 and not G > 1:
        raise ValueError("G must be 0 (disabled) or greater than 1")
    if not t_c > 0:
        raise ValueError("coherence time must be positive")
    slack = 0.0 if G == 0 or math.isinf(t_c) else G / t_c
    value = d * (1.0 - w) - slack
    return DACapacity(value, value > 0)


PRICE_FLOOR = 1e-2


def scaled_price_step(lam: float, gap: float, raw_capacity: float, gain_dt: float,
                      floor: float = PRICE_FLOOR) -> float:
    """Move the price by ``gain_dt * gap / raw_capacity`` in log space.

    This is the additive price step with the per-link step size
    ``lam * gain_dt / c``: same direction, but the loop gain no longer grows
    with the rates the link carries. A single step moves the price by at
    most a factor e. The price is held above ``floor / c``, a level whose
    pull on any rate is at most ``c / floor``, so an idle link can start
    pricing again within a few e-folds once it congests.
    """
    x = gain_dt * gap / raw_capacity
    x = 1.0 if x > 1.0 else (-1.0 if x < -1.0 else x)
    lo = floor / raw_capacity
    lam = max(lam, lo) * math.exp(x)
    return lam if lam > lo else lo


class LinkController:
    """State of one link controller.

    Keeps the running sums the primal-dual updates need, a FIFO of waiting
    q-datagrams and the occupancy of the memory banks that feed the link.
    Per-session contributions to ``R_sum`` and ``M_sum`` are kept as well,
    so termination subtracts exactly what this link has accumulated.
    """

    def __init__(self, link_id: int, d: float, chi: float, prop_delay: float, w0: float,
                 lam0: float, steps: StepSizes, slack: float = 0.0, w_floor: float = W_FLOOR,
                 approx: bool = False, alpha: float = 0.9, w_ceil: float = 1.0,
                 price_gain: float | None = None, price_floor: float = PRICE_FLOOR):
        self.id = link_id
        self.d = d
        self.chi = chi
        self.prop = prop_delay
        self.w = w0
        self.lam = lam0
        self.k_lambda = steps.k_lambda
        self.k_w = steps.k_w
        self.t_outer = steps.t_outer
        self.slack = slack
        self.w_floor = w_floor
        self.w_ceil = w_ceil
        self.approx = approx
        self.alpha = alpha
        self.R_sum = 0.0
        self.M_sum = 0.0
        self.wu: dict[int, float] = {}  # W_r U'_r per session; f_l = wu / w
        self.contrib_R: dict[int, float] = {}
        self.contrib_M: dict[int, float] = {}
        self.term_epoch: dict[int, int] = {}
        self.processed = 0
        self.t_int: float | None = None
        self.last_arrival: float | None = None
        self.banked: dict[int, int] = {}
        self.frozen = False
        self.pi: PiController | None = None
        self.up = True
        self.queue: deque[QDatagram] = deque()
        self.busy: QDatagram | None = None
        self.banks: dict[tuple[int, int], int] = {}
        self.unknown = 0
        self.stalled = False
        # None selects the additive price step; otherwise the scaled step with this gain (1/s)
        self.price_gain = price_gain
        self.price_floor = price_floor
        self.last_update: float | None = None
        # R_sum in force since the last price update; the scaled step integrates
        # over that interval, so it must not see a value set at its right edge
        self.r_held = 0.0

    @property
    def capacity(self) -> float:
        return self.d * (1.0 - self.w) - self.slack

    @property
    def f_table(self) -> dict[int, float]:
        return {sid: v / self.w for sid, v in self.wu.items()}

    @property
    def f_sum(self) -> float:
        return sum(self.wu.values()) / self.w

    def queue_length(self) -> int:
        return len(self.queue) + (self.busy is not None)

    def knows(self, dg: QDatagram, epoch: int) -> bool:
        return epoch > self.term_epoch.get(dg.sid, -1)

    def observe_arrival(self, now: float, weight: int) -> None:
        """Interarrival estimate used by the approximate variants."""
        self.r_held = self.R_sum
        if self.last_arrival is not None:
            self.t_int, r_sum = approx_rate_estimate(
                self.t_int, now - self.last_arrival, self.alpha, weight)
            self.R_sum = r_sum
        self.last_arrival = now

    def admit(self, dg: QDatagram, now: float = 0.0) -> None:
        """Controller steps (a) and (b): fold the header deltas in, then move ``lam`` and ``w``."""
        sid = dg.sid
        if not self.approx:
            self.r_held = self.R_sum
            self.R_sum += dg.delta_R
            self.contrib_R[sid] = self.contrib_R.get(sid, 0.0) + dg.delta_R
        self.M_sum += dg.delta_mu
        self.contrib_M[sid] = self.contrib_M.get(sid, 0.0) + dg.delta_mu
        self.wu[sid] = dg.wu_prime
        if not self.frozen:
            raw = self.d * (1.0 - self.w)
            gap = self.R_sum - (raw - self.slack)
            if self.price_gain is None:
                lam = self.lam + self.k_lambda * gap
                self.lam = lam if lam > 0.0 else 0.0
            else:
                dt = 0.0 if self.last_update is None else now - self.last_update
                self.last_update = now
                held_gap = self.r_held - (raw - self.slack)
                self.lam = scaled_price_step(self.lam, held_gap, raw, self.price_gain * dt, self.price_floor)
            if self.processed % self.t_outer == 0:
                w = self.w
                wdot = -self.d * self.lam + (sum(self.wu.values()) + self.M_sum) / w
                w += self.k_w * wdot
                self.w = self.w_floor if w < self.w_floor else (self.w_ceil if w > self.w_ceil else w)
        self.processed += 1

    def stamp(self, dg: QDatagram) -> None:
        """Steps (c) and (d): write this link's Werner parameter and price into the header."""
        dg.w_prod *= self.w
        dg.lambda_sum += self.lam

    def process(self, dg: QDatagram) -> None:
        self.admit(dg)
        self.stamp(dg)

    def correct(self, sid: int, delta_R: float, delta_mu: float) -> None:
        """Undo the sums contributed by a q-datagram lost further downstream."""
        if not self.approx:
            self.R_sum -= delta_R
            self.contrib_R[sid] = self.contrib_R.get(sid, 0.0) - delta_R
        self.M_sum -= delta_mu
        self.contrib_M[sid] = self.contrib_M.get(sid, 0.0) - delta_mu

    def terminate(self, sid: int, epoch: int) -> bool:
        if sid not in self.contrib_M and sid not in self.wu:
            self.unknown += 1
            self.term_epoch[sid] = max(epoch, self.term_epoch.get(sid, -1))
            return False
        if not self.approx:
            self.R_sum -= self.contrib_R.pop(sid, 0.0)
            if not self.contrib_R:
                self.R_sum = 0.0
        self.M_sum -= self.contrib_M.pop(sid, 0.0)
        if not self.contrib_M:
            self.M_sum = 0.0
        self.wu.pop(sid, None)
        self.term_epoch[sid] = max(epoch, self.term_epoch.get(sid, -1))
        return True


class PiController:
    """Proportional-integral queue controller.

    The output ``u`` in [0, 1] is the fraction of q-datagrams to mark. Marks
    are spaced deterministically by accumulating ``u`` per q-datagram, so the
    controller consumes no random numbers.
    """

    def __init__(self, kp: float = 0.1, ki: float = 0.01, target: float = 2.0):
        if kp < 0 or ki < 0:
            raise ValueError("PI gains must be non-negative")
        if target < 0:
            raise ValueError("queue target must be non-negative")
        self.kp = kp
        self.ki = ki
        self.target = target
        self.integral = 0.0
        self.u = 0.0
        self.last_t: float | None = None
        self._acc = 0.0

    def step(self, queue_length: float, now: float) -> float:
        e = queue_length - self.target
        if self.last_t is not None:
            self.integral += e * (now - self.last_t)
            # anti-windup: the integral alone never asks for more than u = 1
            hi = 1.0 / self.ki if self.ki > 0 else 0.0
            self.integral = min(max(self.integral, 0.0), hi)
        self.last_t = now
        self.u = min(max(self.kp * e + self.ki * self.integral, 0.0), 1.0)
        return self.u

    def should_mark(self) -> bool:
        self._acc += self.u
        if self._acc >= 1.0:
            self._acc -= 1.0
            return True
        return False


class AimdController:
    """Additive increase once per ACK window, halve on congestion.

    A window closes when an ACK arrives for a sequence number sent after the
    window opened, which is one round trip. The rate is halved at most once
    per window, keyed by the sequence number of the lost or marked q-datagram.
    """

    def __init__(self, rate: float, ai: float = 1.0, md: float = 0.5, r_min: float = 0.1):
        if not rate > 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.ai = ai
        self.md = md
        self.r_min = r_min
        self.window_end = 0
        self.recovery = 0

    def on_ack(self, seq: int, next_seq: int) -> None:
        if seq >= self.window_end:
            self.rate += self.ai
            self.window_end = next_seq

    def on_congestion(self, seq: int, next_seq: int) -> bool:
        if seq < self.recovery:
            return False
        self.rate = max(self.rate * self.md, self.r_min)
        self.recovery = next_seq
        self.window_end = next_seq
        return True


class SessionController:
    """Source-side controller of one session."""

    def __init__(self, spec, nodes: list[int], R0: float, mu0: float, W0: float,
                 steps: StepSizes):
        self.sid = spec.id
        self.src = spec.src
        self.dst = spec.dst
        self.path = list(spec.path)
        self.nodes = nodes
        self.kind = ut.UtilityKind.parse(spec.utility)
        self.a = spec.weight
        self.K = ut.k_threshold(spec.f_min)
        self.R = R0
        self.mu = mu0
        self.W = W0
        self.W_delivered = W0
        self.k_mu = steps.k_mu
        self.t_outer = steps.t_outer
        self.announced_R = 0.0
        self.announced_mu = 0.0
        self.seq = 0
        self.last_ack_seq = -1
        self.acks = 0
        self.stale_acks = 0
        self.held = 0
        self.epoch = 0
        self.active = False
        self.suspended_by: set[int] = set()
        self.timer_version = 0
        self.timer_at = math.inf
        self.last_send = -math.inf
        self.aimd: AimdController | None = None
        self.generated = 0

    @property
    def sending(self) -> bool:
        return self.active and not self.suspended_by

    def wu_prime(self) -> float:
        return ut.wu_prime_scalar(self.kind, self.W, self.a)

    def make_datagram(self, now: float) -> QDatagram:
        dR = self.R - self.announced_R
        dmu = self.mu - self.announced_mu
        self.announced_R = self.R
        self.announced_mu = self.mu
        dg = QDatagram(self.src, self.dst, self.seq, self.sid, dR, self.wu_prime(), dmu, now)
        self.seq += 1
        self.generated += 1
        self.last_send = now
        return dg

    def rollback(self, delta_R: float, delta_mu: float) -> None:
        """A lost q-datagram's deltas never reached the sink side; re-announce them."""
        self.announced_R -= delta_R
        self.announced_mu -= delta_mu

    def reset_announced(self) -> None:
        self.announced_R = 0.0
        self.announced_mu = 0.0

    def on_ack(self, ack: Ack, use_delivered: bool = False) -> bool:
        """Apply an ACK; returns ``False`` for stale ones."""
        if ack.seq <= self.last_ack_seq:
            self.stale_acks += 1
            return False
        self.last_ack_seq = ack.seq
        self.W = ack.w_prod
        self.W_delivered = ack.w_delivered
        if self.aimd is not None:
            if ack.mark:
                self.aimd.on_congestion(ack.seq, self.seq)
            else:
                self.aimd.on_ack(ack.seq, self.seq)
            self.R = self.aimd.rate
            self.acks += 1
            return True
        if ack.lambda_sum > 0.0:
            self.R = 1.0 / ack.lambda_sum
        else:
            self.held += 1
        if self.acks % self.t_outer == 0:
            W = ack.w_delivered if use_delivered else ack.w_prod
            if W > 0.0:
                mu = self.mu + self.k_mu * (self.K - math.log(W))
                self.mu = mu if mu > 0.0 else 0.0
        self.acks += 1
        return True

    def on_loss(self, seq: int) -> None:
        if self.aimd is not None:
            self.aimd.on_congestion(seq, self.seq)
            self.R = self.aimd.rate

    def log_utility(self) -> float:
        if self.kind is ut.UtilityKind.LOGPROD:
            return math.log(self.R) + self.a * math.log(self.W)
        g = ut.pair_factor_scalar(self.kind, self.W)
        return math.log(self.R * g) if g > 0 else -math.inf
