"""Event-driven simulation of a sequential quantum network running the protocol.

One :class:`Simulation` owns a clock, a random stream, one controller per
link and one per session. Controllers only interact through scheduled
events: q-datagram arrivals, LLE completions, ACKs and classical control
messages (loss corrections, terminations, failure notices).

A q-datagram for session ``r`` enters the queue of the first link on its
path at creation time. When a link starts serving it, the link controller
updates its state and the header, then draws an LLE generation time. On
completion the header crosses the link (propagation delay) and joins the
next queue, or reaches the sink, which returns an ACK along the reverse
path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import metrics
from .. import utility as ut
from ..core import W_FLOOR, W_INIT, StepSizes
from ..simkernel import (
    Engine,
    EventKind,
    Intervention,
    InterventionKind,
    SimRng,
    StalledLinkError,
    inject,
    propagation_delay,
    sample_lle_time,
)
from ..topology import SessionSpec, Topology, TopologyError, path_nodes
from .controllers import (
    AimdController,
    LinkController,
    PiController,
    SessionController,
    Variant,
)
from .header import Ack, DeliveryRecord, QDatagram, decohere

# Per-q-datagram step sizes used by the protocol. Prices only hear about a
# rate change after it has queued through upstream links, and at critical
# load that wait is a few tenths of a second, so the inner loop needs a much
# smaller gain than the centralized iteration.
PROTOCOL_STEPS = StepSizes(k_lambda=2e-7, k_mu=1e-2, k_w=3e-6, t_outer=10)
# Keep a sliver of capacity on every link: at w = 1 a link never produces a
# pair, no ACK comes back, and the stale utility slope pins w at 1 for good.
W_CEIL = 0.999

_CORR, _TERM, _FAIL_NOTICE, _RESTORE_NOTICE, _PURGE = range(5)


class SimulationBlowup(RuntimeError):
    """Non-finite controller state or a stalled link."""


@dataclass
class ProtocolConfig:
    variant: Variant = Variant.QPD
    steps: StepSizes = field(default_factory=lambda: PROTOCOL_STEPS)
    n_mem: int = 50
    t_c: float = math.inf
    alpha: float = 0.9
    G: float = 50.0
    price_update: str = "scaled"
    price_gain: float = 3.0
    price_floor: float = 1e-2
    pi_kp: float = 0.1
    pi_ki: float = 0.01
    pi_target: float | None = None  # queue target; None means n_mem / 2
    qtcp_w: float = 0.967
    qtcp_ai: float = 1.0
    w0: float = W_INIT
    w_floor: float = W_FLOOR
    w_ceil: float = W_CEIL
    ack_werner: str = "nominal"  # or "delivered"
    sample_period: float = 0.1
    ma_window: float = 10.0
    band: float = 0.05
    keep_deliveries: bool = False
    audit: bool = False

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if self.n_mem < 1:
            raise ValueError("n_mem must be at least 1")
        if self.pi_target is None:
            self.pi_target = self.n_mem / 2
        if self.pi_target < 0:
            raise ValueError("PI queue target must be non-negative")
        if not self.t_c > 0:
            raise ValueError("coherence time must be positive (use inf to disable)")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.variant.da and not self.G > 1:
            raise ValueError("G must exceed 1 for the decoherence-aware variants")
        if self.ack_werner not in ("nominal", "delivered"):
            raise ValueError("ack_werner must be 'nominal' or 'delivered'")
        if self.price_update not in ("scaled", "additive"):
            raise ValueError("price_update must be 'scaled' or 'additive'")
        if not self.price_gain > 0:
            raise ValueError("price gain must be positive")
        if not self.w_floor < self.w0 < self.w_ceil <= 1.0:
            raise ValueError("need w_floor < w0 < w_ceil <= 1")
        if not 0 < self.qtcp_w < 1:
            raise ValueError("baseline Werner parameter must lie in (0, 1)")
        if not self.sample_period > 0:
            raise ValueError("sample period must be positive")

    @property
    def slack(self) -> float:
        if not self.variant.da or math.isinf(self.t_c):
            return 0.0
        return self.G / self.t_c


@dataclass
class SimResult:
    times: np.ndarray
    sessions: dict[str, dict[int, np.ndarray]]
    links: dict[str, dict[int, np.ndarray]]
    aggregate: dict[str, np.ndarray]
    events: list[tuple[float, str, str]]
    counters: dict[str, float]
    status: str = "ok"
    message: str = ""
    deliveries: list[DeliveryRecord] = field(default_factory=list)
    audit: dict = field(default_factory=dict)
    ma_window: float = 10.0
    band: float = 0.05

    @property
    def utility_ma(self) -> np.ndarray:
        return metrics.moving_average(self.times, self.aggregate["utility_abs"], self.ma_window)

    def steady(self, since: float | None = None) -> float:
        t, ma = self.times, self.utility_ma
        if since is not None:
            keep = t >= since
            t, ma = t[keep], ma[keep]
        return metrics.steady_state(t, ma)

    def convergence_time(self, since: float | None = None) -> float | None:
        t, v = self.times, self.aggregate["utility_abs"]
        if since is not None:
            keep = t > since
            t, v = t[keep], v[keep]
        return metrics.convergence_time(t, v, self.band, self.ma_window)

    def steady_channel(self, group: str, channel: str, entity: int,
                       t0: float | None = None, t1: float | None = None) -> float:
        table = self.sessions if group == "sessions" else self.links
        t, v = self.times, table[channel][entity]
        keep = np.ones_like(t, dtype=bool)
        if t0 is not None:
            keep &= t >= t0
        if t1 is not None:
            keep &= t <= t1
        return metrics.steady_state(t[keep], v[keep])

    def summary(self) -> dict[str, object]:
        out: dict[str, object] = {"status": self.status}
        if self.message:
            out["message"] = self.message
        ok = self.times.size > 0
        ct = self.convergence_time() if ok else None
        out["steady_utility_abs"] = self.steady() if ok else math.nan
        out["convergence_time_s"] = "none" if ct is None else ct
        out["converged"] = ct is not None
        for key, value in self.counters.items():
            out[key] = value
        if ok:
            for sid, series in self.sessions["rate"].items():
                out[f"steady_rate_s{sid}"] = metrics.steady_state(self.times, series)
            for lid, series in self.links["w"].items():
                out[f"steady_w_l{lid}"] = metrics.steady_state(self.times, series)
        return out

    def write(self, outdir) -> None:
        from pathlib import Path

        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        t = self.times

        def rows(table, prefix):
            for i, ti in enumerate(t):
                for channel, by_entity in table.items():
                    for ent, series in by_entity.items():
                        yield (float(ti), f"{prefix}{ent}:{channel}", float(series[i]))

        metrics.write_long_csv(outdir / "sessions.csv", rows(self.sessions, "s"))
        metrics.write_long_csv(outdir / "links.csv", rows(self.links, "l"))
        agg = dict(self.aggregate)
        if t.size:
            agg["utility_abs_ma"] = self.utility_ma

        def agg_rows():
            for i, ti in enumerate(t):
                for name, series in agg.items():
                    yield (float(ti), name, float(series[i]))

        metrics.write_long_csv(outdir / "aggregate.csv", agg_rows())
        metrics.write_long_csv(outdir / "events.csv", self.events)
        metrics.write_summary_csv(outdir / "summary.csv", self.summary())


class Simulation:
    def __init__(self, topology: Topology, sessions: list[SessionSpec],
                 config: ProtocolConfig | None = None, seed: int = 1,
                 duration: float = 160.0, interventions: list[Intervention] = ()):
        if not duration > 0:
            raise ValueError("duration must be positive")
        if not sessions:
            raise ValueError("at least one session is required")
        ids = [s.id for s in sessions]
        if ids != list(range(len(sessions))):
            raise TopologyError("session ids must be 0..n-1 in order")
        for s in sessions:
            s.validate(topology)
        self.topology = topology
        self.config = cfg = config or ProtocolConfig()
        self.variant = cfg.variant
        self.seed = seed
        self.duration = float(duration)
        self.engine = eng = Engine()
        self.rng = SimRng(seed)
        self._use_delivered = cfg.ack_werner == "delivered"
        self._approx = cfg.variant.approx

        d = topology.link_rates()
        n_on = np.zeros(topology.n_links, dtype=int)
        for s in sessions:
            for lid in s.path:
                n_on[lid] += 1
        used = n_on > 0
        qtcp = cfg.variant is Variant.QTCP
        w0 = cfg.qtcp_w if qtcp else cfg.w0
        # starting rates are feasible at the starting capacities
        r_hi = float(d[used].min()) * (1.0 - w0) / (2 * int(n_on.max()))
        self.links: list[LinkController] = []
        for link in topology.links:
            lam0 = self.rng.uniform_open(0.1)
            lc = LinkController(link.id, float(d[link.id]), link.chi,
                                propagation_delay(link.length_km), w0, lam0, cfg.steps,
                                slack=cfg.slack, w_floor=cfg.w_floor,
                                approx=self._approx, alpha=cfg.alpha, w_ceil=cfg.w_ceil,
                                price_gain=cfg.price_gain if cfg.price_update == "scaled" else None,
                                price_floor=cfg.price_floor)
            lc.frozen = qtcp
            self.links.append(lc)

        self.sessions: list[SessionController] = []
        self.hop_links: list[list[LinkController]] = []
        self.hop_bank: list[list[tuple[int, int]]] = []
        self.ack_delay: list[float] = []
        for spec in sessions:
            R0 = self.rng.uniform_open(r_hi)
            mu0 = self.rng.uniform_open(0.1)
            nodes = path_nodes(topology, spec.src, spec.path)
            sc = SessionController(spec, nodes, R0, mu0, w0 ** len(spec.path), cfg.steps)
            if qtcp:
                sc.aimd = AimdController(R0, cfg.qtcp_ai)
            self.sessions.append(sc)
            hops = [self.links[lid] for lid in spec.path]
            self.hop_links.append(hops)
            self.hop_bank.append([(nodes[i], lid) for i, lid in enumerate(spec.path)])
            self.ack_delay.append(sum(h.prop for h in hops))

        self.events: list[tuple[float, str, str]] = []
        self.deliveries: list[DeliveryRecord] = []
        self.counters = dict(generated=0, delivered=0, drops=0, drops_down=0,
                             unknown_datagrams=0, unknown_acks=0, held_rates=0,
                             stale_acks=0, pi_switches=0)
        self._period_abs = [0.0] * len(sessions)
        self._period_count = [0] * len(sessions)
        self._period_w = [0.0] * len(sessions)
        self._drops_by_link = [0] * topology.n_links
        self.pi_mode = False
        self.detector = metrics.ConvergenceDetector(cfg.ma_window, cfg.band, hold_s=cfg.ma_window)
        self._rec_t: list[float] = []
        self._rec_s = {k: [[] for _ in sessions] for k in
                       ("rate", "delivered_rate", "werner", "werner_delivered", "mu", "utility_abs")}
        self._rec_l = {k: [[] for _ in topology.links] for k in
                       ("w", "lambda", "r_sum", "queue", "capacity", "drops")}
        self._rec_a = {k: [] for k in ("utility_abs", "log_utility", "drops", "delivered")}
        self.audit = _Auditor(self) if cfg.audit else None

        eng.on(EventKind.QDATAGRAM_ARRIVAL, self._on_arrival)
        eng.on(EventKind.LLE_GENERATED, self._on_lle)
        eng.on(EventKind.GENERATION_TIMER, self._on_timer)
        eng.on(EventKind.ACK_ARRIVAL, self._on_ack)
        eng.on(EventKind.LINK_FAILURE, self._on_link_failure)
        eng.on(EventKind.LINK_RESTORE, self._on_link_restore)
        eng.on(EventKind.WORKLOAD_SWITCH, self._on_switch)
        eng.on(EventKind.SESSION_START, self._on_session_start)
        eng.on(EventKind.SESSION_TERMINATE, self._on_session_terminate)
        eng.on(EventKind.SAMPLE_METRICS, self._on_sample)
        eng.on(EventKind.CONTROL_MESSAGE, self._on_control)

        late = set()
        for iv in interventions:
            self._check_intervention(iv)
            if iv.kind is InterventionKind.SESSION_START:
                late.add(int(iv.target))
        for sc in self.sessions:
            if sc.sid not in late:
                eng.schedule(0.0, EventKind.SESSION_START, sc.sid)
        for iv in sorted(interventions, key=lambda x: x.time):
            inject(eng, iv)
        eng.schedule(cfg.sample_period, EventKind.SAMPLE_METRICS, 1)

    # ------------------------------------------------------------------ setup

    def _check_intervention(self, iv: Intervention) -> None:
        if iv.kind in (InterventionKind.LINK_FAILURE, InterventionKind.LINK_RESTORE):
            self.topology.find_link(iv.target)
        else:
            try:
                sid = int(iv.target)
            except ValueError:
                raise TopologyError(f"intervention target {iv.target!r} is not a session id") from None
            if not 0 <= sid < len(self.sessions):
                raise TopologyError(f"unknown session id {sid}")
            if iv.kind is InterventionKind.WORKLOAD_SWITCH:
                ut.UtilityKind.parse(iv.value)

    def log(self, entity: str, what: str) -> None:
        self.events.append((self.engine.now, entity, what))

    # --------------------------------------------------------------- sessions

    def _send(self, s: SessionController) -> None:
        eng = self.engine
        dg = s.make_datagram(eng.now)
        dg.epoch = s.epoch
        self.counters["generated"] += 1
        if self.audit:
            self.audit.created(dg)
        s.timer_version += 1
        s.timer_at = eng.now + 1.0 / s.R
        eng.schedule(s.timer_at, EventKind.GENERATION_TIMER, (s.sid, s.timer_version))
        self._arrive(dg)

    def _on_timer(self, payload) -> None:
        sid, version = payload
        s = self.sessions[sid]
        if version == s.timer_version and s.active and not s.suspended_by:
            self._send(s)

    def _reschedule(self, s: SessionController) -> None:
        now = self.engine.now
        t_new = s.last_send + 1.0 / s.R
        if t_new < now:
            t_new = now
        if abs(t_new - s.timer_at) > 0.05 / s.R:
            s.timer_version += 1
            s.timer_at = t_new
            self.engine.schedule(t_new, EventKind.GENERATION_TIMER, (s.sid, s.timer_version))

    def _on_session_start(self, payload) -> None:
        sid = payload if isinstance(payload, int) else int(payload.target)
        s = self.sessions[sid]
        if s.active:
            return
        s.active = True
        s.reset_announced()
        if not isinstance(payload, int):
            self.log(f"s{sid}", "start")
        if not s.suspended_by:
            self._send(s)

    def _on_session_terminate(self, iv: Intervention) -> None:
        s = self.sessions[int(iv.target)]
        if not s.active:
            return
        s.active = False
        self.log(f"s{s.sid}", "terminate")
        self._withdraw(s)

    def _withdraw(self, s: SessionController) -> None:
        """Stop the timer and remove the session's contributions along its path."""
        epoch = s.epoch
        s.epoch += 1
        s.timer_version += 1
        s.timer_at = math.inf
        s.reset_announced()
        self._on_control((_TERM, s.sid, epoch, 0))

    def _on_switch(self, iv: Intervention) -> None:
        s = self.sessions[int(iv.target)]
        s.kind = ut.UtilityKind.parse(iv.value)
        self.log(f"s{s.sid}", f"utility {s.kind.value}")

    def _on_ack(self, ack: Ack) -> None:
        s = self.sessions[ack.sid]
        if not s.active:
            self.counters["unknown_acks"] += 1
            return
        if s.on_ack(ack, self._use_delivered):
            if s.active and not s.suspended_by:
                self._reschedule(s)
        else:
            self.counters["stale_acks"] += 1

    # ------------------------------------------------------------------ links

    def _arrive(self, dg: QDatagram) -> None:
        L = self.hop_links[dg.sid][dg.hop]
        if not L.up:
            self._drop(dg, L, "link down")
            return
        if dg.epoch <= L.term_epoch.get(dg.sid, -1):
            self._discard(dg, L)
            return
        if self._approx:
            L.observe_arrival(self.engine.now, dg.weight)
        bank = self.hop_bank[dg.sid][dg.hop]
        banks = L.banks
        if banks.get(bank, 0) >= self.config.n_mem:
            victim = None
            for q in L.queue:
                if q.bank == bank:
                    victim = q
                    break
            if victim is None:
                self._drop(dg, L, "memory full")
                return
            L.queue.remove(victim)
            self._drop(victim, L, "overwritten")
        dg.bank = bank
        banks[bank] = banks.get(bank, 0) + 1
        L.queue.append(dg)
        L.admit(dg, self.engine.now)
        dg.processed = dg.hop
        if self.audit:
            self.audit.processed(L, dg)
        if L.pi is not None:
            L.pi.step(len(L.queue) + (L.busy is not None), self.engine.now)
            if L.pi.should_mark():
                dg.mark = True
        if L.busy is None:
            self._start_service(L)
        elif L.stalled and L.w < 1.0:
            self._schedule_lle(L)

    def _start_service(self, L: LinkController) -> None:
        queue = L.queue
        while queue:
            dg = queue.popleft()
            if dg.epoch <= L.term_epoch.get(dg.sid, -1):
                self._discard(dg, L)
                continue
            break
        else:
            return
        L.busy = dg
        if L.w >= 1.0:
            # zero capacity: no attempt succeeds until an update lowers w
            L.stalled = True
            return
        self._schedule_lle(L)

    def _schedule_lle(self, L: LinkController) -> None:
        L.stalled = False
        if not (math.isfinite(L.w) and math.isfinite(L.lam)):
            raise SimulationBlowup(f"non-finite state on link {L.id} at t={self.engine.now:.6g}")
        try:
            tau = sample_lle_time(L.d, L.w, L.chi, self.rng)
        except StalledLinkError as exc:
            raise SimulationBlowup(f"link {L.id} at t={self.engine.now:.6g}: {exc}") from None
        self.engine.schedule(self.engine.now + tau, EventKind.LLE_GENERATED, (L, L.busy))

    def _on_lle(self, payload) -> None:
        L, dg = payload
        if L.busy is not dg:
            return  # purged by a link failure
        L.busy = None
        now = self.engine.now
        L.stamp(dg)
        if dg.hop > 0:
            dg.storage += now - dg.t_last_lle
        dg.t_last_lle = now
        L.banks[dg.bank] -= 1
        dg.bank = None
        if self._approx and L.banked:
            m = L.banked.pop(dg.sid, 0)
            if m:
                dg.weight += m
                if self.audit:
                    self.audit.unbanked(dg.sid, m)
        dg.hop += 1
        self.engine.schedule(now + L.prop, EventKind.QDATAGRAM_ARRIVAL, dg)
        if L.queue and L.up:
            self._start_service(L)

    def _on_arrival(self, dg: QDatagram) -> None:
        if dg.hop == len(self.hop_links[dg.sid]):
            self._deliver(dg)
        else:
            self._arrive(dg)

    def _deliver(self, dg: QDatagram) -> None:
        now = self.engine.now
        s = self.sessions[dg.sid]
        storage = dg.storage + (now - dg.t_created)
        w_del = decohere(dg.w_prod, storage, self.config.t_c)
        self.counters["delivered"] += 1
        if self.audit:
            self.audit.delivered(dg)
        if self.config.keep_deliveries:
            self.deliveries.append(DeliveryRecord(dg.sid, dg.t_created, now, dg.w_prod,
                                                  storage, w_del, dg.weight))
        sid = dg.sid
        if s.kind is not ut.UtilityKind.LOGPROD:
            self._period_abs[sid] += ut.pair_factor_scalar(s.kind, w_del)
        self._period_count[sid] += 1
        self._period_w[sid] += w_del
        ack = Ack(sid, dg.seq, dg.lambda_sum, dg.w_prod, w_del, dg.mark)
        self.engine.schedule(now + self.ack_delay[sid], EventKind.ACK_ARRIVAL, ack)

    def _discard(self, dg: QDatagram, L: LinkController) -> None:
        """q-datagram of a terminated session epoch: counted, no state change."""
        L.unknown += 1
        self.counters["unknown_datagrams"] += 1
        dg.dropped = True
        if dg.bank is not None:
            L.banks[dg.bank] -= 1
            dg.bank = None
        if self.audit:
            self.audit.discarded(dg)

    def _drop(self, dg: QDatagram, L: LinkController, reason: str) -> None:
        dg.dropped = True
        self.counters["drops"] += 1
        if reason == "link down":
            self.counters["drops_down"] += 1
        self._drops_by_link[L.id] += 1
        if dg.bank is not None:
            L.banks[dg.bank] -= 1
            dg.bank = None
        if self._approx:
            L.banked[dg.sid] = L.banked.get(dg.sid, 0) + dg.weight
        if self.audit:
            self.audit.dropped(dg)
        self.log(f"l{L.id}", f"drop s{dg.sid}#{dg.seq} ({reason})")
        self._on_control((_CORR, dg.sid, dg.epoch, dg.delta_R, dg.delta_mu, dg.seq, dg.hop,
                          dg.processed))

    # --------------------------------------------------------- control plane

    def _on_control(self, msg) -> None:
        kind = msg[0]
        if kind == _CORR:
            _, sid, epoch, dR, dmu, seq, j, limit = msg
            hops = self.hop_links[sid]
            if j <= limit:
                L = hops[j]
                if epoch > L.term_epoch.get(sid, -1):
                    L.correct(sid, dR, dmu)
                    if self.audit:
                        self.audit.corrected(L, sid, seq)
            if j == 0:
                s = self.sessions[sid]
                if s.epoch == epoch:
                    s.rollback(dR, dmu)
                    if s.aimd is not None:
                        s.on_loss(seq)
                        if s.active and not s.suspended_by:
                            self._reschedule(s)
                return
            self.engine.schedule(self.engine.now + hops[j - 1].prop, EventKind.CONTROL_MESSAGE,
                                 (_CORR, sid, epoch, dR, dmu, seq, j - 1, limit))
        elif kind == _TERM:
            _, sid, epoch, j = msg
            hops = self.hop_links[sid]
            hops[j].terminate(sid, epoch)
            if j + 1 < len(hops):
                self.engine.schedule(self.engine.now + hops[j].prop, EventKind.CONTROL_MESSAGE,
                                     (_TERM, sid, epoch, j + 1))
        elif kind == _FAIL_NOTICE:
            _, sid, lid = msg
            s, L = self.sessions[sid], self.links[lid]
            if L.up or not s.active or lid in s.suspended_by:
                return
            if not s.suspended_by:
                self.log(f"s{sid}", f"suspend (link {self.topology.links[lid].name} down)")
                self._withdraw(s)
            s.suspended_by.add(lid)
        elif kind == _RESTORE_NOTICE:
            _, sid, lid = msg
            s, L = self.sessions[sid], self.links[lid]
            if not L.up or lid not in s.suspended_by:
                return
            s.suspended_by.discard(lid)
            if not s.suspended_by and s.active:
                self.log(f"s{sid}", "resume")
                s.reset_announced()
                self._send(s)
        elif kind == _PURGE:
            L = self.links[msg[1]]
            if L.up:
                return
            while L.queue:
                self._drop(L.queue.popleft(), L, "link down")
            if L.busy is not None:
                dg, L.busy = L.busy, None
                L.stalled = False
                self._drop(dg, L, "link down")

    def _notify_sessions(self, lid: int, kind: int) -> None:
        for s in self.sessions:
            if lid in s.path and s.active:
                i = s.path.index(lid)
                delay = sum(h.prop for h in self.hop_links[s.sid][:i])
                self.engine.schedule(self.engine.now + delay, EventKind.CONTROL_MESSAGE,
                                     (kind, s.sid, lid))

    def _on_link_failure(self, iv: Intervention) -> None:
        lid = self.topology.find_link(iv.target).id
        L = self.links[lid]
        if not L.up:
            return
        L.up = False
        self.log(f"l{lid}", "failure")
        self.engine.schedule(self.engine.now, EventKind.CONTROL_MESSAGE, (_PURGE, lid))
        self._notify_sessions(lid, _FAIL_NOTICE)
        if self.pi_mode:
            self._exit_pi()

    def _on_link_restore(self, iv: Intervention) -> None:
        lid = self.topology.find_link(iv.target).id
        L = self.links[lid]
        if L.up:
            return
        L.up = True
        self.log(f"l{lid}", "restore")
        self._notify_sessions(lid, _RESTORE_NOTICE)
        if L.busy is None and L.queue:
            self._start_service(L)
        if self.pi_mode:
            self._exit_pi()

    # ---------------------------------------------------------------- PI mode

    def _enter_pi(self) -> None:
        cfg = self.config
        self.pi_mode = True
        self.counters["pi_switches"] += 1
        self.log("network", "freeze w, start PI/AIMD")
        for L in self.links:
            L.frozen = True
            L.pi = PiController(cfg.pi_kp, cfg.pi_ki, cfg.pi_target)
        for s in self.sessions:
            s.aimd = AimdController(max(s.R, 0.1), cfg.qtcp_ai)
            s.aimd.window_end = s.aimd.recovery = s.seq

    def _exit_pi(self) -> None:
        self.pi_mode = False
        self.log("network", "topology change, resume primal-dual")
        for L in self.links:
            L.frozen = False
            L.pi = None
        for s in self.sessions:
            s.aimd = None
        self.detector.reset()

    # ---------------------------------------------------------------- metrics

    def _on_sample(self, k: int) -> None:
        cfg = self.config
        now = self.engine.now
        period = cfg.sample_period
        self._rec_t.append(now)
        rs, rl, ra = self._rec_s, self._rec_l, self._rec_a
        total = 0.0
        log_u = 0.0
        for s in self.sessions:
            i = s.sid
            n = self._period_count[i]
            rs["rate"][i].append(s.R if s.active else 0.0)
            rs["delivered_rate"][i].append(n / period)
            rs["werner"][i].append(s.W)
            rs["werner_delivered"][i].append(self._period_w[i] / n if n else math.nan)
            rs["mu"][i].append(s.mu)
            value = self._period_abs[i] / period
            rs["utility_abs"][i].append(value)
            total += value
            if s.active and not s.suspended_by:
                log_u += s.log_utility()
            self._period_abs[i] = 0.0
            self._period_count[i] = 0
            self._period_w[i] = 0.0
        for L in self.links:
            j = L.id
            rl["w"][j].append(L.w)
            rl["lambda"][j].append(L.lam)
            rl["r_sum"][j].append(L.R_sum)
            rl["queue"][j].append(float(len(L.queue) + (L.busy is not None)))
            rl["capacity"][j].append(L.capacity)
            rl["drops"][j].append(float(self._drops_by_link[j]))
            if not (math.isfinite(L.w) and math.isfinite(L.lam) and math.isfinite(L.R_sum)):
                raise SimulationBlowup(f"non-finite state on link {j} at t={now:.6g}")
        ra["utility_abs"].append(total)
        ra["log_utility"].append(log_u)
        ra["drops"].append(float(self.counters["drops"]))
        ra["delivered"].append(float(self.counters["delivered"]))
        if self.audit:
            self.audit.check_weights()
        if self.variant is Variant.QPD_PI and not self.pi_mode:
            if self.detector.update(now, total):
                self._enter_pi()
        nxt = (k + 1) * period
        if nxt <= self.duration + 1e-9:
            self.engine.schedule(nxt, EventKind.SAMPLE_METRICS, k + 1)

    # -------------------------------------------------------------------- run

    def run(self) -> SimResult:
        status, message = "ok", ""
        try:
            self.engine.run_until(self.duration)
        except SimulationBlowup as exc:
            status, message = "blowup", str(exc)
            self.log("network", f"blowup: {exc}")
        n = len(self._rec_t)

        def arr(lst):
            return np.asarray(lst[:n], dtype=float)

        counters = dict(self.counters)
        counters["held_rates"] = sum(s.held for s in self.sessions)
        counters["stale_acks"] += sum(s.stale_acks for s in self.sessions)
        counters["events"] = self.engine.dispatched
        return SimResult(
            times=np.asarray(self._rec_t, dtype=float),
            sessions={k: {i: arr(v) for i, v in enumerate(ch)} for k, ch in self._rec_s.items()},
            links={k: {i: arr(v) for i, v in enumerate(ch)} for k, ch in self._rec_l.items()},
            aggregate={k: arr(v) for k, v in self._rec_a.items()},
            events=list(self.events),
            counters=counters,
            status=status,
            message=message,
            deliveries=self.deliveries,
            audit=self.audit.report() if self.audit else {},
            ma_window=self.config.ma_window,
            band=self.config.band,
        )


class _Auditor:
    """Omniscient bookkeeping used by the conservation checks.

    Tracks every live q-datagram so weight conservation can be verified at
    each sample, and records for each (link, session) the deltas of every
    processed q-datagram that has not been corrected, so that the link's
    contribution can be compared against an independent trace.
    """

    def __init__(self, sim: Simulation):
        self.sim = sim
        n = len(sim.sessions)
        self.live: dict[tuple[int, int], QDatagram] = {}
        self.generated = [0] * n
        self.delivered_weight = [0] * n
        self.discarded_weight = [0] * n
        self.trace: dict[tuple[int, int], dict[int, tuple[float, float]]] = {}
        self.weight_violations = 0
        self.weight_checks = 0
        self.trace_violations = 0
        self.trace_checks = 0

    def created(self, dg):
        self.generated[dg.sid] += 1
        self.live[(dg.sid, dg.seq)] = dg

    def processed(self, L, dg):
        self.trace.setdefault((L.id, dg.sid), {})[dg.seq] = (dg.delta_R, dg.delta_mu)

    def unbanked(self, sid, m):
        pass

    def delivered(self, dg):
        self.live.pop((dg.sid, dg.seq), None)
        self.delivered_weight[dg.sid] += dg.weight

    def discarded(self, dg):
        self.live.pop((dg.sid, dg.seq), None)
        self.discarded_weight[dg.sid] += dg.weight

    def dropped(self, dg):
        self.live.pop((dg.sid, dg.seq), None)

    def corrected(self, L, sid, seq):
        entries = self.trace.get((L.id, sid), {})
        entries.pop(seq, None)
        self.trace_checks += 1
        oracle_R = math.fsum(v[0] for v in entries.values())
        oracle_M = math.fsum(v[1] for v in entries.values())
        got_R = L.contrib_R.get(sid, 0.0) if not L.approx else oracle_R
        got_M = L.contrib_M.get(sid, 0.0)
        scale = 1.0 + math.fsum(abs(v[0]) + abs(v[1]) for v in entries.values())
        if abs(got_R - oracle_R) > 1e-9 * scale or abs(got_M - oracle_M) > 1e-9 * scale:
            self.trace_violations += 1

    def check_weights(self):
        sim = self.sim
        if not sim._approx:
            return
        inflight = [0] * len(sim.sessions)
        for dg in self.live.values():
            inflight[dg.sid] += dg.weight
        banked = [0] * len(sim.sessions)
        for L in sim.links:
            for sid, m in L.banked.items():
                banked[sid] += m
        for i in range(len(sim.sessions)):
            self.weight_checks += 1
            total = self.delivered_weight[i] + banked[i] + inflight[i] + self.discarded_weight[i]
            if total != self.generated[i]:
                self.weight_violations += 1

    def report(self) -> dict:
        return dict(weight_checks=self.weight_checks, weight_violations=self.weight_violations,
                    trace_checks=self.trace_checks, trace_violations=self.trace_violations)
