"""Deterministic discrete-event engine.

Events are ``(time, seq, kind, payload)`` tuples on a binary heap. ``seq`` is
a global insertion counter, so events with equal timestamps pop in the order
they were scheduled and a replay with the same seed is bit-identical.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Callable

import numpy as np

FIBER_KM_PER_S = 2.0e5


class EventKind(IntEnum):
    QDATAGRAM_ARRIVAL = 0
    LLE_GENERATED = 1
    GENERATION_TIMER = 2
    ACK_ARRIVAL = 3
    LINK_FAILURE = 4
    LINK_RESTORE = 5
    WORKLOAD_SWITCH = 6
    SESSION_START = 7
    SESSION_TERMINATE = 8
    SAMPLE_METRICS = 9
    CONTROL_MESSAGE = 10  # corrections, termination and failure notices


class SchedulingError(ValueError):
    pass


class StalledLinkError(ValueError):
    """A link with ``w = 1`` has zero capacity and never produces an LLE."""


class Engine:
    """Virtual clock plus event heap.

    Handlers are registered per kind and called as ``handler(payload)``; they
    read ``engine.now`` for the current time and may schedule more events.
    """

    def __init__(self):
        self.now = 0.0
        self._heap: list[tuple[float, int, int, Any]] = []
        self._seq = 0
        self._handlers: dict[int, Callable[[Any], None]] = {}
        self.dispatched = 0

    def on(self, kind: EventKind, handler: Callable[[Any], None]) -> None:
        self._handlers[int(kind)] = handler

    def schedule(self, time: float, kind: EventKind, payload: Any = None) -> int:
        if time < self.now:
            raise SchedulingError(f"cannot schedule at t={time!r} before now={self.now!r}")
        if not math.isfinite(time):
            raise SchedulingError("event time must be finite")
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._heap, (time, seq, int(kind), payload))
        return seq

    def schedule_in(self, delay: float, kind: EventKind, payload: Any = None) -> int:
        return self.schedule(self.now + delay, kind, payload)

    def __len__(self) -> int:
        return len(self._heap)

    def peek_time(self) -> float:
        return self._heap[0][0] if self._heap else math.inf

    def run_until(self, t_end: float) -> None:
        """Dispatch every event with timestamp <= ``t_end``; leave the clock at ``t_end``."""
        heap = self._heap
        handlers = self._handlers
        pop = heapq.heappop
        while heap and heap[0][0] <= t_end:
            time, _, kind, payload = pop(heap)
            self.now = time
            self.dispatched += 1
            handler = handlers.get(kind)
            if handler is not None:
                handler(payload)
        if t_end > self.now:
            self.now = t_end


class SimRng:
    """Seeded generator for one simulation instance.

    Backed by numpy's PCG64 bit generator. Uniforms are drawn in blocks and
    handed out one at a time, and geometric variates come from inversion of
    those uniforms, so the stream depends only on the seed and on the order
    of calls.
    """

    algorithm = "PCG64 (numpy), block size 4096, geometric by inversion"
    _BLOCK = 4096

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self._buf: list[float] = []
        self._pos = 0

    def random(self) -> float:
        """Uniform on [0, 1)."""
        if self._pos >= len(self._buf):
            self._buf = self._gen.random(self._BLOCK).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u

    def uniform_open(self, hi: float) -> float:
        """Uniform on (0, hi]."""
        return hi * (1.0 - self.random())

    def geometric(self, p: float) -> int:
        """Number of Bernoulli(p) trials up to and including the first success."""
        if not 0.0 < p <= 1.0:
            raise ValueError("success probability must lie in (0, 1]")
        if p == 1.0:
            return 1
        u = self.random()
        return max(1, math.ceil(math.log1p(-u) / math.log1p(-p)))

    def integers(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi)."""
        return lo + min(int(self.random() * (hi - lo)), hi - lo - 1)


def sample_lle_time(d: float, w: float, chi: float, rng: SimRng) -> float:
    """Seconds until the next link-level entangled pair.

    Each attempt succeeds with ``p = d (1 - w) / chi`` (capped at 1), so the
    mean time is ``1 / (d (1 - w))`` whenever ``p < 1``.
    """
    if w >= 1.0:
        raise StalledLinkError("w = 1 leaves the link with zero capacity")
    if chi <= 0:
        raise ValueError("chi must be positive")
    p = min(d * (1.0 - w) / chi, 1.0)
    return rng.geometric(p) / chi


def propagation_delay(length_km: float) -> float:
    if length_km < 0:
        raise ValueError("length must be non-negative")
    return length_km / FIBER_KM_PER_S


class InterventionKind(IntEnum):
    LINK_FAILURE = EventKind.LINK_FAILURE
    LINK_RESTORE = EventKind.LINK_RESTORE
    WORKLOAD_SWITCH = EventKind.WORKLOAD_SWITCH
    SESSION_START = EventKind.SESSION_START
    SESSION_TERMINATE = EventKind.SESSION_TERMINATE

    @classmethod
    def parse(cls, name: str) -> InterventionKind:
        key = str(name).strip().lower().replace("-", "_")
        aliases = {
            "fail": cls.LINK_FAILURE,
            "link_failure": cls.LINK_FAILURE,
            "restore": cls.LINK_RESTORE,
            "link_restore": cls.LINK_RESTORE,
            "switch": cls.WORKLOAD_SWITCH,
            "workload_switch": cls.WORKLOAD_SWITCH,
            "start": cls.SESSION_START,
            "session_start": cls.SESSION_START,
            "terminate": cls.SESSION_TERMINATE,
            "session_terminate": cls.SESSION_TERMINATE,
        }
        if key not in aliases:
            raise ValueError(f"unknown intervention {name!r}")
        return aliases[key]


@dataclass(frozen=True)
class Intervention:
    """A scheduled change to the network.

    ``target`` is a link name (``"1-3"``) for failures and restores and a
    session id for the others. ``value`` carries the new utility kind for a
    workload switch.
    """

    time: float
    kind: InterventionKind
    target: str
    value: str | None = None

    def __post_init__(self):
        if not self.time >= 0:
            raise ValueError("intervention time must be non-negative")
        if self.kind is InterventionKind.WORKLOAD_SWITCH and not self.value:
            raise ValueError("workload switch needs a utility kind")


def inject(engine: Engine, intervention: Intervention) -> int:
    """Schedule an intervention as an ordinary event."""
    return engine.schedule(intervention.time, EventKind(int(intervention.kind)), intervention)
