import math

import numpy as np
import pytest

from qnum.simkernel import (
    Engine,
    EventKind,
    Intervention,
    InterventionKind,
    SchedulingError,
    SimRng,
    StalledLinkError,
    inject,
    propagation_delay,
    sample_lle_time,
)
from qnum.topology import NSFNET_LINKS_KM, build_nsfnet


class TestEngine:
    def test_equal_time_insertion_order(self):
        eng, seen = Engine(), []
        eng.on(EventKind.SAMPLE_METRICS, seen.append)
        for i in range(5):
            eng.schedule(1.0, EventKind.SAMPLE_METRICS, i)
        eng.run_until(2.0)
        assert seen == [0, 1, 2, 3, 4]

    def test_idle_clock(self):
        eng = Engine()
        eng.run_until(7.5)
        assert eng.now == 7.5 and eng.dispatched == 0

    def test_past_rejected(self):
        eng = Engine()
        eng.run_until(3.0)
        with pytest.raises(SchedulingError):
            eng.schedule(2.0, EventKind.SAMPLE_METRICS)
        with pytest.raises(SchedulingError):
            eng.schedule(math.inf, EventKind.SAMPLE_METRICS)

    def test_stress_against_sort(self):
        n = 1_000_000
        rng = np.random.default_rng(11)
        # coarse times force many exact ties
        times = np.round(rng.uniform(0, 1000, n), 1).tolist()
        eng, seen = Engine(), []
        eng.on(EventKind.QDATAGRAM_ARRIVAL, seen.append)
        for i, t in enumerate(times):
            eng.schedule(t, EventKind.QDATAGRAM_ARRIVAL, i)
        eng.run_until(1000.0)
        oracle = sorted(range(n), key=lambda i: (times[i], i))
        assert seen == oracle
        clock = [times[i] for i in seen]
        assert all(a <= b for a, b in zip(clock, clock[1:]))

    def test_handlers_can_schedule(self):
        eng, seen = Engine(), []

        def tick(k):
            seen.append((eng.now, k))
            if k < 3:
                eng.schedule_in(0.5, EventKind.SAMPLE_METRICS, k + 1)

        eng.on(EventKind.SAMPLE_METRICS, tick)
        eng.schedule(0.0, EventKind.SAMPLE_METRICS, 0)
        eng.run_until(10)
        assert seen == [(0.0, 0), (0.5, 1), (1.0, 2), (1.5, 3)]


class TestRng:
    def test_replay(self):
        a, b = SimRng(5), SimRng(5)
        assert [a.random() for _ in range(10_000)] == [b.random() for _ in range(10_000)]
        assert SimRng(5).random() != SimRng(6).random()

    def test_uniform_open(self):
        r = SimRng(1)
        xs = [r.uniform_open(0.1) for _ in range(10_000)]
        assert all(0 < x <= 0.1 for x in xs)

    def test_integers(self):
        r = SimRng(2)
        xs = {r.integers(3, 7) for _ in range(1000)}
        assert xs == {3, 4, 5, 6}


class TestLle:
    @pytest.mark.parametrize("w", [0.5, 0.9, 0.967])
    def test_mean_rate(self, w):
        d, chi = 6087.0, 1e5
        rng = SimRng(3)
        n = 1_000_000
        total = math.fsum(sample_lle_time(d, w, chi, rng) for _ in range(n))
        assert total / n == pytest.approx(1.0 / (d * (1 - w)), rel=0.01)

    def test_certain_success(self):
        rng = SimRng(1)
        assert sample_lle_time(1e6, 0.0, 1e5, rng) == pytest.approx(1e-5)

    def test_stalled(self):
        with pytest.raises(StalledLinkError):
            sample_lle_time(100.0, 1.0, 1e5, SimRng(1))

    def test_attempt_granularity(self):
        rng = SimRng(4)
        for _ in range(100):
            k = sample_lle_time(6087.0, 0.9, 1e5, rng) * 1e5
            assert abs(k - round(k)) < 1e-6 and round(k) >= 1


class TestDelay:
    def test_values(self):
        assert propagation_delay(0) == 0
        assert propagation_delay(80) == pytest.approx(4e-4)
        with pytest.raises(ValueError):
            propagation_delay(-1)

    def test_nsfnet_longest(self):
        longest = max(km for _, _, km in NSFNET_LINKS_KM) / 25
        t = build_nsfnet(25)
        assert max(propagation_delay(l.length_km) for l in t.links) == pytest.approx(longest / 2e5)


class TestInterventions:
    def test_parse(self):
        assert InterventionKind.parse("fail") is InterventionKind.LINK_FAILURE
        assert InterventionKind.parse("workload-switch") is InterventionKind.WORKLOAD_SWITCH
        with pytest.raises(ValueError):
            InterventionKind.parse("explode")

    def test_validation(self):
        with pytest.raises(ValueError):
            Intervention(-1.0, InterventionKind.LINK_FAILURE, "1-3")
        with pytest.raises(ValueError):
            Intervention(1.0, InterventionKind.WORKLOAD_SWITCH, "0")

    def test_inject_fires_at_time(self):
        eng, seen = Engine(), []
        eng.on(EventKind.LINK_FAILURE, lambda iv: seen.append((eng.now, iv.target)))
        inject(eng, Intervention(100.0, InterventionKind.LINK_FAILURE, "1-3"))
        eng.run_until(200)
        assert seen == [(100.0, "1-3")]
