"""Time series, convergence detection, aggregate utilities and CSV export."""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import utility as ut

CSV_COLUMNS = ("time_s", "entity_id", "value")


@dataclass
class MetricSeries:
    name: str
    times: np.ndarray
    values: np.ndarray
    entity: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise ValueError("times and values must be 1-d and the same length")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError(f"{self.name}: sample times must be strictly increasing")

    def __len__(self):
        return self.times.size


def _unpack(series, values):
    if isinstance(series, MetricSeries):
        return series.times, series.values
    return np.asarray(series, float), np.asarray(values, float)


def moving_average(series, values=None, window_s: float = 10.0) -> np.ndarray:
    """Trailing mean over the samples in ``(t - window, t]`` at every sample time."""
    if not window_s > 0:
        raise ValueError("window must be positive")
    t, v = _unpack(series, values)
    if t.size == 0:
        return v.copy()
    csum = np.concatenate(([0.0], np.cumsum(v)))
    lo = np.searchsorted(t, t - window_s, side="right")
    hi = np.arange(1, t.size + 1)
    return (csum[hi] - csum[lo]) / (hi - lo)


def steady_state(series, values=None, fraction: float = 0.1) -> float:
    """Mean over the final ``fraction`` of the run (by time)."""
    t, v = _unpack(series, values)
    if t.size == 0:
        return math.nan
    cut = t[-1] - fraction * (t[-1] - t[0])
    return float(np.mean(v[t >= cut]))


def convergence_time(series, values=None, band: float = 0.05, window_s: float = 10.0,
                     steady: float | None = None) -> float | None:
    """Earliest time after which the moving average stays within ``band`` of steady state.

    The steady-state value defaults to the mean of the final 10% of the moving
    average. Returns 0.0 when the whole moving average is in band and ``None``
    when the last sample is outside it.
    """
    t, v = _unpack(series, values)
    if t.size == 0:
        return None
    ma = moving_average(t, v, window_s)
    ref = steady_state(t, ma) if steady is None else steady
    inside = np.abs(ma - ref) <= band * abs(ref)
    if not inside[-1]:
        return None
    outside = np.flatnonzero(~inside)
    if outside.size == 0:
        return 0.0
    return float(t[outside[-1] + 1])


def aggregate_absolute(kind, records, window_s: float, t_end: float | None = None) -> float:
    """Absolute SKR or NEG per second over deliveries in ``(t_end - window, t_end]``.

    ``kind`` is one utility kind for every session or a mapping from session
    id to kind. Each delivered pair contributes ``max(0, g(W))`` at its
    delivered Werner value.
    """
    if not window_s > 0:
        raise ValueError("window must be positive")
    records = list(records)
    if not records:
        return 0.0
    if t_end is None:
        t_end = max(r.t_delivered for r in records)
    total = 0.0
    for r in records:
        if t_end - window_s < r.t_delivered <= t_end:
            k = kind[r.sid] if isinstance(kind, Mapping) else kind
            total += ut.pair_factor_scalar(ut.UtilityKind.parse(k), r.w_delivered)
    return total / window_s


def mean_ci(values: Iterable[float]) -> tuple[float, float]:
    """Mean and 1.96 standard errors."""
    x = np.asarray(list(values), dtype=float)
    if x.size == 0:
        return math.nan, math.nan
    if x.size == 1:
        return float(x[0]), 0.0
    return float(x.mean()), float(1.96 * x.std(ddof=1) / math.sqrt(x.size))


@dataclass
class ConvergenceDetector:
    """Online version of the convergence rule, used to trigger mode switches.

    Fires once the trailing moving average has stayed within ``band`` of its
    latest value for ``hold_s`` seconds.
    """

    window_s: float = 10.0
    band: float = 0.05
    hold_s: float = 10.0
    fired_at: float | None = None
    _samples: deque = field(default_factory=deque, repr=False)
    _sum: float = 0.0
    _ma: deque = field(default_factory=deque, repr=False)
    _t0: float | None = None

    def reset(self) -> None:
        self.fired_at = None
        self._samples.clear()
        self._ma.clear()
        self._sum = 0.0
        self._t0 = None

    def update(self, t: float, value: float) -> bool:
        if self.fired_at is not None:
            return False
        if self._t0 is None:
            self._t0 = t
        self._samples.append((t, value))
        self._sum += value
        while self._samples[0][0] <= t - self.window_s:
            self._sum -= self._samples.popleft()[1]
        ma = self._sum / len(self._samples)
        self._ma.append((t, ma))
        while self._ma[0][0] < t - self.hold_s:
            self._ma.popleft()
        if t - self._t0 < self.window_s + self.hold_s:
            return False
        tol = self.band * abs(ma)
        if all(abs(m - ma) <= tol for _, m in self._ma):
            self.fired_at = t
            return True
        return False


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_long_csv(path: str | Path, rows: Iterable[tuple]) -> None:
    """Write ``(time_s, entity_id, value)`` rows with the fixed header."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def write_summary_csv(path: str | Path, summary: Mapping[str, object]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("metric", "value"))
        for key, value in summary.items():
            w.writerow((key, _fmt(value)))


def read_summary_csv(path: str | Path) -> dict[str, str]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        return {k: v for k, v in reader}
