"""Scenario files: INI sections with ``key = value`` lines.

A minimal scenario::

    [scenario]
    name = dumbbell
    duration = 160
    seeds = 1-8

    [topology]
    builtin = dumbbell
    link_length_km = 80

    [sessions]
    mode = dumbbell
    utility = skr
    f_min = 0.85

    [protocol]
    variant = qpd

Every other key has a default. Interventions are one per line,
``label = time kind target [value]``, for example ``fail = 100 fail 1-3``.
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import utility as ut
from .core import W_FLOOR, W_INIT, ProblemInstance, StepSizes
from .protocol.controllers import Variant
from .protocol.network import PROTOCOL_STEPS, W_CEIL, ProtocolConfig
from .simkernel import Intervention, InterventionKind
from .topology import (
    DEFAULT_CHI,
    Link,
    SessionSpec,
    Topology,
    TopologyError,
    build_dumbbell,
    build_nsfnet,
    dumbbell_sessions,
    make_session,
    random_sessions,
)


class ScenarioError(ValueError):
    """A scenario file that does not parse or does not validate."""

    def __init__(self, message: str, section: str | None = None, key: str | None = None,
                 line: int | None = None, path: str | None = None):
        where = []
        if path:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if section:
            where.append(f"[{section}]" + (f" {key}" if key else ""))
        prefix = ": ".join([", ".join(where)]) + ": " if where else ""
        super().__init__(prefix + message)
        self.section = section
        self.key = key
        self.line = line


KNOWN = {
    "scenario": {"name", "duration", "seeds"},
    "topology": {"builtin", "link_length_km", "downscale", "chi", "links"},
    "sessions": {"mode", "utility", "f_min", "count", "pairs", "weight"},
    "protocol": {"variant", "n_mem", "t_c", "w0", "w_ceil", "w_floor", "ack_werner",
                 "price_update", "price_gain", "price_floor"},
    "steps": {"k_lambda", "k_mu", "k_w", "t_outer"},
    "options": {"alpha", "g", "pi_kp", "pi_ki", "pi_target", "qtcp_w", "qtcp_ai"},
    "metrics": {"sample_period", "ma_window", "band"},
    "interventions": None,  # free labels
    "stability": {"d", "starts", "dt", "t_end", "perturbation", "seed", "tolerance",
                  "k_lambda", "k_mu", "k_w"},
}

SWEEP_AXES = ("link_length_km", "n_sessions", "t_outer", "t_c", "variant")


@dataclass(frozen=True)
class StabilityOptions:
    d: float | None = None  # uniform rate parameter replacing the physical one
    starts: int = 20
    dt: float = 1e-3
    t_end: float = 80.0
    perturbation: float = 0.01
    seed: int = 1
    tolerance: float = 1e-4
    steps: StepSizes = field(default_factory=lambda: StepSizes(k_lambda=1e-2, k_mu=1e-2, k_w=1e-3))


@dataclass
class Scenario:
    name: str = "scenario"
    duration: float = 160.0
    seeds: list[int] = field(default_factory=lambda: list(range(1, 9)))
    topology: str = "dumbbell"
    link_length_km: float = 80.0
    downscale: float = 25.0
    chi: float = DEFAULT_CHI
    custom_links: list[tuple[int, int, float]] = field(default_factory=list)
    session_mode: str = "dumbbell"
    utility: str = "skr"
    f_min: float = 0.85
    weight: float = 1.0
    n_sessions: int = 6
    pairs: list[tuple[int, int]] = field(default_factory=list)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    interventions: list[Intervention] = field(default_factory=list)
    stability: StabilityOptions = field(default_factory=StabilityOptions)
    source: str | None = None
    # (label, line) for each intervention, so validation errors can point at it
    intervention_keys: list[tuple[str, int | None]] = field(default_factory=list)

    # ------------------------------------------------------------- builders

    def build_topology(self) -> Topology:
        if self.topology == "dumbbell":
            return build_dumbbell(self.link_length_km, self.chi)
        if self.topology == "nsfnet":
            return build_nsfnet(self.downscale, self.chi)
        nodes = sorted({n for a, b, _ in self.custom_links for n in (a, b)})
        links = [Link(i, a, b, length, self.chi) for i, (a, b, length) in enumerate(self.custom_links)]
        return Topology(nodes, links)

    def build_sessions(self, topology: Topology, seed: int) -> list[SessionSpec]:
        kw = dict(utility=self.utility, f_min=self.f_min)
        if self.session_mode == "dumbbell":
            out = dumbbell_sessions(topology, self.utility, self.f_min)
            if self.weight != 1.0:
                out = [replace(s, weight=self.weight) for s in out]
            return out
        if self.session_mode == "random":
            return random_sessions(topology, self.n_sessions, seed, **kw)
        return [make_session(topology, i, a, b, weight=self.weight, **kw)
                for i, (a, b) in enumerate(self.pairs)]

    def instance(self, seed: int | None = None) -> ProblemInstance:
        topo = self.build_topology()
        sessions = self.build_sessions(topo, self.seeds[0] if seed is None else seed)
        return ProblemInstance(topo, sessions, slack=self.protocol.slack)

    def validate(self) -> None:
        """Build every object a run needs so cross-reference errors surface early."""
        topo = self.build_topology()
        sessions = self.build_sessions(topo, self.seeds[0])
        for i, iv in enumerate(self.interventions):
            label, line = (self.intervention_keys[i] if i < len(self.intervention_keys)
                           else (None, None))

            def bad(msg):
                return ScenarioError(msg, "interventions", label, line, self.source)

            if iv.kind in (InterventionKind.LINK_FAILURE, InterventionKind.LINK_RESTORE):
                try:
                    topo.find_link(iv.target)
                except TopologyError as exc:
                    raise bad(str(exc)) from None
            else:
                sid = int(iv.target)
                if not 0 <= sid < len(sessions):
                    raise bad(f"unknown session id {sid}")
            if iv.time > self.duration:
                raise bad(f"intervention at t={iv.time} is after the end of the run")

    def with_axis(self, axis: str, value) -> Scenario:
        """Copy with one sweep axis set to ``value``."""
        try:
            sc = self._with_axis(axis, value)
        except ScenarioError:
            raise
        except ValueError as exc:
            raise ScenarioError(f"bad sweep value {value!r} for {axis}: {exc}") from None
        sc.validate()
        return sc

    def _with_axis(self, axis: str, value) -> Scenario:
        if axis == "link_length_km":
            return replace(self, link_length_km=float(value))
        if axis == "n_sessions":
            return replace(self, n_sessions=int(value))
        if axis == "t_outer":
            steps = replace(self.protocol.steps, t_outer=int(value))
            return replace(self, protocol=replace(self.protocol, steps=steps))
        if axis == "t_c":
            return replace(self, protocol=replace(self.protocol, t_c=_float(str(value))))
        if axis == "variant":
            return replace(self, protocol=replace(self.protocol, variant=Variant.parse(value)))
        raise ScenarioError(f"unknown sweep axis {axis!r} (expected one of {', '.join(SWEEP_AXES)})")


# ------------------------------------------------------------------ parsing

def _float(text: str) -> float:
    t = text.strip().lower()
    if t in ("inf", "infinity", "none", "off"):
        return math.inf
    return float(t)


def _positive(conv):
    def f(text):
        v = conv(text)
        if not v > 0:
            raise ValueError("must be positive")
        return v
    return f


def _choice(*options):
    def f(text):
        v = text.strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return f


def parse_seeds(text: str) -> list[int]:
    """``"1-8"``, ``"1, 3, 5"`` or a mix of both."""
    out: list[int] = []
    for part in re.split(r"[,\s]+", text.strip()):
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            a, b = int(lo), int(hi)
            if b < a:
                raise ValueError(f"empty seed range {part!r}")
            out.extend(range(a, b + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError("no seeds given")
    return out


def _line_index(text: str) -> dict[tuple[str, str], int]:
    """Line number of every ``key = value`` line, keyed by (section, key)."""
    index = {}
    section = None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            index[(section, "")] = i
            continue
        if section and ("=" in line or ":" in line):
            key = re.split(r"[=:]", line, 1)[0].strip().lower()
            index[(section, key)] = i
    return index


def loads(text: str, source: str | None = None) -> Scenario:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source or "<scenario>")
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ScenarioError(exc.message.splitlines()[0] if hasattr(exc, "message") else str(exc),
                            line=line, path=source) from None
    lines = _line_index(text)

    def fail(msg, section, key=None):
        raise ScenarioError(msg, section, key, lines.get((section, key or "")), source)

    for section in parser.sections():
        sec = section.lower()
        if sec not in KNOWN:
            fail(f"unknown section (expected one of {', '.join(KNOWN)})", sec)
        allowed = KNOWN[sec]
        if allowed is not None:
            for key in parser[section]:
                if key not in allowed:
                    fail(f"unknown key (expected one of {', '.join(sorted(allowed))})", sec, key)

    def get(section, key, conv, default):
        for name in parser.sections():
            if name.lower() == section and key in parser[name]:
                raw = parser[name][key]
                try:
                    return conv(raw)
                except (ValueError, TypeError) as exc:
                    fail(f"bad value {raw!r}: {exc}", section, key)
        return default

    sc = Scenario(source=source)
    sc.name = get("scenario", "name", str.strip, sc.name)
    sc.duration = get("scenario", "duration", _positive(float), sc.duration)
    sc.seeds = get("scenario", "seeds", parse_seeds, sc.seeds)

    sc.topology = get("topology", "builtin", lambda s: s.strip().lower(), sc.topology)
    if sc.topology not in ("dumbbell", "nsfnet", "custom"):
        fail("builtin must be dumbbell, nsfnet or custom", "topology", "builtin")
    sc.link_length_km = get("topology", "link_length_km", float, sc.link_length_km)
    sc.downscale = get("topology", "downscale", float, sc.downscale)
    sc.chi = get("topology", "chi", float, sc.chi)
    sc.custom_links = get("topology", "links", _parse_links, sc.custom_links)
    if sc.topology == "custom" and not sc.custom_links:
        fail("a custom topology needs a links list", "topology", "links")

    sc.session_mode = get("sessions", "mode", lambda s: s.strip().lower(), sc.session_mode)
    if sc.session_mode not in ("dumbbell", "random", "pairs"):
        fail("mode must be dumbbell, random or pairs", "sessions", "mode")
    if sc.session_mode == "dumbbell" and sc.topology != "dumbbell":
        fail("dumbbell sessions need the dumbbell topology", "sessions", "mode")
    sc.utility = get("sessions", "utility", lambda s: ut.UtilityKind.parse(s).value, sc.utility)
    sc.f_min = get("sessions", "f_min", float, sc.f_min)
    sc.weight = get("sessions", "weight", float, sc.weight)
    sc.n_sessions = get("sessions", "count", int, sc.n_sessions)
    sc.pairs = get("sessions", "pairs", _parse_pairs, sc.pairs)
    if sc.session_mode == "pairs" and not sc.pairs:
        fail("mode = pairs needs a pairs list", "sessions", "pairs")

    base = ProtocolConfig()
    steps = StepSizes(
        k_lambda=get("steps", "k_lambda", _positive(float), PROTOCOL_STEPS.k_lambda),
        k_mu=get("steps", "k_mu", _positive(float), PROTOCOL_STEPS.k_mu),
        k_w=get("steps", "k_w", _positive(float), PROTOCOL_STEPS.k_w),
        t_outer=get("steps", "t_outer", _positive(int), PROTOCOL_STEPS.t_outer),
    ) if parser.has_section("steps") else PROTOCOL_STEPS
    try:
        sc.protocol = ProtocolConfig(
            variant=get("protocol", "variant", Variant.parse, base.variant),
            steps=steps,
            n_mem=get("protocol", "n_mem", _positive(int), base.n_mem),
            t_c=get("protocol", "t_c", _positive(_float), base.t_c),
            w0=get("protocol", "w0", float, W_INIT),
            w_ceil=get("protocol", "w_ceil", float, W_CEIL),
            w_floor=get("protocol", "w_floor", float, W_FLOOR),
            ack_werner=get("protocol", "ack_werner", _choice("nominal", "delivered"), base.ack_werner),
            price_update=get("protocol", "price_update", _choice("scaled", "additive"), base.price_update),
            price_gain=get("protocol", "price_gain", _positive(float), base.price_gain),
            price_floor=get("protocol", "price_floor", float, base.price_floor),
            alpha=get("options", "alpha", float, base.alpha),
            G=get("options", "g", _positive(float), base.G),
            pi_kp=get("options", "pi_kp", float, base.pi_kp),
            pi_ki=get("options", "pi_ki", float, base.pi_ki),
            pi_target=get("options", "pi_target", float, None),
            qtcp_w=get("options", "qtcp_w", float, base.qtcp_w),
            qtcp_ai=get("options", "qtcp_ai", float, base.qtcp_ai),
            sample_period=get("metrics", "sample_period", _positive(float), base.sample_period),
            ma_window=get("metrics", "ma_window", _positive(float), base.ma_window),
            band=get("metrics", "band", _positive(float), base.band),
        )
    except ScenarioError:
        raise
    except ValueError as exc:
        fail(str(exc), "protocol")

    for name in parser.sections():
        if name.lower() != "interventions":
            continue
        for label, raw in parser[name].items():
            try:
                sc.interventions.append(_parse_intervention(raw))
                sc.intervention_keys.append((label, lines.get(("interventions", label))))
            except ValueError as exc:
                fail(f"bad intervention {raw!r}: {exc}", "interventions", label)

    st = StabilityOptions()
    sst = st.steps
    sc.stability = StabilityOptions(
        d=get("stability", "d", float, st.d),
        starts=get("stability", "starts", int, st.starts),
        dt=get("stability", "dt", float, st.dt),
        t_end=get("stability", "t_end", float, st.t_end),
        perturbation=get("stability", "perturbation", float, st.perturbation),
        seed=get("stability", "seed", int, st.seed),
        tolerance=get("stability", "tolerance", float, st.tolerance),
        steps=StepSizes(k_lambda=get("stability", "k_lambda", float, sst.k_lambda),
                        k_mu=get("stability", "k_mu", float, sst.k_mu),
                        k_w=get("stability", "k_w", float, sst.k_w), t_outer=1),
    )

    try:
        sc.validate()
    except ScenarioError:
        raise
    except (TopologyError, ValueError) as exc:
        raise ScenarioError(str(exc), path=source) from None
    return sc


def load(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", path=str(path)) from None
    return loads(text, str(path))


def _parse_links(text: str) -> list[tuple[int, int, float]]:
    """``"0-1:50, 1-2:30"``: node pairs with lengths in km."""
    out = []
    for part in text.replace("\n", ",").split(","):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"(\d+)\s*-\s*(\d+)\s*:\s*([0-9.eE+-]+)", part)
        if not m:
            raise ValueError(f"expected a-b:length_km, got {part!r}")
        out.append((int(m.group(1)), int(m.group(2)), float(m.group(3))))
    return out


def _parse_pairs(text: str) -> list[tuple[int, int]]:
    """``"0-5, 5-0"``: source and destination node ids."""
    out = []
    for part in text.replace("\n", ",").split(","):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"(\d+)\s*-\s*(\d+)", part)
        if not m:
            raise ValueError(f"expected src-dst, got {part!r}")
        out.append((int(m.group(1)), int(m.group(2))))
    return out


def _parse_intervention(text: str) -> Intervention:
    parts = text.split()
    if len(parts) not in (3, 4):
        raise ValueError("expected: time kind target [value]")
    kind = InterventionKind.parse(parts[1])
    value = parts[3] if len(parts) == 4 else None
    if value is not None:
        ut.UtilityKind.parse(value)
    return Intervention(float(parts[0]), kind, parts[2], value)


def uniform_d(instance: ProblemInstance, d: float | None) -> ProblemInstance:
    """Same sessions with every link rate parameter set to ``d``."""
    if d is None:
        return instance
    return ProblemInstance(instance.topology, instance.sessions,
                           d=np.full(instance.n_links, float(d)), slack=instance.slack)
