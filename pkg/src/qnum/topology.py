"""Network graphs, routing and per-link physical parameters."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

DEFAULT_CHI = 1e5  # attempts/s
ATTENUATION_KM = 22.0


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Link:
    id: int
    a: int
    b: int
    length_km: float
    chi: float = DEFAULT_CHI

    @property
    def name(self) -> str:
        return f"{self.a}-{self.b}"

    def other(self, node: int) -> int:
        if node == self.a:
            return self.b
        if node == self.b:
            return self.a
        raise TopologyError(f"node {node} is not an endpoint of link {self.name}")


@dataclass
class Topology:
    nodes: list[int]
    links: list[Link]
    adjacency: dict[int, list[tuple[int, int]]] = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise TopologyError("duplicate node ids")
        node_set = set(self.nodes)
        seen = set()
        self.adjacency = {n: [] for n in self.nodes}
        for i, link in enumerate(self.links):
            if link.id != i:
                raise TopologyError(f"link ids must be 0..n-1 in order, got {link.id} at {i}")
            if link.a == link.b:
                raise TopologyError(f"self-loop at node {link.a}")
            if link.a not in node_set or link.b not in node_set:
                raise TopologyError(f"link {link.name} references unknown node")
            if link.length_km < 0:
                raise TopologyError(f"link {link.name} has negative length")
            if link.chi <= 0:
                raise TopologyError(f"link {link.name} has non-positive chi")
            key = frozenset((link.a, link.b))
            if key in seen:
                raise TopologyError(f"parallel link {link.name}")
            seen.add(key)
            self.adjacency[link.a].append((link.b, link.id))
            self.adjacency[link.b].append((link.a, link.id))
        for n in self.nodes:
            self.adjacency[n].sort()
        if self.nodes and len(self._reachable(self.nodes[0])) != len(self.nodes):
            raise TopologyError("topology is not connected")

    def _reachable(self, start: int, skip: frozenset[int] = frozenset()) -> set[int]:
        seen = {start}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v, lid in self.adjacency[u]:
                if lid not in skip and v not in seen:
                    seen.add(v)
                    queue.append(v)
        return seen

    @property
    def n_links(self) -> int:
        return len(self.links)

    def link_between(self, a: int, b: int) -> Link:
        for v, lid in self.adjacency.get(a, ()):
            if v == b:
                return self.links[lid]
        raise TopologyError(f"no link between {a} and {b}")

    def find_link(self, name: str) -> Link:
        """Look up a link by ``"a-b"`` (either orientation)."""
        try:
            a, b = (int(x) for x in name.split("-"))
        except ValueError:
            raise TopologyError(f"bad link name {name!r}") from None
        return self.link_between(a, b)

    def degrees(self) -> dict[int, int]:
        return {n: len(self.adjacency[n]) for n in self.nodes}

    def link_rates(self) -> np.ndarray:
        return np.array([link_rate_param(l.length_km, l.chi) for l in self.links])

    def without_links(self, link_ids) -> Topology:
        """Copy with some links removed and the rest renumbered; not required to stay connected."""
        drop = set(link_ids)
        kept = [l for l in self.links if l.id not in drop]
        topo = object.__new__(Topology)
        topo.nodes = list(self.nodes)
        topo.links = [Link(i, l.a, l.b, l.length_km, l.chi) for i, l in enumerate(kept)]
        topo.adjacency = {n: [] for n in topo.nodes}
        for l in topo.links:
            topo.adjacency[l.a].append((l.b, l.id))
            topo.adjacency[l.b].append((l.a, l.id))
        for n in topo.nodes:
            topo.adjacency[n].sort()
        return topo


def link_rate_param(length_km: float, chi: float = DEFAULT_CHI) -> float:
    """Rate parameter ``d_l`` (pairs/s) so that capacity is ``d_l * (1 - w_l)``."""
    if length_km < 0:
        raise TopologyError("link length must be non-negative")
    if chi <= 0:
        raise TopologyError("attempt rate chi must be positive")
    eta = 0.25 * math.exp(-(length_km / 2.0) / ATTENUATION_KM)
    return 1.5 * chi * eta


def build_dumbbell(link_length_km: float, chi: float = DEFAULT_CHI) -> Topology:
    """Leaves 0,1,2 on hub 3, hub 3 to hub 4, leaves 5,6,7 on hub 4."""
    if not link_length_km > 0:
        raise TopologyError("dumbbell link length must be positive")
    pairs = [(0, 3), (1, 3), (2, 3), (3, 4), (4, 5), (4, 6), (4, 7)]
    links = [Link(i, a, b, float(link_length_km), chi) for i, (a, b) in enumerate(pairs)]
    return Topology(list(range(8)), links)


# 14-node, 21-link NSFNET T1 backbone with the link lengths (km) most often
# tabulated for it in optical-network studies. Nodes are renumbered 0..13.
NSFNET_LINKS_KM: tuple[tuple[int, int, float], ...] = (
    (0, 1, 2100.0),
    (0, 2, 3000.0),
    (0, 7, 4800.0),
    (1, 2, 1200.0),
    (1, 3, 1500.0),
    (2, 5, 3600.0),
    (3, 4, 1200.0),
    (3, 10, 3900.0),
    (4, 5, 2400.0),
    (4, 6, 1200.0),
    (5, 9, 2100.0),
    (5, 13, 3600.0),
    (6, 7, 1500.0),
    (7, 8, 1500.0),
    (8, 9, 1500.0),
    (8, 11, 600.0),
    (8, 12, 600.0),
    (10, 11, 1200.0),
    (10, 12, 1500.0),
    (11, 13, 600.0),
    (12, 13, 300.0),
)


def build_nsfnet(downscale: float = 25.0, chi: float = DEFAULT_CHI) -> Topology:
    if not downscale > 0:
        raise TopologyError("downscale factor must be positive")
    links = [
        Link(i, a, b, length / downscale, chi)
        for i, (a, b, length) in enumerate(NSFNET_LINKS_KM)
    ]
    return Topology(list(range(14)), links)


def shortest_path(topology: Topology, src: int, dst: int) -> list[int]:
    """Minimum-hop path as a list of link ids.

    Among equal-hop paths the lexicographically least link-id sequence wins.
    Ties are resolved exactly by searching backwards from ``dst``: once the
    hop distance to ``dst`` is known for every node, a greedy walk from
    ``src`` that always takes the smallest link id leading one hop closer
    yields the lexicographically least sequence.
    """
    if src == dst:
        raise TopologyError("source and destination must differ")
    for n in (src, dst):
        if n not in topology.adjacency:
            raise TopologyError(f"unknown node {n}")
    dist = {dst: 0}
    queue = deque([dst])
    while queue:
        u = queue.popleft()
        for v, _ in topology.adjacency[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    if src not in dist:
        raise TopologyError(f"nodes {src} and {dst} are disconnected")
    path = []
    u = src
    while u != dst:
        lid, v = min(
            (lid, v) for v, lid in topology.adjacency[u] if dist.get(v) == dist[u] - 1
        )
        path.append(lid)
        u = v
    return path


def path_nodes(topology: Topology, src: int, path: list[int]) -> list[int]:
    """Node sequence visited by ``path`` starting at ``src``."""
    nodes = [src]
    for lid in path:
        nodes.append(topology.links[lid].other(nodes[-1]))
    return nodes


@dataclass(frozen=True)
class RoutingReport:
    matrix: np.ndarray  # links x sessions
    rank: int
    full_column_rank: bool


def routing_matrix(topology: Topology, paths: list[list[int]]) -> RoutingReport:
    mat = np.zeros((topology.n_links, len(paths)))
    for r, path in enumerate(paths):
        for lid in path:
            mat[lid, r] = 1.0
    rank = int(np.linalg.matrix_rank(mat)) if paths else 0
    return RoutingReport(mat, rank, rank == len(paths))


@dataclass
class SessionSpec:
    id: int
    src: int
    dst: int
    path: list[int]
    utility: str = "skr"
    f_min: float = 0.5
    weight: float = 1.0  # logprod per-link weight a_l, shared along the path

    def __post_init__(self):
        from .utility import UtilityKind

        self.utility = UtilityKind.parse(self.utility).value
        if not 0.25 < self.f_min <= 1.0:
            raise TopologyError(f"session {self.id}: F_min must lie in (1/4, 1]")
        if self.weight <= 0:
            raise TopologyError(f"session {self.id}: utility weight must be positive")

    def validate(self, topology: Topology) -> None:
        if not self.path:
            raise TopologyError(f"session {self.id}: empty path")
        node = self.src
        for lid in self.path:
            if not 0 <= lid < topology.n_links:
                raise TopologyError(f"session {self.id}: unknown link id {lid}")
            node = topology.links[lid].other(node)
        if node != self.dst:
            raise TopologyError(f"session {self.id}: path does not end at {self.dst}")


def make_session(topology: Topology, sid: int, src: int, dst: int, **kw) -> SessionSpec:
    s = SessionSpec(sid, src, dst, shortest_path(topology, src, dst), **kw)
    s.validate(topology)
    return s


def dumbbell_sessions(topology: Topology, utility="skr", f_min=0.85) -> list[SessionSpec]:
    """Two opposite-direction sessions for each leaf pair (i, i + 5)."""
    out = []
    for i in range(3):
        for src, dst in ((i, i + 5), (i + 5, i)):
            out.append(make_session(topology, len(out), src, dst, utility=utility, f_min=f_min))
    return out


def random_sessions(topology: Topology, count: int, seed: int, utility="skr",
                    f_min=0.85) -> list[SessionSpec]:
    """``count`` sessions between uniformly drawn distinct node pairs.

    Pairs may repeat. The draw uses its own generator, so the session set
    depends only on ``seed`` and not on the simulation's random stream.
    """
    if count < 1:
        raise TopologyError("need at least one session")
    rng = np.random.default_rng(seed)
    nodes = sorted(topology.adjacency)
    out = []
    while len(out) < count:
        src, dst = (int(x) for x in rng.choice(nodes, size=2, replace=False))
        out.append(make_session(topology, len(out), src, dst, utility=utility, f_min=f_min))
    return out
