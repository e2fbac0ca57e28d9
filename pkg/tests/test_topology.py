import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qnum.topology import (
    NSFNET_LINKS_KM,
    TopologyError,
    build_dumbbell,
    build_nsfnet,
    dumbbell_sessions,
    link_rate_param,
    make_session,
    random_sessions,
    routing_matrix,
    shortest_path,
)


def exact_rank(mat) -> int:
    """Gaussian elimination over the rationals."""
    rows = [[Fraction(int(x)) for x in row] for row in mat]
    rank, cols = 0, len(rows[0]) if rows else 0
    for c in range(cols):
        pivot = next((r for r in range(rank, len(rows)) if rows[r][c] != 0), None)
        if pivot is None:
            continue
        rows[rank], rows[pivot] = rows[pivot], rows[rank]
        for r in range(len(rows)):
            if r != rank and rows[r][c] != 0:
                f = rows[r][c] / rows[rank][c]
                rows[r] = [a - f * b for a, b in zip(rows[r], rows[rank])]
        rank += 1
    return rank


def all_min_hop_paths(topo, src, dst):
    """Every minimum-hop link sequence, by exhaustive depth-first enumeration."""
    best, out = [math.inf], []

    def walk(node, seen, path):
        if len(path) > best[0]:
            return
        if node == dst:
            if len(path) < best[0]:
                best[0] = len(path)
                out.clear()
            out.append(list(path))
            return
        for link in topo.links:
            if node in (link.a, link.b):
                nxt = link.other(node)
                if nxt not in seen:
                    walk(nxt, seen | {nxt}, path + [link.id])

    walk(src, {src}, [])
    return out


def bfs_hops(topo, src):
    dist = {src: 0}
    frontier = [src]
    while frontier:
        nxt = []
        for u in frontier:
            for link in topo.links:
                if u in (link.a, link.b):
                    v = link.other(u)
                    if v not in dist:
                        dist[v] = dist[u] + 1
                        nxt.append(v)
        frontier = nxt
    return dist


class TestDumbbell:
    def test_structure(self):
        t = build_dumbbell(80)
        assert len(t.nodes) == 8 and t.n_links == 7
        assert all(l.length_km == 80 for l in t.links)
        assert sorted(t.degrees().values()) == [1, 1, 1, 1, 1, 1, 4, 4]

    @pytest.mark.parametrize("bad", [0, -5])
    def test_rejects_length(self, bad):
        with pytest.raises(TopologyError):
            build_dumbbell(bad)

    def test_paths(self):
        t = build_dumbbell(80)
        names = [t.links[i].name for i in shortest_path(t, 0, 5)]
        assert names == ["0-3", "3-4", "4-5"]
        assert shortest_path(t, 0, 3) == [0]

    def test_workload_rank(self):
        t = build_dumbbell(80)
        rep = routing_matrix(t, [s.path for s in dumbbell_sessions(t)])
        assert rep.matrix.shape == (7, 6)
        assert rep.rank == exact_rank(rep.matrix) == 3
        assert not rep.full_column_rank


class TestNsfnet:
    def test_sizes(self):
        t = build_nsfnet(25)
        assert len(t.nodes) == 14 and t.n_links == 21

    def test_scaling(self):
        one, small = build_nsfnet(1), build_nsfnet(25)
        for (a, b, km), l1, l25 in zip(NSFNET_LINKS_KM, one.links, small.links):
            assert (l1.a, l1.b, l1.length_km) == (a, b, km)
            assert l25.length_km == pytest.approx(km / 25)

    def test_rejects_downscale(self):
        with pytest.raises(TopologyError):
            build_nsfnet(0)

    def test_tie_break_is_lexicographic(self):
        t = build_nsfnet(25)
        ties = 0
        for s in t.nodes:
            for d in t.nodes:
                if s == d:
                    continue
                cands = all_min_hop_paths(t, s, d)
                got = shortest_path(t, s, d)
                assert got == min(cands)
                ties += len(cands) > 1
        assert ties > 0

    @pytest.mark.parametrize("builder", [lambda: build_dumbbell(10), lambda: build_nsfnet(25)])
    def test_bfs_distance(self, builder):
        t = builder()
        for s in t.nodes:
            hops = bfs_hops(t, s)
            for d in t.nodes:
                if d != s:
                    assert len(shortest_path(t, s, d)) == hops[d]


class TestRouting:
    def test_single_column(self):
        t = build_dumbbell(10)
        rep = routing_matrix(t, [shortest_path(t, 0, 5)])
        assert rep.matrix[:, 0].sum() == 3 and rep.rank == 1 and rep.full_column_rank

    def test_duplicate_paths(self):
        t = build_dumbbell(10)
        p = shortest_path(t, 0, 5)
        rep = routing_matrix(t, [p, list(p)])
        assert rep.rank == 1 and not rep.full_column_rank

    def test_indicator_matches_scan(self):
        t = build_nsfnet(25)
        sessions = random_sessions(t, 12, seed=3)
        rep = routing_matrix(t, [s.path for s in sessions])
        for l in range(t.n_links):
            for r, s in enumerate(sessions):
                assert rep.matrix[l, r] == (1.0 if l in s.path else 0.0)
        assert np.array_equal(rep.matrix.sum(axis=0), [len(s.path) for s in sessions])


class TestRateParam:
    def test_values(self):
        assert link_rate_param(0, 1e5) == pytest.approx(37500.0)
        assert link_rate_param(80, 1e5) == pytest.approx(1.5e5 * 0.25 * math.exp(-40 / 22))
        assert link_rate_param(80, 1e5) == pytest.approx(6087.0229193193, rel=1e-12)

    def test_rejects(self):
        with pytest.raises(ValueError):
            link_rate_param(10, 0)
        with pytest.raises(ValueError):
            link_rate_param(-1, 1e5)

    @given(st.floats(0, 500), st.floats(0.1, 100), st.floats(1, 1e6))
    def test_monotone_and_linear(self, L, dL, chi):
        assert link_rate_param(L + dL, chi) < link_rate_param(L, chi)
        assert link_rate_param(L, 2 * chi) == pytest.approx(2 * link_rate_param(L, chi))


class TestSessions:
    def test_f_min_bounds(self):
        t = build_dumbbell(10)
        with pytest.raises(TopologyError):
            make_session(t, 0, 0, 5, f_min=0.25)

    def test_bad_path(self):
        t = build_dumbbell(10)
        s = make_session(t, 0, 0, 5)
        s.path = [0, 3]
        with pytest.raises(TopologyError):
            s.validate(t)

    def test_opposite_directions_share_links(self):
        t = build_dumbbell(10)
        a, b = make_session(t, 0, 0, 5), make_session(t, 1, 5, 0)
        assert sorted(a.path) == sorted(b.path)

    def test_random_sessions_deterministic(self):
        t = build_nsfnet(25)
        a = random_sessions(t, 8, seed=5)
        b = random_sessions(t, 8, seed=5)
        assert [(s.src, s.dst) for s in a] == [(s.src, s.dst) for s in b]
        assert all(s.src != s.dst for s in a)
