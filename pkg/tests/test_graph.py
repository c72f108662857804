import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_layout
from layoutsim.graph import (
    ADJACENCY,
    FULLY_CONNECTED,
    boxes_adjacent,
    build_graph,
    dump_graph,
    edge_vector,
    mask_semantics,
    node_geometry,
)
from layoutsim.layout import Element, Layout


def test_node_geometry_unit_canvas():
    e = Element("a", 0, 0.5, 0.5, 1.0, 1.0)
    assert node_geometry(e, 1.0, 1.0).tolist() == [0.5, 0.5, 1.0, 1.0, 1.0]


def test_node_geometry_substitution():
    e = Element("a", 0, 25, 75, 50, 10)
    np.testing.assert_allclose(node_geometry(e, 100, 100), [0.25, 0.75, 0.5, 0.1, 5.0], rtol=1e-15)


def test_node_geometry_hand_formula(rng):
    for _ in range(20):
        W, H = rng.uniform(0.5, 5, 2)
        x0, x1 = np.sort(rng.uniform(0, W, 2))
        y0, y1 = np.sort(rng.uniform(0, H, 2))
        e = Element.from_corners("e", 0, x0, y0, x1, y1)
        expected = [e.x / W, e.y / H, e.w / W, e.h / H, e.w * e.h / math.sqrt(W * H)]
        np.testing.assert_allclose(node_geometry(e, W, H), expected, rtol=1e-12)


class TestEdgeVector:
    def test_coincident_boxes(self):
        e = Element("a", 0, 0.4, 0.4, 0.2, 0.1)
        assert edge_vector(e, e, 1, 1).tolist() == [0, 0, 1, 1, 2.0, 2.0, 0, 0]

    def test_left_and_right_halves(self):
        l = Element("l", 0, 0.25, 0.5, 0.5, 1.0)
        r = Element("r", 0, 0.75, 0.5, 0.5, 1.0)
        np.testing.assert_allclose(
            edge_vector(l, r, 1, 1),
            [0.5 / math.sqrt(0.5), 0, 1, 0, 0.5, 0.5, 0.5 / math.sqrt(2), 0],
            rtol=1e-15,
            atol=0,
        )

    def test_directly_above_gives_half_pi(self):
        a = Element("a", 0, 0.5, 0.2, 0.1, 0.1)
        b = Element("b", 0, 0.5, 0.7, 0.1, 0.1)
        assert edge_vector(a, b, 1, 1)[7] == pytest.approx(math.pi / 2)

    @settings(max_examples=1000, deadline=None)
    @given(
        st.tuples(*[st.floats(0.0, 0.95)] * 2, *[st.floats(0.01, 1.0)] * 2),
        st.tuples(*[st.floats(0.0, 0.95)] * 2, *[st.floats(0.01, 1.0)] * 2),
    )
    def test_invariants_and_reverse_relation(self, p, q):
        def box(t, name):
            x0, y0, w, h = t
            return Element.from_corners(name, 0, x0, y0, min(x0 + w, 1.0), min(y0 + h, 1.0))

        ei, ej = box(p, "i"), box(q, "j")
        f = edge_vector(ei, ej, 1.0, 1.0)
        b = edge_vector(ej, ei, 1.0, 1.0)
        assert 0 <= f[3] <= 1 and -math.pi <= f[7] <= math.pi and 0 <= f[6] <= 1
        # equal components
        assert f[3] == b[3] and f[6] == b[6]
        assert f[4] == b[5] and f[5] == b[4]
        # delta terms negate, scaled by the respective root areas
        np.testing.assert_allclose(f[0] * math.sqrt(ei.area), -b[0] * math.sqrt(ej.area), rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(f[1] * math.sqrt(ei.area), -b[1] * math.sqrt(ej.area), rtol=1e-9, atol=1e-12)
        assert f[2] * b[2] == pytest.approx(1.0, rel=1e-12)
        if ej.x != ei.x or ej.y != ei.y:
            diff = (f[7] - b[7]) % (2 * math.pi)
            assert min(abs(diff - math.pi), abs(diff + math.pi - 2 * math.pi)) < 1e-9


class TestBuildGraph:
    def test_three_elements_fully_connected(self, rng):
        g = build_graph(random_layout(rng, "t", n=3))
        assert g.num_edges == 6
        assert not np.any(g.src == g.dst)
        assert {(int(s), int(d)) for s, d in zip(g.src, g.dst)} == {(i, j) for i in range(3) for j in range(3) if i != j}

    def test_single_element(self, rng):
        g = build_graph(random_layout(rng, "t", n=1))
        assert g.num_nodes == 1 and g.num_edges == 0 and g.edge_features.shape == (0, 8)

    def test_rooms_in_a_row_adjacency(self):
        rooms = tuple(Element.from_corners(f"r{k}", 0, 0.3 * k, 0, 0.3 * k + 0.3, 1) for k in range(3))
        g = build_graph(Layout("row", 1, 1, 2, rooms), ADJACENCY, adjacency_eps=0.0)
        assert sorted(zip(g.src.tolist(), g.dst.tolist())) == [(0, 1), (1, 0), (1, 2), (2, 1)]

    def test_adjacency_gap_tolerance(self):
        a = Element.from_corners("a", 0, 0.0, 0.0, 0.3, 0.3)
        b = Element.from_corners("b", 0, 0.31, 0.0, 0.6, 0.3)
        assert not boxes_adjacent(a, b, 0.005)
        assert boxes_adjacent(a, b, 0.02)
        g = build_graph(Layout("g", 2.0, 1.0, 1, (a, b)), ADJACENCY, adjacency_eps=0.01)  # tol = 0.02
        assert g.num_edges == 2

    def test_adjacency_is_symmetric(self, rng):
        for k in range(30):
            g = build_graph(random_layout(rng, f"s{k}", n=6), ADJACENCY, 0.02)
            pairs = set(zip(g.src.tolist(), g.dst.tolist()))
            assert all((j, i) in pairs for i, j in pairs)
            assert all(i != j for i, j in pairs)

    def test_node_invariants(self, rng):
        for k in range(20):
            g = build_graph(random_layout(rng, f"n{k}", width=2.0, height=0.7))
            assert np.all((g.geometry[:, :4] >= 0) & (g.geometry[:, :4] <= 1))
            assert np.all(g.geometry[:, 4] > 0)

    @pytest.mark.parametrize("mode", [FULLY_CONNECTED, ADJACENCY])
    def test_permutation_relabels_consistently(self, rng, mode):
        l = random_layout(rng, "p", n=6)
        perm = rng.permutation(6)
        lp = Layout("p", l.width, l.height, l.categories, tuple(l.elements[i] for i in perm))
        g, gp = build_graph(l, mode), build_graph(lp, mode)
        # new index k holds old element perm[k]
        assert np.array_equal(gp.categories, g.categories[perm])
        assert np.array_equal(gp.geometry, g.geometry[perm])
        edges = {(int(s), int(d)): f for s, d, f in zip(g.src, g.dst, g.edge_features)}
        assert gp.num_edges == g.num_edges
        for s, d, f in zip(gp.src, gp.dst, gp.edge_features):
            assert np.array_equal(f, edges[(int(perm[s]), int(perm[d]))])

    def test_unknown_mode(self, rng):
        with pytest.raises(ValueError):
            build_graph(random_layout(rng, "x"), "star")

    def test_dump_and_mask(self, rng):
        g = build_graph(random_layout(rng, "d", n=3))
        doc = json.loads(dump_graph(g))
        assert len(doc["nodes"]) == 3 and len(doc["edges"]) == 6 and len(doc["edges"][0]["vector"]) == 8
        m = mask_semantics(g)
        assert m.semantics_masked and not g.semantics_masked
        assert np.array_equal(m.geometry, g.geometry)
