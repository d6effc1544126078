import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpdnet.errors import ConfigError, ContractError, NumericError
from gpdnet.graph import (NeighborGraph, SearchArea, build_feature_graph, build_fixed_graph,
                          build_search_areas)

from oracles import brute_knn, sq_dist_matrix


def _line(n):
    pts = np.zeros((n, 3))
    pts[:, 0] = np.arange(n)
    return pts


def brute_feature_graph(features, candidates, k):
    out = []
    for i, cand in enumerate(candidates):
        d = [(float(np.sum((features[j] - features[i]) ** 2)), int(j)) for j in cand]
        out.append([j for _, j in sorted(d)[:k]])
    return np.array(out)


# ---------------------------------------------------------------- search areas

def test_search_area_small_cloud_lists_all_others():
    pts = np.random.default_rng(0).standard_normal((9, 3))
    areas = build_search_areas(pts, 8)
    for i, row in enumerate(areas.candidates):
        assert sorted(row) == [j for j in range(9) if j != i]


def test_search_area_on_a_line():
    assert list(build_search_areas(_line(10), 2).candidates[0]) == [1, 2]


def test_search_area_matches_oracle():
    for seed in range(50):
        pts = np.random.default_rng(seed).standard_normal((120, 3))
        np.testing.assert_array_equal(build_search_areas(pts, 24).candidates,
                                      brute_knn(pts, pts, 24, exclude_self=True))


def test_search_area_smaller_than_k_is_config_error():
    with pytest.raises(ConfigError):
        build_search_areas(_line(50), 4, k=8)


def test_search_areas_stay_inside_segments():
    pts = np.random.default_rng(1).standard_normal((60, 3))
    areas = build_search_areas(pts, 10, segments=[30, 30])
    assert np.all(areas.candidates[:30] < 30)
    assert np.all(areas.candidates[30:] >= 30)
    np.testing.assert_array_equal(areas.candidates[30:] - 30,
                                  brute_knn(pts[30:], pts[30:], 10, exclude_self=True))


# ---------------------------------------------------------------- feature graph

def test_feature_graph_on_coordinates_equals_fixed_graph():
    pts = np.random.default_rng(2).standard_normal((40, 3))
    areas = build_search_areas(pts, 39)
    np.testing.assert_array_equal(build_feature_graph(pts, areas, 6).neighbors,
                                  build_fixed_graph(pts, 6).neighbors)


def test_feature_graph_hand_case():
    feats = np.array([[0.0], [1.0], [10.0], [11.0]])
    areas = SearchArea(np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]]))
    np.testing.assert_array_equal(build_feature_graph(feats, areas, 1).neighbors[:, 0],
                                  [1, 0, 3, 2])


def test_feature_graph_ties_go_to_lowest_index():
    areas = SearchArea(np.array([[3, 1, 2], [2, 0, 3], [1, 3, 0], [0, 2, 1]]))
    g = build_feature_graph(np.ones((4, 5)), areas, 2)
    np.testing.assert_array_equal(g.neighbors, [[1, 2], [0, 2], [0, 1], [0, 1]])


def test_feature_graph_matches_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        pts = rng.standard_normal((80, 3))
        feats = rng.standard_normal((80, 6)).astype(np.float32)
        areas = build_search_areas(pts, 16)
        np.testing.assert_array_equal(build_feature_graph(feats, areas, 5).neighbors,
                                      brute_feature_graph(feats.astype(np.float64),
                                                          areas.candidates, 5))


def test_feature_graph_errors():
    areas = SearchArea(np.array([[1], [0]]))
    with pytest.raises(ConfigError):
        build_feature_graph(np.zeros((2, 2)), areas, 2)
    with pytest.raises(NumericError):
        build_feature_graph(np.array([[np.nan], [0.0]]), areas, 1)


# ---------------------------------------------------------------- fixed graph

def test_fixed_graph_three_points():
    g = build_fixed_graph(np.random.default_rng(4).standard_normal((3, 3)), 2)
    for i, row in enumerate(g.neighbors):
        assert sorted(row) == [j for j in range(3) if j != i]


def test_fixed_graph_line_interior():
    g = build_fixed_graph(_line(10), 2)
    for i in range(1, 9):
        assert set(g.neighbors[i]) == {i - 1, i + 1}


def test_fixed_graph_matches_oracle():
    for seed in range(50):
        pts = np.random.default_rng(seed).standard_normal((100, 3))
        np.testing.assert_array_equal(build_fixed_graph(pts, 8).neighbors,
                                      brute_knn(pts, pts, 8, exclude_self=True))


def test_fixed_graph_needs_more_points_than_k():
    with pytest.raises(ContractError):
        build_fixed_graph(_line(4), 4)


# ---------------------------------------------------------------- invariants

def test_edge_flattening_round_trips():
    g = build_fixed_graph(np.random.default_rng(5).standard_normal((30, 3)), 4)
    back = NeighborGraph.from_edges(g.sources, g.targets, g.n_points)
    np.testing.assert_array_equal(back.neighbors, g.neighbors)
    assert g.sources.size == g.targets.size == 30 * 4


def test_format_lines():
    g = NeighborGraph(np.array([[1, 2], [0, 2], [0, 1]]))
    assert g.format_lines() == "0: 1 2\n1: 0 2\n2: 0 1\n"


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(12, 60), k=st.integers(1, 6))
def test_graphs_are_regular_without_self_loops(seed, n, k):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, 3))
    feats = rng.standard_normal((n, 4))
    for g in (build_fixed_graph(pts, k), build_feature_graph(feats, build_search_areas(pts, 10), k)):
        assert g.neighbors.shape == (n, k)
        assert not np.any(g.neighbors == np.arange(n)[:, None])
        assert g.neighbors.min() >= 0 and g.neighbors.max() < n
        assert all(len(set(row)) == k for row in g.neighbors)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_graphs_are_permutation_consistent(seed):
    rng = np.random.default_rng(seed)
    n = 50
    pts = rng.standard_normal((n, 3))
    feats = rng.standard_normal((n, 5))
    perm = rng.permutation(n)
    # random continuous coordinates are free of exact distance ties
    fixed, fixed_p = build_fixed_graph(pts, 6), build_fixed_graph(pts[perm], 6)
    np.testing.assert_array_equal(perm[fixed_p.neighbors], fixed.neighbors[perm])
    g = build_feature_graph(feats, build_search_areas(pts, 12), 4)
    g_p = build_feature_graph(feats[perm], build_search_areas(pts[perm], 12), 4)
    np.testing.assert_array_equal(perm[g_p.neighbors], g.neighbors[perm])


def test_sq_dist_oracle_sanity():
    assert sq_dist_matrix([[0, 0, 0]], [[3, 4, 0]])[0, 0] == 25.0
