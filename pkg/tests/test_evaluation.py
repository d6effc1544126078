import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpdnet.errors import ContractError
from gpdnet.evaluation import (CSV_HEADER, MetricsReport, chamfer, estimate_normals_pca,
                               evaluate_cloud, nearest_rank_percentile, normal_angle_errors,
                               receptive_field_radius, receptive_field_stats, receptive_fields,
                               rmsd, unae, write_metrics_csv)
from gpdnet.geometry import PointCloud, add_gaussian_noise, normalize_diameter, sample_primitive
from gpdnet.graph import NeighborGraph, build_fixed_graph
from gpdnet.network import DESK_NET, GpdNet, zero_params

from oracles import bfs_field_sizes, brute_chamfer, brute_rmsd


# ---------------------------------------------------------------- chamfer and rmsd

def test_chamfer_examples():
    a = np.random.default_rng(0).standard_normal((30, 3))
    assert chamfer(a, a) == 0.0
    assert chamfer([[0.1, 0, 0]], [[0.0, 0, 0]]) == pytest.approx(0.01, abs=1e-15)
    b = a + 0.01
    assert chamfer(a, b) == chamfer(b, a)


def test_chamfer_requires_equal_sizes_and_points():
    with pytest.raises(ContractError):
        chamfer(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ContractError):
        chamfer(np.zeros((0, 3)), np.zeros((0, 3)))


def test_rmsd_examples():
    a = np.random.default_rng(1).standard_normal((20, 3))
    assert rmsd(a, a) == 0.0
    assert rmsd([[0.1, 0, 0]], [[0.0, 0, 0]]) == pytest.approx(0.1, abs=1e-15)
    b = a + np.random.default_rng(2).standard_normal((20, 3)) * 0.1
    assert rmsd(3.0 * a, 3.0 * b) == pytest.approx(3.0 * rmsd(a, b), rel=1e-12)
    with pytest.raises(ContractError):
        rmsd(np.zeros((0, 3)), a)


def test_metrics_match_brute_force_on_100_instances():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(1, 513))
        a = rng.standard_normal((n, 3))
        b = a + 0.1 * rng.standard_normal((n, 3))
        assert chamfer(a, b) == brute_chamfer(a, b)
        assert rmsd(a, b) == brute_rmsd(a, b)


def test_rmsd_and_chamfer_first_term_agree():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((50, 3)), rng.standard_normal((50, 3))
    forward = sum(min(np.sum((b - p) ** 2, axis=1)) for p in a)
    backward = sum(min(np.sum((a - p) ** 2, axis=1)) for p in b)
    assert rmsd(a, b) ** 2 * 50 == pytest.approx(forward, rel=1e-12)
    assert chamfer(a, b) == pytest.approx((forward + backward) / 100, rel=1e-12)


# ---------------------------------------------------------------- normals

def test_planar_normals_are_exactly_z():
    rng = np.random.default_rng(5)
    pts = np.column_stack([rng.uniform(-1, 1, (300, 2)), np.zeros(300)])
    nrm = estimate_normals_pca(pts, 16)
    np.testing.assert_allclose(np.abs(nrm), np.tile([0, 0, 1.0], (300, 1)), atol=1e-5)


def test_sphere_normals_are_accurate():
    pc = sample_primitive("sphere", 8192, 6)
    err = normal_angle_errors(estimate_normals_pca(pc, 16), pc.normals)
    assert err.mean() < 5.0


def test_line_neighbourhoods_are_deterministic():
    pts = np.zeros((40, 3))
    pts[:, 1] = np.arange(40)
    a = estimate_normals_pca(pts, 5)
    b = estimate_normals_pca(pts.copy(), 5)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(np.abs(a[:, 1]), 0, atol=1e-12)
    assert np.all(np.max(np.abs(a), axis=1) == np.take_along_axis(
        a, np.argmax(np.abs(a), axis=1)[:, None], 1)[:, 0])


def test_normal_estimation_preconditions():
    with pytest.raises(ContractError):
        estimate_normals_pca(np.random.rand(10, 3), 10)
    with pytest.raises(ContractError):
        estimate_normals_pca(np.random.rand(10, 3), 2)


def test_normal_angle_cases():
    n = np.array([[0, 0, 1.0], [1.0, 0, 0]])
    np.testing.assert_array_equal(normal_angle_errors(n, n), [0, 0])
    np.testing.assert_array_equal(normal_angle_errors(-n, n), [0, 0])
    np.testing.assert_allclose(normal_angle_errors(n[::-1], n), [90, 90], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_unae_is_sign_invariant(seed):
    rng = np.random.default_rng(seed)
    pc = sample_primitive("sphere", 200, seed % 1000)
    est = rng.standard_normal((200, 3))
    est /= np.linalg.norm(est, axis=1, keepdims=True)
    flips = np.where(rng.random((200, 1)) < 0.5, -1.0, 1.0)
    base = unae(pc.points, pc, estimated_normals=est)
    flipped_truth = PointCloud(pc.points, normals=pc.normals * flips)
    assert unae(pc.points, pc, estimated_normals=est * flips) == pytest.approx(base, abs=1e-9)
    assert unae(pc.points, flipped_truth, estimated_normals=est) == pytest.approx(base, abs=1e-9)
    assert 0.0 <= base <= 90.0


def test_unae_needs_ground_truth():
    with pytest.raises(ContractError):
        unae(np.random.rand(30, 3), PointCloud(np.random.rand(30, 3)))


def test_unae_uses_nearest_denoised_point():
    pc = sample_primitive("sphere", 500, 7)
    perm = np.random.default_rng(7).permutation(500)
    est = estimate_normals_pca(pc.points, 16)
    # a permuted copy of the same cloud must give the same score
    assert unae(pc.points[perm], pc, estimated_normals=est[perm]) == unae(pc.points, pc,
                                                                          estimated_normals=est)


# ---------------------------------------------------------------- reports

def test_zero_model_reports_baseline_metrics():
    clean = normalize_diameter(sample_primitive("torus", 600, 8))
    noisy = add_gaussian_noise(clean, 0.02, 9)
    rep = evaluate_cloud(GpdNet(DESK_NET, zero_params(DESK_NET)), noisy, clean, cloud_id="t")
    assert rep.chamfer == rep.baseline["chamfer"]
    assert rep.rmsd == rep.baseline["rmsd"]
    assert rep.unae_deg == rep.baseline["unae_deg"]


def test_metrics_csv(tmp_path):
    reps = [MetricsReport("a", 0.02, 8, "dynamic", 1e-4, 0.01, 10.0, baseline={
        "chamfer": 2e-4, "rmsd": 0.02, "unae_deg": 12.0}),
            MetricsReport("b", 0.02, 8, "dynamic", 3e-4, 0.03, 20.0, baseline={
                "chamfer": 4e-4, "rmsd": 0.04, "unae_deg": 14.0})]
    write_metrics_csv(tmp_path / "m.csv", reps)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].split(",")[:len(CSV_HEADER)] == CSV_HEADER
    assert lines[-1].split(",")[:8] == ["mean", "0.02", "8", "dynamic", "0.0002", "0.02", "15", "200"]
    assert len(lines) == 4


# ---------------------------------------------------------------- receptive field

def test_first_layer_field_is_self_plus_neighbours():
    pts = np.random.default_rng(10).standard_normal((200, 3))
    g = build_fixed_graph(pts, 8)
    sizes = receptive_field_stats(g, pts, 3).sizes
    assert np.all(sizes[:, 0] == 9)


def test_chain_graph_field_spans_three_hops():
    n = 30
    nb = np.array([[max(i - 1, 0) if i > 0 else 1, min(i + 1, n - 1) if i < n - 1 else n - 2]
                   for i in range(n)])
    fields = receptive_fields(NeighborGraph(nb), 3)
    row = fields[2].getrow(15).indices
    assert sorted(row) == list(range(12, 19))


def test_field_sizes_match_bfs_and_grow():
    rng = np.random.default_rng(11)
    for _ in range(10):
        pts = rng.standard_normal((300, 3))
        g = build_fixed_graph(pts, 6)
        stat = receptive_field_stats(g, pts, 3)
        np.testing.assert_array_equal(stat.sizes, bfs_field_sizes(g.neighbors, 3))
        assert np.all(np.diff(stat.sizes, axis=1) > 0)
        for a, b in zip(stat.fields, stat.fields[1:]):
            assert (a.astype(int) - a.multiply(b).astype(int)).nnz == 0


def test_nearest_rank_percentile():
    assert nearest_rank_percentile(np.arange(1, 11), 90) == 9
    assert nearest_rank_percentile(np.arange(1, 101), 90) == 90
    assert nearest_rank_percentile([5.0], 90) == 5.0


def test_radius_uses_clean_distances():
    pts = np.zeros((5, 3))
    pts[:, 0] = np.arange(5)
    g = NeighborGraph(np.array([[1], [0], [1], [2], [3]]))
    stat = receptive_field_stats(g, pts, 1)
    # point 4's field is {3, 4}: distances 0 and 1, nearest-rank 90th percentile is 1
    assert stat.radius[4] == 1.0
    assert stat.radius[0] == 1.0


def test_receptive_field_radius_on_a_model():
    clean = normalize_diameter(sample_primitive("sphere", 400, 12))
    noisy = add_gaussian_noise(clean, 0.01, 13)
    net = GpdNet(DESK_NET, seed=1)
    for mode in ("dynamic", "fixed"):
        stat = receptive_field_radius(net, noisy, clean, 1, mode)
        assert stat.radius.shape == (400,)
        assert np.all(stat.radius > 0)
    with pytest.raises(ContractError):
        receptive_field_radius(net, noisy, clean, 2)
