import numpy as np
import pytest

from isorect.geometry import QuadMesh, barycentric_eval, grid_mesh
from isorect.pointcloud import (CloudError, MeshProximity, PointCloud, closest_point_on_mesh, filter_noise, knn,
                                load_cloud, normalize_cloud, save_cloud)

from oracles import closest_on_mesh, knn_scan


def bumpy_mesh(dims=(7, 9), seed=0):
    rng = np.random.default_rng(seed)
    flat = grid_mesh(dims, spacing=(1 / (dims[0] - 1), 1.4 / (dims[1] - 1)))
    z = 0.2 * np.sin(4 * flat.vertices[:, 0]) * np.cos(3 * flat.vertices[:, 1]) + rng.normal(scale=0.02,
                                                                                            size=flat.n_vertices)
    return QuadMesh(dims, np.column_stack([flat.vertices, z]))


def test_point_on_vertex_and_above_face():
    mesh = QuadMesh((3, 3), np.column_stack([grid_mesh((3, 3)).vertices, np.zeros(9)]))
    anchor, foot, normal, dist = closest_point_on_mesh(mesh, mesh.vertices[4])
    assert dist == 0.0
    assert np.isclose(anchor.weights.max(), 1.0)
    h = 0.37
    anchor, foot, normal, dist = closest_point_on_mesh(mesh, [0.5, 0.5, h])
    assert np.isclose(dist, h)
    assert np.isclose(abs(np.dot([0.5, 0.5, h] - foot, normal)), h)


def test_proximity_matches_exhaustive_scan():
    mesh = bumpy_mesh()
    rng = np.random.default_rng(1)
    pts = rng.uniform([-0.3, -0.3, -0.5], [1.3, 1.7, 0.5], size=(1000, 3))
    anchors, foot, normals, dist = MeshProximity(mesh).query(pts)
    tri = mesh.triangle_coords()
    assert np.allclose(barycentric_eval(mesh, anchors), foot, atol=1e-12)
    for k in range(0, 1000, 5):
        q, d, _ = closest_on_mesh(tri, pts[k])
        assert abs(dist[k] - d) <= 1e-9
        assert np.allclose(foot[k], q, atol=1e-9)


def test_cutoff_keeps_near_points_exact():
    mesh = bumpy_mesh()
    rng = np.random.default_rng(2)
    pts = rng.uniform([-0.3, -0.3, -0.5], [1.3, 1.7, 0.5], size=(400, 3))
    _, f_all, _, d_all = MeshProximity(mesh).query(pts)
    _, f_cut, _, d_cut = MeshProximity(mesh).query(pts, cutoff=0.1)
    near = d_all <= 0.1
    assert np.array_equal(d_cut[near], d_all[near])
    assert np.all(d_cut[~near] > 0.1)


def test_filter_noise_limits():
    mesh = bumpy_mesh()
    rng = np.random.default_rng(3)
    cloud = PointCloud(rng.uniform([0, 0, 0.6], [1, 1.4, 1.0], size=(50, 3)))
    assert filter_noise(cloud, mesh, phi=np.inf).all()
    assert not filter_noise(cloud, mesh, phi=0.0).any()


def test_knn_examples():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(40, 3))
    assert knn(pts, pts[17], 1)[0] == 17
    full = knn(pts, pts[3] + 0.01, 40)
    d = np.linalg.norm(pts[full] - (pts[3] + 0.01), axis=1)
    assert sorted(full) == list(range(40)) and np.all(np.diff(d) >= 0)
    with pytest.raises(CloudError):
        knn(np.zeros((0, 3)), np.zeros(3), 1)


def test_knn_matches_linear_scan():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(500, 3))
    q = rng.normal(size=(10_000, 3))
    got = knn(pts, q, 5)
    for k in range(0, 10_000, 10):
        assert list(got[k]) == list(knn_scan(pts, q[k], 5))


def test_knn_ties_broken_by_index():
    pts = np.array([[1.0, 0], [-1.0, 0], [0, 1.0], [0, -1.0], [3, 3]])
    assert list(knn(pts, np.zeros(2), 4)) == [0, 1, 2, 3]


def test_normalize_scales_about_origin():
    pts = np.array([[0.0, 0, 1], [3, 4, 1], [1, 1, 2]])
    n = normalize_cloud(PointCloud(pts))
    assert np.isclose(n.diagonal(), 1.0)
    # directions from the camera centre are unchanged
    assert np.allclose(np.cross(n.points, pts), 0)
    assert np.isclose(n.scale, 1 / PointCloud(pts).diagonal())


def test_cloud_io(tmp_path):
    rng = np.random.default_rng(6)
    c = PointCloud(rng.normal(size=(20, 3)))
    save_cloud(tmp_path / "c.xyz", c)
    assert np.array_equal(load_cloud(tmp_path / "c.xyz").points, c.points)
    (tmp_path / "bad.xyz").write_text("1 2\n")
    with pytest.raises(CloudError):
        load_cloud(tmp_path / "bad.xyz")
    (tmp_path / "nan.xyz").write_text("1 2 nan\n")
    with pytest.raises(CloudError):
        load_cloud(tmp_path / "nan.xyz")
