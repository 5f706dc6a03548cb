import numpy as np
import pytest

from isorect.camera import CameraIntrinsics, viewing_rays
from isorect.energies import (BETA_POINT, BETA_TANGENT, TERMS, Correspondences, EnergyError, SolverState,
                              WeightSchedule, e_dist, e_fair, e_iso, e_line, e_ray, iso_residuals, total_objective)
from isorect.geometry import Anchors, MeshPair, QuadMesh, barycentric_eval, grid_mesh, rotation_2d
from isorect.gradcheck import random_state, run_gradcheck


def rigid_pair(seed=0, dims=(5, 7)):
    rng = np.random.default_rng(seed)
    plane = grid_mesh(dims, spacing=(0.2, 0.15))
    plane = plane.with_vertices(plane.vertices @ rotation_2d(0.3).T + rng.normal(scale=0.01, size=plane.vertices.shape))
    r, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    space = QuadMesh(dims, np.column_stack([plane.vertices, np.zeros(plane.n_vertices)]) @ r.T + [0, 0, 2])
    return MeshPair(space, plane)


def test_iso_zero_for_rigid_embedding():
    pair = rigid_pair()
    assert e_iso(pair)[0] < 1e-12
    assert np.abs(iso_residuals(pair)).max() < 1e-12


def test_iso_positive_for_scaled_plane():
    pair = rigid_pair()
    scaled = MeshPair(pair.space, pair.plane.with_vertices(2 * pair.plane.vertices))
    assert e_iso(scaled)[0] > 0


def test_fair_zero_on_uniform_grid():
    assert e_fair(grid_mesh((6, 9), spacing=(0.3, 0.7)))[0] < 1e-24


def _fair_by_triples(g):
    total = 0.0
    n1, n2 = g.shape[:2]
    for i in range(n1):
        for j in range(n2):
            if 0 < i < n1 - 1:
                total += float(np.sum((g[i - 1, j] - 2 * g[i, j] + g[i + 1, j]) ** 2))
            if 0 < j < n2 - 1:
                total += float(np.sum((g[i, j - 1] - 2 * g[i, j] + g[i, j + 1]) ** 2))
    return total


def test_fair_single_displaced_vertex():
    m = grid_mesh((7, 7))
    d = np.array([0.3, -0.4])
    v = m.vertices.copy()
    v[3 * 7 + 3] += d
    moved = m.with_vertices(v)
    # 2 centred triples contribute (2d)^2 each, 4 endpoint triples d^2 each
    expected = 2 * 4 * d @ d + 4 * d @ d
    assert np.isclose(e_fair(moved)[0], expected)
    assert np.isclose(e_fair(moved)[0], _fair_by_triples(moved.grid()))


def test_fair_matches_triple_sum_on_random_mesh():
    rng = np.random.default_rng(4)
    m = QuadMesh((5, 6), rng.normal(size=(30, 3)))
    assert np.isclose(e_fair(m)[0], _fair_by_triples(m.grid()))


def _flat_space(dims=(4, 4)):
    flat = grid_mesh(dims)
    return QuadMesh(dims, np.column_stack([flat.vertices, np.full(flat.n_vertices, 2.0)]))


def test_dist_zero_on_mesh_and_normal_offset():
    mesh = _flat_space()
    rng = np.random.default_rng(0)
    anchors = Anchors(rng.integers(0, 9, 20), rng.integers(0, 2, 20), rng.dirichlet(np.ones(3), 20))
    pts = barycentric_eval(mesh, anchors)
    normals = np.tile([0, 0, 1.0], (20, 1))
    assert e_dist(mesh, pts, anchors, normals)[0] == 0.0
    d = 0.07
    one = Anchors(anchors.face[:1], anchors.tri[:1], anchors.weights[:1])
    val = e_dist(mesh, pts[:1] + [0, 0, d], one, normals[:1])[0]
    assert np.isclose(val, (BETA_POINT + BETA_TANGENT) * d * d)
    with pytest.raises(EnergyError):
        e_dist(mesh, np.zeros((0, 3)), Anchors.empty(), np.zeros((0, 3)))


def test_ray_zero_on_ray_and_offset():
    cam = CameraIntrinsics(1.0, 800.0, 800.0, 400.0, 300.0)
    rng = np.random.default_rng(1)
    mesh = _flat_space((5, 5))
    anchors = Anchors(rng.integers(0, 16, 10), rng.integers(0, 2, 10), rng.dirichlet(np.ones(3), 10))
    p = barycentric_eval(mesh, anchors)
    px = np.column_stack([800 * p[:, 0] / p[:, 2] + 400, 800 * p[:, 1] / p[:, 2] + 300])
    rays = viewing_rays(cam, px)
    assert e_ray(mesh, anchors, rays)[0] < 1e-14
    assert e_ray(mesh, Anchors.empty(), viewing_rays(cam, np.zeros((0, 2))))[0] == 0.0
    # translating the mesh by d perpendicular to one ray moves that point off it by d
    d = 0.05
    shifted = mesh.with_vertices(mesh.vertices + d * rays.n1[0])
    assert np.isclose(e_ray(shifted, anchors[:1], rays[:1])[0], d * d)


def test_line_examples():
    mesh = grid_mesh((5, 5))
    # vertices (0,0), (1,0), (2,0) lie on y = 0, i.e. theta = pi/2 and c = 0
    anchors = Anchors([0, 4, 8], [0, 0, 0], np.tile([1.0, 0, 0], (3, 1)))
    assert np.allclose(barycentric_eval(mesh, anchors)[:, 1], 0)
    assert e_line(mesh, anchors, np.zeros(3, dtype=int), [np.pi / 2], [0.0])[0] < 1e-30
    d = 0.25
    v = mesh.vertices.copy()
    v[0] = [0.0, d]
    v[5] = [1.0, -d]
    two = Anchors([0, 4], [0, 0], np.tile([1.0, 0, 0], (2, 1)))
    shifted = mesh.with_vertices(v)
    assert np.allclose(barycentric_eval(shifted, two)[:, 1], [d, -d])
    assert np.isclose(e_line(shifted, two, [0, 0], [np.pi / 2], [0.0])[0], 2 * d * d / 2)


def test_all_zero_weights():
    state = random_state(0)
    rep = total_objective(state, WeightSchedule(lam=(0, 0, 0, 0, 0, 0)))
    assert rep.total == 0.0
    assert not rep.gradient().any()


def test_feature_free_state_reports_zero_line_terms():
    state = random_state(1)
    corr = Correspondences(state.corr.points, state.corr.anchors, state.corr.normals)
    rep = total_objective(SolverState(state.pair, np.zeros(0), np.zeros(0), corr), WeightSchedule())
    assert rep.terms["line"] == 0.0 and rep.terms["ray"] == 0.0


def test_schedule_validation_and_escalation():
    s = WeightSchedule()
    assert s.lam == (1.0, 1.0, 1e-4, 0.1, 1.0, 1.0)
    assert s.escalated().escalated().lam[4:] == (16.0, 16.0)
    assert s.without_features().lam[4:] == (0.0, 0.0)
    with pytest.raises(EnergyError):
        WeightSchedule(lam=(1, 1, 1, 1, 1))
    with pytest.raises(EnergyError):
        WeightSchedule(lam=(1, 1, 1, 1, 1, -1))


def test_gradcheck_passes_and_catches_sign_error():
    checks = run_gradcheck(0, n_pairs=2)
    assert all(c.passed for c in checks)
    assert {c.term for c in checks} == set(TERMS)
    bad = run_gradcheck(0, n_pairs=1, sign_error_term="iso")
    assert not all(c.passed for c in bad if c.term == "iso")
