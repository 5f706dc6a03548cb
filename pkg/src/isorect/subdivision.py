"""Catmull-Clark refinement of a regular quad grid, applied to both meshes of a pair."""

from __future__ import annotations

import logging

import numpy as np

from .geometry import Anchors, MeshPair, QuadMesh, TriangleGrid, barycentric_eval, locate_points
from .pointcloud import closest_point_triangle

log = logging.getLogger(__name__)


def _bspline_curve(c: np.ndarray) -> np.ndarray:
    """One cubic B-spline refinement step of an open polyline with pinned ends.

    ``c`` has shape ``(n, d)``; returns ``(2n - 1, d)``.
    """
    out = np.empty((2 * len(c) - 1, c.shape[1]))
    out[1::2] = 0.5 * (c[:-1] + c[1:])
    out[0] = c[0]
    out[-1] = c[-1]
    out[2:-1:2] = (c[:-2] + 6 * c[1:-1] + c[2:]) / 8.0
    return out


def subdivide_grid(g: np.ndarray) -> np.ndarray:
    """Catmull-Clark on an ``(N1, N2, d)`` grid -> ``(2N1-1, 2N2-1, d)``.

    Interior rules are the standard valence-4 stencils; the border is refined
    as a cubic B-spline curve with interpolated corners.
    """
    n1, n2, d = g.shape
    out = np.empty((2 * n1 - 1, 2 * n2 - 1, d))
    face = 0.25 * (g[:-1, :-1] + g[1:, :-1] + g[1:, 1:] + g[:-1, 1:])
    out[1::2, 1::2] = face

    # edges along axis 0 (between (i, j) and (i+1, j)) and along axis 1
    mid0 = 0.5 * (g[:-1] + g[1:])
    mid1 = 0.5 * (g[:, :-1] + g[:, 1:])
    e0 = mid0.copy()
    e0[:, 1:-1] = 0.25 * (g[:-1, 1:-1] + g[1:, 1:-1] + face[:, :-1] + face[:, 1:])
    e1 = mid1.copy()
    e1[1:-1, :] = 0.25 * (g[1:-1, :-1] + g[1:-1, 1:] + face[:-1, :] + face[1:, :])
    out[1::2, ::2] = e0
    out[::2, 1::2] = e1

    # interior vertices: (F + 2 E + V) / 4 with F, E the mean face points and edge midpoints
    fv = 0.25 * (face[:-1, :-1] + face[1:, :-1] + face[1:, 1:] + face[:-1, 1:])
    ev = 0.25 * (mid0[:-1, 1:-1] + mid0[1:, 1:-1] + mid1[1:-1, :-1] + mid1[1:-1, 1:])
    out[2:-1:2, 2:-1:2] = (fv + 2 * ev + g[1:-1, 1:-1]) / 4.0

    out[:, 0] = _bspline_curve(g[:, 0])
    out[:, -1] = _bspline_curve(g[:, -1])
    out[0, :] = _bspline_curve(g[0, :])
    out[-1, :] = _bspline_curve(g[-1, :])
    return out


def subdivide_mesh(mesh: QuadMesh) -> QuadMesh:
    n1, n2 = mesh.dims
    return QuadMesh((2 * n1 - 1, 2 * n2 - 1), subdivide_grid(mesh.grid()))


def subdivide_pair(pair: MeshPair) -> MeshPair:
    return MeshPair(subdivide_mesh(pair.space), subdivide_mesh(pair.plane))


def _clamp_to_mesh(plane: QuadMesh, pts: np.ndarray) -> Anchors:
    """Anchors of the closest points on ``plane`` (treated in 3D with z = 0)."""
    tri = plane.triangle_coords()
    tri3 = np.concatenate([tri, np.zeros(tri.shape[:2] + (1,))], axis=2)
    p3 = np.column_stack([pts, np.zeros(len(pts))])
    faces, tris, ws = [], [], []
    for p in p3:
        cp, w = closest_point_triangle(np.broadcast_to(p, (len(tri3), 3)), tri3[:, 0], tri3[:, 1], tri3[:, 2])
        k = int(np.argmin(((cp - p) ** 2).sum(axis=1)))
        faces.append(k // 2)
        tris.append(k % 2)
        ws.append(w[k])
    return Anchors(faces, tris, ws)


def remap_anchors(old: MeshPair, new: MeshPair, anchors: Anchors) -> Anchors:
    """Re-express anchors on the refined pair by their planar position.

    Points that fall outside the refined planar mesh (its border shrinks under
    the B-spline rule) are clamped to the nearest point of the mesh.
    """
    if len(anchors) == 0:
        return Anchors.empty()
    pts = barycentric_eval(old.plane, anchors)
    out, found = locate_points(new.plane, pts, TriangleGrid(new.plane.triangle_coords()))
    if not found.all():
        miss = np.flatnonzero(~found)
        log.warning("remap: %d anchors fell outside the refined mesh and were clamped", len(miss))
        clamped = _clamp_to_mesh(new.plane, pts[miss])
        out.face[miss] = clamped.face
        out.tri[miss] = clamped.tri
        out.weights[miss] = clamped.weights
    return out
