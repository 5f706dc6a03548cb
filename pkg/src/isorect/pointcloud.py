"""Point clouds, exact closest-point queries against the 3D mesh, and noise filtering."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Anchors, QuadMesh

log = logging.getLogger(__name__)

DEFAULT_PHI = 0.06


class CloudError(ValueError):
    pass


@dataclass
class PointCloud:
    """Raw points with a validity mask.

    ``scale`` records the factor applied by :func:`normalize_cloud`; scaling is
    about the camera centre so every point stays on its viewing ray.
    """

    points: np.ndarray
    valid: np.ndarray | None = None
    scale: float = 1.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise CloudError("point cloud contains NaN or Inf")
        if self.valid is None:
            self.valid = np.ones(len(self.points), dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def diagonal(self) -> float:
        if not len(self.points):
            return 0.0
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Scale about the origin so the bounding-box diagonal is 1."""
    d = cloud.diagonal()
    if d <= 0:
        raise CloudError("cannot normalise a degenerate cloud")
    return PointCloud(cloud.points / d, cloud.valid.copy(), cloud.scale / d)


def load_cloud(path) -> PointCloud:
    """Read ``x y z`` per line (blank lines and ``#`` comments ignored)."""
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 3:
                raise CloudError(f"{path}:{lineno}: expected 'x y z'")
            try:
                rows.append([float(v) for v in parts[:3]])
            except ValueError:
                raise CloudError(f"{path}:{lineno}: not a number") from None
    pts = np.array(rows, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise CloudError(f"{path}: NaN or Inf coordinates")
    return PointCloud(pts)


def save_cloud(path, cloud: PointCloud) -> None:
    np.savetxt(path, cloud.points, fmt="%.17g")


# -- point / triangle primitives ---------------------------------------------------

def closest_point_triangle(p, a, b, c):
    """Closest points on triangles ``(a, b, c)`` to ``p`` (all ``(n, 3)``).

    Voronoi-region walk; returns ``(points, weights)`` with barycentric
    weights w.r.t. ``(a, b, c)``.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("nd,nd->n", ab, ap)
    d2 = np.einsum("nd,nd->n", ac, ap)
    bp = p - b
    d3 = np.einsum("nd,nd->n", ab, bp)
    d4 = np.einsum("nd,nd->n", ac, bp)
    cp = p - c
    d5 = np.einsum("nd,nd->n", ab, cp)
    d6 = np.einsum("nd,nd->n", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n = len(p)
    w = np.zeros((n, 3))
    done = np.zeros(n, dtype=bool)

    def assign(mask, weights):
        m = mask & ~done
        w[m] = weights[m] if np.ndim(weights) == 2 else weights
        done[m] = True

    def safe(x):
        return np.where(x != 0, x, 1.0)

    one = np.ones(n)
    zero = np.zeros(n)
    assign((d1 <= 0) & (d2 <= 0), np.array([1.0, 0.0, 0.0]))
    assign((d3 >= 0) & (d4 <= d3), np.array([0.0, 1.0, 0.0]))
    assign((d6 >= 0) & (d5 <= d6), np.array([0.0, 0.0, 1.0]))
    t = d1 / safe(d1 - d3)
    assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), np.column_stack([1 - t, t, zero]))
    t = d2 / safe(d2 - d6)
    assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.column_stack([1 - t, zero, t]))
    t = (d4 - d3) / safe((d4 - d3) + (d5 - d6))
    assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), np.column_stack([zero, 1 - t, t]))
    denom = safe(va + vb + vc)
    v = vb / denom
    ww = vc / denom
    assign(one > 0, np.column_stack([1 - v - ww, v, ww]))
    pts = w[:, :1] * a + w[:, 1:2] * b + w[:, 2:3] * c
    return pts, w


def triangle_normals(tri: np.ndarray) -> np.ndarray:
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


class MeshProximity:
    """Exact closest-point queries on a 3D quad mesh.

    Triangle centroids go into a KD-tree; any triangle can only beat the
    current best if its centroid lies within ``best + R`` of the query, with
    ``R`` the largest centroid-to-vertex distance.  Candidates are expanded
    until that bound is met, so the answer matches an exhaustive search.
    """

    def __init__(self, mesh: QuadMesh, k0: int = 24):
        if mesh.dim != 3:
            raise CloudError("closest-point queries need the 3D mesh")
        self.mesh = mesh
        self.tri = mesh.triangle_coords()
        self.centroids = self.tri.mean(axis=1)
        self.radius = float(np.linalg.norm(self.tri - self.centroids[:, None], axis=2).max())
        self.tree = cKDTree(self.centroids)
        self.normals = triangle_normals(self.tri)
        self.k0 = min(k0, len(self.tri))

    def _best_of(self, pts, pidx, tidx):
        tri = self.tri[tidx]
        cp, w = closest_point_triangle(pts[pidx], tri[:, 0], tri[:, 1], tri[:, 2])
        d2 = ((pts[pidx] - cp) ** 2).sum(axis=1)
        # per point: minimal distance, ties to the lowest triangle index
        order = np.lexsort((tidx, d2, pidx))
        pidx, tidx, d2, cp, w = pidx[order], tidx[order], d2[order], cp[order], w[order]
        first = np.ones(len(pidx), dtype=bool)
        first[1:] = pidx[1:] != pidx[:-1]
        return pidx[first], tidx[first], d2[first], cp[first], w[first]

    def query(self, pts, cutoff: float | None = None):
        """Return ``(anchors, footpoints, normals, distances)`` for ``(n, 3)`` points.

        With ``cutoff`` set, points whose distance provably exceeds it skip the
        exact search; their results come from the nearest candidates only and
        their reported distance is still greater than ``cutoff``.
        """
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        n = len(pts)
        if n == 0:
            return Anchors.empty(), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
        k = self.k0
        cd, ci = self.tree.query(pts, k=k)
        cd = cd.reshape(n, -1)
        ci = ci.reshape(n, -1)
        tri = self.tri[ci.ravel()]
        cp, w = closest_point_triangle(np.repeat(pts, k, axis=0), tri[:, 0], tri[:, 1], tri[:, 2])
        d2 = ((np.repeat(pts, k, axis=0) - cp) ** 2).sum(axis=1).reshape(n, k)
        # minimal distance, ties to the lowest triangle index
        dmin = d2.min(axis=1, keepdims=True)
        col = np.where(d2 == dmin, ci, np.iinfo(np.int64).max).argmin(axis=1)
        rows = np.arange(n)
        sel = rows * k + col
        best_t = ci[rows, col].astype(np.int64)
        best_d2 = d2[rows, col]
        best_cp = cp[sel]
        best_w = w[sel]
        dist = np.sqrt(best_d2)
        # triangles not yet examined all have centroid distance >= cd[:, -1]
        if k < len(self.tri):
            need = cd[:, -1] <= dist + self.radius
            if cutoff is not None:
                # every unexamined triangle is at least cd[:, -1] - radius away
                need &= ~(np.minimum(dist, cd[:, -1] - self.radius) > cutoff)
            unsure = np.flatnonzero(need)
            if len(unsure):
                lists = self.tree.query_ball_point(pts[unsure], dist[unsure] + self.radius * (1 + 1e-9))
                counts = np.array([len(l) for l in lists])
                pidx = np.repeat(unsure, counts)
                if len(pidx):
                    tidx = np.concatenate([np.asarray(l, dtype=np.int64) for l in lists])
                    q, t2, d22, cp2, w2 = self._best_of(pts, pidx, tidx)
                    better = (d22 < best_d2[q]) | ((d22 == best_d2[q]) & (t2 < best_t[q]))
                    q, t2, d22, cp2, w2 = q[better], t2[better], d22[better], cp2[better], w2[better]
                    best_t[q] = t2
                    best_d2[q] = d22
                    best_cp[q] = cp2
                    best_w[q] = w2
        anchors = Anchors(best_t // 2, best_t % 2, best_w)
        return anchors, best_cp, self.normals[best_t], np.sqrt(best_d2)


def closest_point_on_mesh(mesh3d: QuadMesh, x):
    """Footpoint data for a single point: ``(anchor, footpoint, normal, distance)``."""
    anchors, foot, normals, dist = MeshProximity(mesh3d).query(np.asarray(x, dtype=float).reshape(1, 3))
    return anchors.to_list()[0], foot[0], normals[0], float(dist[0])


def filter_noise(cloud: PointCloud, mesh3d: QuadMesh, phi: float = DEFAULT_PHI,
                 proximity: MeshProximity | None = None) -> np.ndarray:
    """Validity mask: points within ``phi`` of the mesh."""
    if proximity is None:
        proximity = MeshProximity(mesh3d)
    if np.isinf(phi):
        return np.ones(len(cloud), dtype=bool)
    _, _, _, dist = proximity.query(cloud.points)
    # an empty mask is a legal answer here; the pipeline raises when it meets one
    return dist <= phi


def knn(points, query, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points to each query (ties broken by lower index).

    ``query`` may be a single point or ``(m, d)``; returns ``(k,)`` or ``(m, k)``.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or len(points) == 0:
        raise CloudError("knn needs a non-empty point set")
    if not 1 <= k <= len(points):
        raise CloudError(f"k={k} must be in [1, {len(points)}]")
    q = np.asarray(query, dtype=float)
    single = q.ndim == 1
    q = q.reshape(-1, points.shape[1])
    tree = cKDTree(points)
    return _knn_tree(tree, points, q, k)[0] if single else _knn_tree(tree, points, q, k)


def _knn_tree(tree: cKDTree, points: np.ndarray, q: np.ndarray, k: int) -> np.ndarray:
    extra = min(len(points), k + 4)
    d, idx = tree.query(q, k=extra)
    d = d.reshape(len(q), -1)
    idx = idx.reshape(len(q), -1)
    out = np.empty((len(q), k), dtype=np.int64)
    # exact distances so that ordering does not depend on the tree's arithmetic
    dd = ((points[idx] - q[:, None, :]) ** 2).sum(axis=-1)
    for r in range(len(q)):
        row_d, row_i = dd[r], idx[r]
        kth = np.sort(row_d)[k - 1]
        if extra < len(points) and row_d.max() <= kth:
            # ties may extend beyond what was fetched
            cand = np.asarray(tree.query_ball_point(q[r], np.sqrt(kth) * (1 + 1e-12) + 1e-300), dtype=np.int64)
            row_i = cand
            row_d = ((points[cand] - q[r]) ** 2).sum(axis=-1)
        o = np.lexsort((row_i, row_d))[:k]
        out[r] = row_i[o]
    return out


class PixelKnn:
    """k-nearest lookups among fixed 2D sites (cloud projections in the image)."""

    def __init__(self, sites):
        self.sites = np.asarray(sites, dtype=float).reshape(-1, 2)
        if not len(self.sites):
            raise CloudError("no sites")
        self.tree = cKDTree(self.sites)

    def query(self, q, k: int) -> np.ndarray:
        return _knn_tree(self.tree, self.sites, np.asarray(q, dtype=float).reshape(-1, 2), k)
