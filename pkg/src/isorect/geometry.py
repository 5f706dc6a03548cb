"""Quad-grid meshes, barycentric anchors and small planar geometry helpers.

A document mesh is a regular ``(N1, N2)`` grid of vertices stored row-major
(vertex ``(i, j)`` lives at flat index ``i * N2 + j``).  Face ``(i, j)`` is the
quad ``v0=(i, j), v1=(i+1, j), v2=(i+1, j+1), v3=(i, j+1)`` and is split along
the ``v0-v2`` diagonal into triangle 0 ``(v0, v1, v2)`` and triangle 1
``(v0, v2, v3)``.  Every barycentric quantity in the package uses that split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import ConvexHull, QhullError

log = logging.getLogger(__name__)

# corner offsets (di, dj) of the quad corners v0..v3
QUAD_OFFSETS = ((0, 0), (1, 0), (1, 1), (0, 1))
# corner slots of the two triangles of a quad
TRI_CORNERS = np.array([[0, 1, 2], [0, 2, 3]])


class MeshError(ValueError):
    """Structural problem with a mesh or an anchor."""


@dataclass
class QuadMesh:
    """Regular quad grid; ``vertices`` has shape ``(N1*N2, d)`` with d = 2 or 3."""

    dims: tuple[int, int]
    vertices: np.ndarray

    def __post_init__(self):
        n1, n2 = self.dims
        if n1 < 2 or n2 < 2:
            raise MeshError(f"grid must be at least 2x2, got {self.dims}")
        self.dims = (int(n1), int(n2))
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim == 3:
            v = v.reshape(-1, v.shape[-1])
        if v.shape[0] != n1 * n2 or v.shape[1] not in (2, 3):
            raise MeshError(f"vertex array {v.shape} does not fit dims {self.dims}")
        self.vertices = v

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def is_planar(self) -> bool:
        return self.dim == 2

    @property
    def n_vertices(self) -> int:
        return self.dims[0] * self.dims[1]

    @property
    def n_faces(self) -> int:
        return (self.dims[0] - 1) * (self.dims[1] - 1)

    def grid(self) -> np.ndarray:
        """Vertices as an ``(N1, N2, d)`` view."""
        return self.vertices.reshape(self.dims[0], self.dims[1], -1)

    def copy(self) -> "QuadMesh":
        return QuadMesh(self.dims, self.vertices.copy())

    def with_vertices(self, vertices: np.ndarray) -> "QuadMesh":
        return QuadMesh(self.dims, np.array(vertices, dtype=float).reshape(self.vertices.shape))

    def faces(self) -> np.ndarray:
        return face_vertex_indices(self.dims)

    def triangles(self) -> np.ndarray:
        """Vertex indices of all triangles, shape ``(2 * n_faces, 3)``.

        Triangle ``2 * f + t`` is triangle ``t`` of face ``f``.
        """
        return triangle_vertex_indices(self.dims)

    def triangle_coords(self) -> np.ndarray:
        return self.vertices[self.triangles()]

    def boundary_indices(self) -> np.ndarray:
        """Vertex indices of the grid border, counterclockwise from vertex 0."""
        n1, n2 = self.dims
        idx = np.arange(n1 * n2).reshape(n1, n2)
        return np.concatenate([idx[:, 0], idx[-1, 1:], idx[-2::-1, -1], idx[0, -2:0:-1]])

    def edge_lengths(self) -> np.ndarray:
        g = self.grid()
        a = np.linalg.norm(np.diff(g, axis=0), axis=-1).ravel()
        b = np.linalg.norm(np.diff(g, axis=1), axis=-1).ravel()
        return np.concatenate([a, b])


@dataclass
class MeshPair:
    """The 3D document mesh and its planar unfolding, sharing connectivity."""

    space: QuadMesh
    plane: QuadMesh

    def __post_init__(self):
        if self.space.dims != self.plane.dims:
            raise MeshError(f"mesh dims differ: {self.space.dims} vs {self.plane.dims}")
        if self.space.dim != 3 or self.plane.dim != 2:
            raise MeshError("MeshPair needs a 3D space mesh and a 2D plane mesh")

    @property
    def dims(self) -> tuple[int, int]:
        return self.space.dims

    def copy(self) -> "MeshPair":
        return MeshPair(self.space.copy(), self.plane.copy())


@lru_cache(maxsize=16)
def _face_vertex_indices(n1: int, n2: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(n1 - 1), np.arange(n2 - 1), indexing="ij")
    i, j = i.ravel(), j.ravel()
    f = np.stack([(i + di) * n2 + (j + dj) for di, dj in QUAD_OFFSETS], axis=1)
    f.setflags(write=False)
    return f


def face_vertex_indices(dims: tuple[int, int]) -> np.ndarray:
    """``(n_faces, 4)`` vertex indices of the quads v0..v3 (cached, read-only)."""
    return _face_vertex_indices(int(dims[0]), int(dims[1]))


def triangle_vertex_indices(dims: tuple[int, int]) -> np.ndarray:
    f = face_vertex_indices(dims)
    return f[:, TRI_CORNERS].reshape(-1, 3)


def grid_mesh(dims: tuple[int, int], origin=(0.0, 0.0), spacing=(1.0, 1.0)) -> QuadMesh:
    """Uniform planar grid: vertex (i, j) at ``origin + (i*sx, j*sy)``."""
    n1, n2 = dims
    i, j = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
    xy = np.stack([origin[0] + i * spacing[0], origin[1] + j * spacing[1]], axis=-1)
    return QuadMesh(dims, xy.reshape(-1, 2))


@dataclass
class BarycentricAnchor:
    """A material point: triangle ``triangle`` of quad ``face`` with weights ``weights``."""

    face: int
    triangle: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (3,):
            raise MeshError("anchor needs exactly three weights")
        if self.triangle not in (0, 1):
            raise MeshError(f"triangle slot must be 0 or 1, got {self.triangle}")
        if abs(w.sum() - 1.0) > 1e-12 or w.min() < -1e-12 or w.max() > 1 + 1e-12:
            raise MeshError(f"invalid barycentric weights {w}")
        self.weights = w


@dataclass
class Anchors:
    """A batch of barycentric anchors (vectorised form used by the solver)."""

    face: np.ndarray
    tri: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.face = np.asarray(self.face, dtype=np.int64).reshape(-1)
        self.tri = np.asarray(self.tri, dtype=np.int64).reshape(-1)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.face)

    def __getitem__(self, key) -> "Anchors":
        return Anchors(self.face[key], self.tri[key], self.weights[key])

    @classmethod
    def empty(cls) -> "Anchors":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)))

    @classmethod
    def from_list(cls, anchors: list[BarycentricAnchor]) -> "Anchors":
        if not anchors:
            return cls.empty()
        return cls([a.face for a in anchors], [a.triangle for a in anchors],
                   [a.weights for a in anchors])

    @classmethod
    def concat(cls, parts: list["Anchors"]) -> "Anchors":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.face for p in parts]), np.concatenate([p.tri for p in parts]),
                   np.concatenate([p.weights for p in parts]))

    def to_list(self) -> list[BarycentricAnchor]:
        return [BarycentricAnchor(int(f), int(t), w) for f, t, w in zip(self.face, self.tri, self.weights)]

    def copy(self) -> "Anchors":
        return Anchors(self.face.copy(), self.tri.copy(), self.weights.copy())

    def vertex_indices(self, dims: tuple[int, int]) -> np.ndarray:
        """``(n, 3)`` vertex indices of each anchor's triangle."""
        faces = face_vertex_indices(dims)
        n_faces = faces.shape[0]
        if len(self.face) and (self.face.min() < 0 or self.face.max() >= n_faces):
            raise MeshError("anchor face index out of range")
        return faces[self.face[:, None], TRI_CORNERS[self.tri]]


def barycentric_eval(mesh: QuadMesh, anchor: BarycentricAnchor | Anchors) -> np.ndarray:
    """Position of an anchor (or a batch of anchors) on ``mesh``."""
    single = isinstance(anchor, BarycentricAnchor)
    batch = Anchors.from_list([anchor]) if single else anchor
    if len(batch) == 0:
        return np.zeros((0, mesh.dim))
    idx = batch.vertex_indices(mesh.dims)
    pts = np.einsum("nk,nkd->nd", batch.weights, mesh.vertices[idx])
    return pts[0] if single else pts


def barycentric_2d(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Barycentric coordinates of 2D points ``p`` w.r.t. triangles ``(a, b, c)``.

    Returns ``(weights, det)``; weights are undefined where ``det`` is ~0.
    """
    e1 = b - a
    e2 = c - a
    r = p - a
    det = e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0]
    safe = np.where(np.abs(det) > 0, det, 1.0)
    wb = (r[..., 0] * e2[..., 1] - r[..., 1] * e2[..., 0]) / safe
    wc = (e1[..., 0] * r[..., 1] - e1[..., 1] * r[..., 0]) / safe
    return np.stack([1.0 - wb - wc, wb, wc], axis=-1), det


class TriangleGrid:
    """Uniform-grid bucket index over 2D triangles for batched point location.

    ``tris`` is ``(T, 3, 2)``.  Queries return, per point, the first triangle
    (lowest index) containing it, with barycentric weights.
    """

    def __init__(self, tris: np.ndarray, cells_per_tri: float = 1.0, area_eps: float = 1e-14):
        tris = np.asarray(tris, dtype=float)
        self.tris = tris
        lo = tris.min(axis=1)
        hi = tris.max(axis=1)
        e1 = tris[:, 1] - tris[:, 0]
        e2 = tris[:, 2] - tris[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        scale = np.maximum(np.abs(e1).max(axis=1), np.abs(e2).max(axis=1))
        self.valid = np.abs(det) > area_eps * np.maximum(scale, 1e-300) ** 2
        n_bad = int((~self.valid).sum())
        if n_bad:
            log.warning("skipping %d degenerate triangles in point location", n_bad)
        self.lo = lo.min(axis=0) if len(tris) else np.zeros(2)
        span = (hi.max(axis=0) - self.lo) if len(tris) else np.ones(2)
        span = np.maximum(span, 1e-12)
        typical = np.median(hi - lo, axis=0) if len(tris) else np.ones(2)
        cell = np.maximum(np.maximum(typical, span / 2048.0) * cells_per_tri, 1e-12)
        self.shape = np.minimum(np.ceil(span / cell).astype(int) + 1, 4096)
        self.cell = span / np.maximum(self.shape - 1, 1)
        self.cell = np.where(self.cell > 0, self.cell, 1.0)

        c0 = self._cell_of(lo)
        c1 = self._cell_of(hi)
        ids = np.flatnonzero(self.valid)
        tri_ids, cell_ids = [], []
        nx = c1[ids, 0] - c0[ids, 0] + 1
        ny = c1[ids, 1] - c0[ids, 1] + 1
        for dx in range(int(nx.max()) if len(ids) else 0):
            for dy in range(int(ny.max())):
                m = (dx < nx) & (dy < ny)
                t = ids[m]
                cx = c0[t, 0] + dx
                cy = c0[t, 1] + dy
                tri_ids.append(t)
                cell_ids.append(cx * self.shape[1] + cy)
        if tri_ids:
            tri_ids = np.concatenate(tri_ids)
            cell_ids = np.concatenate(cell_ids)
        else:
            tri_ids = np.zeros(0, np.int64)
            cell_ids = np.zeros(0, np.int64)
        order = np.lexsort((tri_ids, cell_ids))
        self.cell_tris = tri_ids[order]
        n_cells = int(self.shape[0] * self.shape[1])
        counts = np.bincount(cell_ids, minlength=n_cells)
        self.start = np.concatenate([[0], np.cumsum(counts)])

    def _cell_of(self, p: np.ndarray) -> np.ndarray:
        c = np.floor((p - self.lo) / self.cell).astype(np.int64)
        return np.clip(c, 0, self.shape - 1)

    def candidates(self, pts: np.ndarray):
        """Flattened (point index, triangle index) candidate pairs."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        c = self._cell_of(pts)
        inside = np.all((pts >= self.lo - self.cell) & (pts <= self.lo + self.cell * self.shape), axis=1)
        cid = c[:, 0] * self.shape[1] + c[:, 1]
        s = self.start[cid]
        n = np.where(inside, self.start[cid + 1] - s, 0)
        pidx = np.repeat(np.arange(len(pts)), n)
        offs = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
        tidx = self.cell_tris[np.repeat(s, n) + offs]
        return pidx, tidx

    def locate(self, pts: np.ndarray, tol: float = 1e-12):
        """Return ``(tri_index, weights)``; ``tri_index`` is -1 where no triangle contains the point."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        out_t = np.full(len(pts), -1, dtype=np.int64)
        out_w = np.zeros((len(pts), 3))
        pidx, tidx = self.candidates(pts)
        if len(pidx) == 0:
            return out_t, out_w
        t = self.tris[tidx]
        w, _ = barycentric_2d(pts[pidx], t[:, 0], t[:, 1], t[:, 2])
        ok = np.all(w >= -tol, axis=1)
        pidx, tidx, w = pidx[ok], tidx[ok], w[ok]
        # first hit per point in (point, triangle) order
        order = np.lexsort((tidx, pidx))
        pidx, tidx, w = pidx[order], tidx[order], w[order]
        first = np.ones(len(pidx), dtype=bool)
        first[1:] = pidx[1:] != pidx[:-1]
        pidx, tidx, w = pidx[first], tidx[first], w[first]
        w = np.clip(w, 0.0, None)
        w /= w.sum(axis=1, keepdims=True)
        out_t[pidx] = tidx
        out_w[pidx] = w
        return out_t, out_w


def locate_points(mesh2d: QuadMesh, pts: np.ndarray, index: TriangleGrid | None = None):
    """Batched point location on a planar mesh.

    Returns ``(anchors, found)``; rows where ``found`` is False carry a dummy anchor.
    """
    if not mesh2d.is_planar:
        raise MeshError("point location needs the planar mesh")
    if index is None:
        index = TriangleGrid(mesh2d.triangle_coords())
    t, w = index.locate(pts)
    found = t >= 0
    t = np.where(found, t, 0)
    w = np.where(found[:, None], w, np.array([1.0, 0.0, 0.0]))
    return Anchors(t // 2, t % 2, w), found


def locate_point(mesh2d: QuadMesh, p) -> BarycentricAnchor | None:
    """Anchor of a single planar point, or ``None`` when it lies outside all faces."""
    anchors, found = locate_points(mesh2d, np.asarray(p, dtype=float).reshape(1, 2))
    if not found[0]:
        return None
    return anchors.to_list()[0]


@dataclass
class OrientedBox:
    center: np.ndarray
    axes: np.ndarray  # rows are the major and minor axis
    extents: tuple[float, float]  # (w, h) half lengths, w >= h

    @property
    def straightness(self) -> float:
        """h / w; 0 for a perfectly straight point set."""
        w, h = self.extents
        return h / w if w > 0 else 0.0

    def corners(self) -> np.ndarray:
        w, h = self.extents
        a, b = self.axes
        return np.array([self.center + sx * w * a + sy * h * b
                         for sx, sy in ((-1, -1), (1, -1), (1, 1), (-1, 1))])


def obb_of_points(points) -> OrientedBox:
    """Oriented bounding box with axes along the principal directions of ``points``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        raise ValueError("an oriented box needs at least two points")
    mean = pts.mean(axis=0)
    cov = np.cov((pts - mean).T, bias=True)
    if not np.any(cov):
        return OrientedBox(mean, np.eye(2), (0.0, 0.0))
    _, vecs = np.linalg.eigh(cov)
    major = vecs[:, 1]
    # canonical sign so that the box does not depend on eigen-solver sign flips
    if major[0] < 0 or (major[0] == 0 and major[1] < 0):
        major = -major
    minor = np.array([-major[1], major[0]])
    axes = np.stack([major, minor])
    local = (pts - mean) @ axes.T
    lo, hi = local.min(axis=0), local.max(axis=0)
    ext = (hi - lo) / 2.0
    center = mean + ((hi + lo) / 2.0) @ axes
    w, h = float(ext[0]), float(ext[1])
    if h > w:
        axes = np.stack([minor, -major])
        w, h = h, w
    return OrientedBox(center, axes, (w, h))


def min_area_box(points) -> OrientedBox:
    """Smallest-area enclosing rectangle (rotating calipers over the convex hull edges)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 3:
        return obb_of_points(pts)
    try:
        hull = pts[ConvexHull(pts).vertices]
    except QhullError:
        return obb_of_points(pts)
    edges = np.roll(hull, -1, axis=0) - hull
    ang = np.unique(np.round(np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2), 12))
    best = None
    for a in ang:
        major = np.array([np.cos(a), np.sin(a)])
        axes = np.stack([major, [-major[1], major[0]]])
        local = hull @ axes.T
        lo, hi = local.min(axis=0), local.max(axis=0)
        area = float(np.prod(hi - lo))
        if best is None or area < best[0] - 1e-15 * max(area, 1.0):
            best = (area, axes, lo, hi)
    _, axes, lo, hi = best
    ext = (hi - lo) / 2.0
    center = ((hi + lo) / 2.0) @ axes
    if ext[1] > ext[0]:
        axes = np.stack([axes[1], -axes[0]])
        ext = ext[::-1]
    return OrientedBox(center, axes, (float(ext[0]), float(ext[1])))


def rotation_2d(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def similarity_align(src: np.ndarray, dst: np.ndarray, allow_reflection: bool = False):
    """Least-squares similarity transform (Umeyama) mapping ``src`` onto ``dst``.

    Returns ``(scale, R, t)`` with ``dst ~ scale * src @ R.T + t``.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    cov = b.T @ a / len(src)
    u, s, vt = np.linalg.svd(cov)
    d = np.ones(len(s))
    if not allow_reflection and np.linalg.det(u @ vt) < 0:
        d[-1] = -1
    r = u @ np.diag(d) @ vt
    var = (a ** 2).sum() / len(src)
    scale = float((s * d).sum() / var) if var > 0 else 1.0
    t = mu_d - scale * mu_s @ r.T
    return scale, r, t


# -- OBJ-style text exchange -------------------------------------------------

def write_obj(path, mesh: QuadMesh) -> None:
    """Write ``v x y z`` lines then 1-based ``f i j k l`` quads; a ``# dims`` header keeps the grid."""
    v = mesh.vertices
    if mesh.is_planar:
        v = np.column_stack([v, np.zeros(len(v))])
    lines = [f"# dims {mesh.dims[0]} {mesh.dims[1]}"]
    lines += [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in v]
    lines += ["f " + " ".join(str(k + 1) for k in f) for f in mesh.faces()]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_obj(path, planar: bool | None = None) -> QuadMesh:
    dims = None
    verts = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "#" and len(parts) >= 4 and parts[1] == "dims":
                dims = (int(parts[2]), int(parts[3]))
            elif parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
    if dims is None:
        raise MeshError(f"{path}: missing '# dims N1 N2' header")
    v = np.array(verts, dtype=float)
    if planar is None:
        planar = bool(np.all(v[:, 2] == 0.0))
    return QuadMesh(dims, v[:, :2] if planar else v)
