"""Pinhole camera at the origin looking down +z, viewing rays and ray casting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Anchors, BarycentricAnchor, QuadMesh, TriangleGrid

PARALLEL_EPS = 1e-12


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    ku: float
    kv: float
    cu: float
    cv: float

    def __post_init__(self):
        vals = (self.f, self.ku, self.kv, self.cu, self.cv)
        if not all(np.isfinite(vals)):
            raise CameraError("intrinsics must be finite")
        if self.f * self.ku <= 0 or self.f * self.kv <= 0:
            raise CameraError("f*ku and f*kv must be positive")

    @property
    def fu(self) -> float:
        return self.f * self.ku

    @property
    def fv(self) -> float:
        return self.f * self.kv

    def matrix(self) -> np.ndarray:
        return np.array([[self.fu, 0.0, self.cu], [0.0, self.fv, self.cv], [0.0, 0.0, 1.0]])


def project(cam: CameraIntrinsics, p) -> np.ndarray:
    """Pixel coordinates ``(u, v)`` of 3D point(s) ``p`` (shape ``(3,)`` or ``(n, 3)``)."""
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(z <= 0):
        raise CameraError("point behind the camera (z <= 0)")
    return np.stack([cam.fu * p[..., 0] / z + cam.cu, cam.fv * p[..., 1] / z + cam.cv], axis=-1)


def back_project(cam: CameraIntrinsics, pixel, z) -> np.ndarray:
    """3D point(s) at depth ``z`` seen at ``pixel``."""
    pixel = np.asarray(pixel, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise CameraError("depth must be positive")
    x = (pixel[..., 0] - cam.cu) * z / cam.fu
    y = (pixel[..., 1] - cam.cv) * z / cam.fv
    return np.stack([x, y, np.broadcast_to(z, x.shape)], axis=-1)


@dataclass
class ViewingRays:
    """Unit directions through the camera centre plus two normals spanning their complement.

    A point ``p`` lies on ray ``k`` iff ``n1[k]·p = n2[k]·p = 0``; the squared
    pair is the squared distance from ``p`` to the line.
    """

    direction: np.ndarray
    n1: np.ndarray
    n2: np.ndarray

    def __len__(self) -> int:
        return len(self.direction)

    def __getitem__(self, key) -> "ViewingRays":
        return ViewingRays(self.direction[key], self.n1[key], self.n2[key])

    def residual(self, p: np.ndarray) -> np.ndarray:
        """``(n, 2)`` point-on-ray residuals."""
        return np.stack([np.einsum("nd,nd->n", self.n1, p), np.einsum("nd,nd->n", self.n2, p)], axis=1)

    @classmethod
    def concat(cls, parts: list["ViewingRays"]) -> "ViewingRays":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(*(np.concatenate([getattr(p, k) for p in parts]) for k in ("direction", "n1", "n2")))


def viewing_rays(cam: CameraIntrinsics, pixels) -> ViewingRays:
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    d = back_project(cam, pixels, np.ones(len(pixels)))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    # d.z > 0 always, so (d x ex) is never degenerate unless d is parallel to ex
    helper = np.where(np.abs(d[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    n1 = np.cross(d, helper)
    n1 /= np.linalg.norm(n1, axis=1, keepdims=True)
    n2 = np.cross(d, n1)
    return ViewingRays(d, n1, n2)


def viewing_ray(cam: CameraIntrinsics, pixel) -> ViewingRays:
    """Ray through a single pixel (returned as a batch of one)."""
    return viewing_rays(cam, np.asarray(pixel, dtype=float).reshape(1, 2))


def ray_triangle(d: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray, origin=None):
    """Vectorised Möller–Trumbore for rays from ``origin`` (default: camera centre).

    Returns ``(t, u, v, ok)`` where the hit is ``a + u (b-a) + v (c-a)``.
    """
    e1 = b - a
    e2 = c - a
    pvec = np.cross(d, e2)
    det = np.einsum("nd,nd->n", e1, pvec)
    ok = np.abs(det) >= PARALLEL_EPS
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    o = np.zeros_like(a) if origin is None else origin
    tvec = o - a
    u = np.einsum("nd,nd->n", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("nd,nd->n", d, qvec) * inv
    t = np.einsum("nd,nd->n", e2, qvec) * inv
    return t, u, v, ok


class MeshRayCaster:
    """Casts camera rays against a 3D quad mesh.

    Candidate triangles come from a bucket grid over the triangles projected
    into normalised image coordinates; hits are then confirmed in 3D.  Triangles
    with a vertex at or behind the camera plane are tested exhaustively.
    """

    def __init__(self, mesh: QuadMesh, tol: float = 1e-9):
        if mesh.dim != 3:
            raise CameraError("ray casting needs the 3D mesh")
        self.mesh = mesh
        self.tol = tol
        self.tri_xyz = mesh.triangle_coords()
        z = self.tri_xyz[..., 2]
        front = np.all(z > 1e-12, axis=1)
        self.front_ids = np.flatnonzero(front)
        self.back_ids = np.flatnonzero(~front)
        proj = self.tri_xyz[self.front_ids, :, :2] / z[self.front_ids, :, None]
        self.grid = TriangleGrid(proj, area_eps=0.0) if len(self.front_ids) else None

    def cast(self, rays: ViewingRays):
        """Return ``(anchors, t, hit)`` for the nearest positive hit of every ray."""
        d = rays.direction
        n = len(d)
        best_t = np.full(n, np.inf)
        best_tri = np.full(n, -1, dtype=np.int64)
        best_uv = np.zeros((n, 2))

        pairs = []
        if self.grid is not None and n:
            q = d[:, :2] / d[:, 2:3]
            pidx, local = self.grid.candidates(q)
            pairs.append((pidx, self.front_ids[local]))
        if len(self.back_ids) and n:
            pidx = np.repeat(np.arange(n), len(self.back_ids))
            pairs.append((pidx, np.tile(self.back_ids, n)))
        for pidx, tidx in pairs:
            if not len(pidx):
                continue
            tri = self.tri_xyz[tidx]
            t, u, v, ok = ray_triangle(d[pidx], tri[:, 0], tri[:, 1], tri[:, 2])
            tol = self.tol
            ok &= (u >= -tol) & (v >= -tol) & (u + v <= 1 + tol) & (t > 0)
            pidx, tidx, t, u, v = pidx[ok], tidx[ok], t[ok], u[ok], v[ok]
            order = np.lexsort((tidx, t, pidx))
            pidx, tidx, t, u, v = pidx[order], tidx[order], t[order], u[order], v[order]
            first = np.ones(len(pidx), dtype=bool)
            first[1:] = pidx[1:] != pidx[:-1]
            pidx, tidx, t, u, v = pidx[first], tidx[first], t[first], u[first], v[first]
            better = t < best_t[pidx]
            pidx, tidx, t, u, v = pidx[better], tidx[better], t[better], u[better], v[better]
            best_t[pidx] = t
            best_tri[pidx] = tidx
            best_uv[pidx] = np.column_stack([u, v])

        hit = best_tri >= 0
        uv = np.clip(best_uv, 0.0, 1.0)
        w = np.column_stack([1.0 - uv[:, 0] - uv[:, 1], uv[:, 0], uv[:, 1]])
        w = np.clip(w, 0.0, None)
        w /= w.sum(axis=1, keepdims=True)
        tri = np.where(hit, best_tri, 0)
        w = np.where(hit[:, None], w, np.array([1.0, 0.0, 0.0]))
        return Anchors(tri // 2, tri % 2, w), best_t, hit


def intersect_ray_mesh(ray: ViewingRays, mesh: QuadMesh) -> BarycentricAnchor | None:
    """Nearest hit of a single ray with the 3D mesh, as an anchor."""
    anchors, _, hit = MeshRayCaster(mesh).cast(ray[:1])
    if not hit[0]:
        return None
    return anchors.to_list()[0]


# -- intrinsics file ----------------------------------------------------------

INTRINSIC_KEYS = ("f", "ku", "kv", "cu", "cv")


def read_intrinsics(path) -> CameraIntrinsics:
    """Parse ``key value`` lines (``#`` comments allowed); keys f, ku, kv, cu, cv."""
    vals = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace("=", " ").split()
            if len(parts) != 2 or parts[0] not in INTRINSIC_KEYS:
                raise CameraError(f"{path}:{lineno}: expected '<key> <value>' with key in {INTRINSIC_KEYS}")
            try:
                vals[parts[0]] = float(parts[1])
            except ValueError:
                raise CameraError(f"{path}:{lineno}: not a number: {parts[1]!r}") from None
    missing = [k for k in INTRINSIC_KEYS if k not in vals]
    if missing:
        raise CameraError(f"{path}: missing keys {missing}")
    return CameraIntrinsics(**vals)


def write_intrinsics(path, cam: CameraIntrinsics) -> None:
    with open(path, "w") as fh:
        for k in INTRINSIC_KEYS:
            fh.write(f"{k} {getattr(cam, k):.17g}\n")
