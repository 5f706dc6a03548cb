"""The six energy terms of the coupled 3D/planar objective and their gradients.

All terms return ``(value, gradient...)`` with gradients shaped like the
vertex arrays they differentiate.  Correspondences (footpoints, normals,
feature anchors, rays) are constants here; the pipeline refreshes them between
solves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import ViewingRays
from .geometry import Anchors, MeshPair, QuadMesh

log = logging.getLogger(__name__)

BETA_POINT = 1.0
BETA_TANGENT = 0.1
TERMS = ("iso", "dist", "fair_m", "fair_mp", "line", "ray")


class EnergyError(ValueError):
    pass


@dataclass
class WeightSchedule:
    """Weights ``lam[0..5]`` for iso, dist, fair(M), fair(M'), line, ray, plus loop controls."""

    lam: tuple[float, float, float, float, float, float] = (1.0, 1.0, 1e-4, 0.1, 1.0, 1.0)
    escalation: float = 4.0
    eps: float = 0.01
    max_iter: int = 100
    rounds: int = 4

    def __post_init__(self):
        self.lam = tuple(float(v) for v in self.lam)
        if len(self.lam) != 6 or min(self.lam) < 0:
            raise EnergyError(f"need six nonnegative weights, got {self.lam}")
        if self.eps <= 0 or self.max_iter < 1 or self.rounds < 1:
            raise EnergyError("eps must be > 0, max_iter and rounds >= 1")

    def escalated(self) -> "WeightSchedule":
        lam = list(self.lam)
        lam[4] *= self.escalation
        lam[5] *= self.escalation
        return replace(self, lam=tuple(lam))

    def without_features(self) -> "WeightSchedule":
        lam = list(self.lam)
        lam[4] = lam[5] = 0.0
        return replace(self, lam=tuple(lam))

    @classmethod
    def single(cls, term: str, weight: float = 1.0) -> "WeightSchedule":
        lam = [0.0] * 6
        lam[TERMS.index(term)] = weight
        return cls(lam=tuple(lam))


# -- individual terms ------------------------------------------------------------

def _diagonals(g: np.ndarray):
    """Quad diagonals v0-v2 and v1-v3 of a grid array ``(N1, N2, d)``."""
    return g[:-1, :-1] - g[1:, 1:], g[1:, :-1] - g[:-1, 1:]


def iso_residuals(pair: MeshPair) -> np.ndarray:
    """Per-face residuals ``(n_faces, 3)``: diagonal lengths² and diagonal inner product."""
    d1, d2 = _diagonals(pair.space.grid())
    e1, e2 = _diagonals(pair.plane.grid())
    c = np.stack([
        (d1 * d1).sum(-1) - (e1 * e1).sum(-1),
        (d2 * d2).sum(-1) - (e2 * e2).sum(-1),
        (d1 * d2).sum(-1) - (e1 * e2).sum(-1),
    ], axis=-1)
    return c.reshape(-1, 3)


def _scatter_diagonals(shape, g1, g2):
    out = np.zeros(shape)
    out[:-1, :-1] += g1
    out[1:, 1:] -= g1
    out[1:, :-1] += g2
    out[:-1, 1:] -= g2
    return out


def e_iso(pair: MeshPair):
    """Isometry energy; returns ``(E, dE/dV, dE/dV')``."""
    gs, gp = pair.space.grid(), pair.plane.grid()
    d1, d2 = _diagonals(gs)
    e1, e2 = _diagonals(gp)
    c1 = (d1 * d1).sum(-1) - (e1 * e1).sum(-1)
    c2 = (d2 * d2).sum(-1) - (e2 * e2).sum(-1)
    c3 = (d1 * d2).sum(-1) - (e1 * e2).sum(-1)
    value = float((c1 * c1).sum() + (c2 * c2).sum() + (c3 * c3).sum())
    c1, c2, c3 = c1[..., None], c2[..., None], c3[..., None]
    gv = _scatter_diagonals(gs.shape, 4 * c1 * d1 + 2 * c3 * d2, 4 * c2 * d2 + 2 * c3 * d1)
    gvp = _scatter_diagonals(gp.shape, -4 * c1 * e1 - 2 * c3 * e2, -4 * c2 * e2 - 2 * c3 * e1)
    return value, gv.reshape(pair.space.vertices.shape), gvp.reshape(pair.plane.vertices.shape)


def e_fair(mesh: QuadMesh):
    """Sum of squared second differences along both grid directions."""
    g = mesh.grid()
    grad = np.zeros_like(g)
    value = 0.0
    if g.shape[0] >= 3:
        r = g[:-2] - 2 * g[1:-1] + g[2:]
        value += float((r * r).sum())
        grad[:-2] += 2 * r
        grad[1:-1] -= 4 * r
        grad[2:] += 2 * r
    if g.shape[1] >= 3:
        r = g[:, :-2] - 2 * g[:, 1:-1] + g[:, 2:]
        value += float((r * r).sum())
        grad[:, :-2] += 2 * r
        grad[:, 1:-1] -= 4 * r
        grad[:, 2:] += 2 * r
    return value, grad.reshape(mesh.vertices.shape)


def _scatter(idx: np.ndarray, w: np.ndarray, gp: np.ndarray, n_vertices: int) -> np.ndarray:
    """Accumulate per-point gradients ``gp`` onto anchor vertices."""
    flat = idx.ravel()
    out = np.empty((n_vertices, gp.shape[1]))
    for k in range(gp.shape[1]):
        out[:, k] = np.bincount(flat, weights=(w * gp[:, k:k + 1]).ravel(), minlength=n_vertices)
    return out


def _eval(vertices, idx, w):
    return np.einsum("nk,nkd->nd", w, vertices[idx])


def e_dist(mesh3d: QuadMesh, points, anchors: Anchors, normals, beta=(BETA_POINT, BETA_TANGENT)):
    """Blended point-point / point-tangent fitting energy against frozen footpoints."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    h1 = len(points)
    if h1 == 0:
        raise EnergyError("no valid data points")
    idx = anchors.vertex_indices(mesh3d.dims)
    foot = _eval(mesh3d.vertices, idx, anchors.weights)
    r = points - foot
    rn = np.einsum("nd,nd->n", r, normals)
    value = float((beta[0] * (r * r).sum() + beta[1] * (rn * rn).sum()) / h1)
    gfoot = -(2 * beta[0] * r + 2 * beta[1] * rn[:, None] * normals) / h1
    return value, _scatter(idx, anchors.weights, gfoot, mesh3d.n_vertices)


def e_ray(mesh3d: QuadMesh, anchors: Anchors, rays: ViewingRays):
    """Mean squared distance of anchored feature points from their viewing rays."""
    h2 = len(anchors)
    if h2 == 0:
        return 0.0, np.zeros_like(mesh3d.vertices)
    idx = anchors.vertex_indices(mesh3d.dims)
    p = _eval(mesh3d.vertices, idx, anchors.weights)
    a = np.einsum("nd,nd->n", rays.n1, p)
    b = np.einsum("nd,nd->n", rays.n2, p)
    value = float(((a * a).sum() + (b * b).sum()) / h2)
    gp = 2 * (a[:, None] * rays.n1 + b[:, None] * rays.n2) / h2
    return value, _scatter(idx, anchors.weights, gp, mesh3d.n_vertices)


def e_line(mesh2d: QuadMesh, anchors: Anchors, line_of_point, theta, offset):
    """Straightness energy of planar feature points against lines ``cos θ x + sin θ y = c``.

    Returns ``(E, dE/dV', dE/dθ, dE/dc)``.
    """
    h2 = len(anchors)
    theta = np.asarray(theta, dtype=float)
    offset = np.asarray(offset, dtype=float)
    if h2 == 0:
        return 0.0, np.zeros_like(mesh2d.vertices), np.zeros_like(theta), np.zeros_like(offset)
    line_of_point = np.asarray(line_of_point)
    idx = anchors.vertex_indices(mesh2d.dims)
    p = _eval(mesh2d.vertices, idx, anchors.weights)
    th = theta[line_of_point]
    n = np.column_stack([np.cos(th), np.sin(th)])
    r = np.einsum("nd,nd->n", n, p) - offset[line_of_point]
    value = float((r * r).sum() / h2)
    gp = 2 * r[:, None] * n / h2
    dn = np.column_stack([-np.sin(th), np.cos(th)])
    gth = np.bincount(line_of_point, weights=2 * r * np.einsum("nd,nd->n", dn, p) / h2, minlength=len(theta))
    gc = np.bincount(line_of_point, weights=-2 * r / h2, minlength=len(theta))
    return value, _scatter(idx, anchors.weights, gp, mesh2d.n_vertices), gth, gc


# -- combined objective ------------------------------------------------------------

@dataclass
class Correspondences:
    """Everything frozen during one solve."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    anchors: Anchors = field(default_factory=Anchors.empty)
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    feature_anchors: Anchors = field(default_factory=Anchors.empty)
    rays: ViewingRays = field(default_factory=lambda: ViewingRays.concat([]))
    line_of_point: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class SolverState:
    """The unknowns X = (V, V', A_line) plus the frozen correspondences."""

    pair: MeshPair
    theta: np.ndarray
    offset: np.ndarray
    corr: Correspondences

    @property
    def n_lines(self) -> int:
        return len(self.theta)

    def pack(self) -> np.ndarray:
        return np.concatenate([self.pair.space.vertices.ravel(), self.pair.plane.vertices.ravel(),
                               self.theta, self.offset])

    def unpack(self, x: np.ndarray) -> "SolverState":
        n3 = self.pair.space.vertices.size
        n2 = self.pair.plane.vertices.size
        nl = self.n_lines
        pair = MeshPair(self.pair.space.with_vertices(x[:n3]),
                        self.pair.plane.with_vertices(x[n3:n3 + n2]))
        return SolverState(pair, x[n3 + n2:n3 + n2 + nl].copy(), x[n3 + n2 + nl:].copy(), self.corr)


@dataclass
class EnergyReport:
    terms: dict
    total: float
    grad_space: np.ndarray
    grad_plane: np.ndarray
    grad_theta: np.ndarray
    grad_offset: np.ndarray

    def gradient(self) -> np.ndarray:
        return np.concatenate([self.grad_space.ravel(), self.grad_plane.ravel(),
                               self.grad_theta, self.grad_offset])


def total_objective(state: SolverState, schedule: WeightSchedule) -> EnergyReport:
    """F = Σ λ_i E_i with the gradient over (V, V', θ, c)."""
    lam = schedule.lam
    pair, corr = state.pair, state.corr
    gs = np.zeros_like(pair.space.vertices)
    gp = np.zeros_like(pair.plane.vertices)
    gth = np.zeros_like(state.theta)
    gc = np.zeros_like(state.offset)
    terms = dict.fromkeys(TERMS, 0.0)

    terms["iso"], a, b = e_iso(pair)
    gs += lam[0] * a
    gp += lam[0] * b
    if len(corr.points):
        terms["dist"], a = e_dist(pair.space, corr.points, corr.anchors, corr.normals)
        gs += lam[1] * a
    elif lam[1] > 0:
        raise EnergyError("no valid data points")
    terms["fair_m"], a = e_fair(pair.space)
    gs += lam[2] * a
    terms["fair_mp"], a = e_fair(pair.plane)
    gp += lam[3] * a
    if len(corr.feature_anchors):
        terms["line"], a, t, c = e_line(pair.plane, corr.feature_anchors, corr.line_of_point,
                                        state.theta, state.offset)
        gp += lam[4] * a
        gth += lam[4] * t
        gc += lam[4] * c
        terms["ray"], a = e_ray(pair.space, corr.feature_anchors, corr.rays)
        gs += lam[5] * a
    total = float(sum(l * terms[k] for l, k in zip(lam, TERMS)))
    return EnergyReport(terms, total, gs, gp, gth, gc)


def term_energy(state: SolverState, term: str) -> float:
    """Value of a single unweighted term, without assembling the others."""
    pair, corr = state.pair, state.corr
    if term == "iso":
        return e_iso(pair)[0]
    if term == "dist":
        return e_dist(pair.space, corr.points, corr.anchors, corr.normals)[0]
    if term == "fair_m":
        return e_fair(pair.space)[0]
    if term == "fair_mp":
        return e_fair(pair.plane)[0]
    if term == "line":
        return e_line(pair.plane, corr.feature_anchors, corr.line_of_point, state.theta, state.offset)[0]
    if term == "ray":
        return e_ray(pair.space, corr.feature_anchors, corr.rays)[0]
    raise EnergyError(f"unknown term {term!r}")


class Objective:
    """Callable ``x -> (F, grad)`` over the packed unknowns of a state."""

    def __init__(self, state: SolverState, schedule: WeightSchedule):
        self.template = state
        self.schedule = schedule
        self.n_evals = 0

    def __call__(self, x: np.ndarray):
        self.n_evals += 1
        rep = total_objective(self.template.unpack(x), self.schedule)
        return rep.total, rep.gradient()

    def report(self, x: np.ndarray) -> EnergyReport:
        return total_objective(self.template.unpack(x), self.schedule)
