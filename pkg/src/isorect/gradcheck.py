"""Central finite-difference check of every energy term's analytic gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, viewing_rays
from .energies import TERMS, Correspondences, SolverState, WeightSchedule, term_energy, total_objective
from .geometry import Anchors, MeshPair, QuadMesh, grid_mesh

DEFAULT_DIMS = (5, 7)
DEFAULT_PAIRS = 10
RTOL = 1e-5
ATOL = 1e-8
STEP = 1e-6


@dataclass
class TermCheck:
    term: str
    seed: int
    max_abs_err: float
    worst_index: int
    analytic: float
    numeric: float
    passed: bool


def _random_anchors(rng, n, dims) -> Anchors:
    nf = (dims[0] - 1) * (dims[1] - 1)
    w = rng.dirichlet(np.ones(3), size=n)
    return Anchors(rng.integers(0, nf, n), rng.integers(0, 2, n), w)


def random_state(seed: int, dims=DEFAULT_DIMS, n_points: int = 40, n_lines: int = 3, per_line: int = 6) -> SolverState:
    """A perturbed grid pair with random data points, normals, feature anchors, rays and lines."""
    rng = np.random.default_rng(seed)
    flat = grid_mesh(dims, origin=(-0.5, -0.7), spacing=(0.25, 0.25))
    space = np.column_stack([flat.vertices, np.full(flat.n_vertices, 2.0)]) + rng.normal(scale=0.05,
                                                                                          size=(flat.n_vertices, 3))
    plane = flat.vertices + rng.normal(scale=0.05, size=flat.vertices.shape)
    pair = MeshPair(QuadMesh(dims, space), QuadMesh(dims, plane))
    normals = rng.normal(size=(n_points, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cam = CameraIntrinsics(1.0, 500.0, 500.0, 320.0, 240.0)
    nf = n_lines * per_line
    corr = Correspondences(
        points=rng.normal(scale=0.5, size=(n_points, 3)) + [0, 0, 2.0],
        anchors=_random_anchors(rng, n_points, dims),
        normals=normals,
        feature_anchors=_random_anchors(rng, nf, dims),
        rays=viewing_rays(cam, rng.uniform([0, 0], [640, 480], size=(nf, 2))),
        line_of_point=np.repeat(np.arange(n_lines), per_line),
    )
    return SolverState(pair, rng.uniform(-np.pi, np.pi, n_lines), rng.normal(size=n_lines), corr)


def check_term(state: SolverState, term: str, seed: int = 0, rtol: float = RTOL, atol: float = ATOL,
               step: float = STEP, sign_error: bool = False) -> TermCheck:
    """Compare the gradient of one term (weight 1) with central differences over every unknown.

    A component passes when ``|g - fd| <= max(rtol * |fd|, atol)``.
    ``sign_error`` flips the analytic gradient, which must make the check fail.
    """
    sched = WeightSchedule.single(term)
    x0 = state.pack()
    g = total_objective(state, sched).gradient()
    if sign_error:
        g = -g
    fd = np.empty_like(x0)
    for i in range(len(x0)):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += step
        xm[i] -= step
        fd[i] = (term_energy(state.unpack(xp), term) - term_energy(state.unpack(xm), term)) / (2 * step)
    err = np.abs(g - fd)
    tol = np.maximum(rtol * np.abs(fd), atol)
    worst = int(np.argmax(err - tol))
    return TermCheck(term, seed, float(err.max()), worst, float(g[worst]), float(fd[worst]),
                     bool(np.all(err <= tol)))


def run_gradcheck(seed: int = 0, n_pairs: int = DEFAULT_PAIRS, dims=DEFAULT_DIMS, rtol: float = RTOL,
                  atol: float = ATOL, terms=TERMS, sign_error_term: str | None = None) -> list[TermCheck]:
    """Check every term on ``n_pairs`` random states derived from ``seed``."""
    out = []
    for k in range(n_pairs):
        state = random_state(seed * 1000 + k, dims)
        for term in terms:
            out.append(check_term(state, term, seed * 1000 + k, rtol, atol, sign_error=(term == sign_error_term)))
    return out
