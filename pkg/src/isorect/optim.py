"""Limited-memory BFGS with a monotone Wolfe line search."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    n_steps: int
    n_evals: int
    # objective after each accepted step, starting with the initial value
    history: list = field(default_factory=list)
    status: str = "max_steps"
    line_search_failed: bool = False


def _two_loop(g, s_list, y_list):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(list(zip(s_list, y_list, (1.0 / np.dot(y, s) for s, y in zip(s_list, y_list))))):
        a = rho * np.dot(s, q)
        alphas.append((a, rho, s, y))
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for a, rho, s, y in reversed(alphas):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def _line_search(fun, x, f0, g0, p, alpha0, c1=1e-4, c2=0.9, max_evals=20, exact=False):
    """Return ``(alpha, f, g, n_evals)``; alpha is 0 when no decrease was found."""
    d0 = float(np.dot(g0, p))
    lo, hi = 0.0, np.inf
    alpha = alpha0
    best = (0.0, f0, g0)
    n = 0
    while n < max_evals:
        f, g = fun(x + alpha * p)
        n += 1
        d = float(np.dot(g, p))
        armijo = np.isfinite(f) and f <= f0 + c1 * alpha * d0
        if armijo and f < best[1]:
            best = (alpha, f, g)
        if not armijo:
            hi = alpha
            # safeguarded quadratic interpolation on [0, alpha]
            denom = 2.0 * (f - f0 - d0 * alpha) if np.isfinite(f) else np.inf
            trial = -d0 * alpha * alpha / denom if denom > 0 else 0.5 * alpha
            alpha = float(np.clip(trial, 0.1 * alpha, 0.5 * alpha))
            continue
        if exact and d != d0:
            # secant step on the directional derivative; exact for quadratics
            a_s = alpha * d0 / (d0 - d)
            if d - d0 > 0 and abs(a_s - alpha) > 1e-12 * alpha and n < max_evals:
                fs, gs = fun(x + a_s * p)
                n += 1
                if np.isfinite(fs) and fs <= f0 + c1 * a_s * d0 and fs < best[1]:
                    best = (a_s, fs, gs)
            return (*best, n)
        if d >= c2 * d0:
            return (*best, n)
        # curvature condition fails: the step is too short
        lo = alpha
        alpha = 2.0 * alpha if hi == np.inf else 0.5 * (lo + hi)
    return (*best, n)


def lbfgs(fun, x0, max_steps: int = 50, rel_tol: float = 1e-3, gtol: float = 0.0, memory: int = 10,
          exact_line_search: bool = False) -> LbfgsResult:
    """Minimise ``fun(x) -> (f, grad)``.

    Stops after ``max_steps`` accepted steps, when one step decreases ``f`` by a
    relative amount below ``rel_tol``, or when ``max|grad| <= gtol``.  Every
    accepted step strictly decreases ``f``.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    n_evals = 1
    history = [float(f)]
    s_list: deque = deque(maxlen=memory)
    y_list: deque = deque(maxlen=memory)
    status = "max_steps"
    failed = False
    steps = 0
    while steps < max_steps:
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= gtol:
            status = "gtol"
            break
        p = _two_loop(g, s_list, y_list)
        if np.dot(p, g) >= 0:
            s_list.clear()
            y_list.clear()
            p = -g
        alpha0 = 1.0 if s_list else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300))
        alpha, f_new, g_new, n = _line_search(fun, x, f, g, p, alpha0, exact=exact_line_search)
        n_evals += n
        if alpha == 0.0 or not f_new < f:
            if s_list:
                # retry once along steepest descent with fresh memory
                s_list.clear()
                y_list.clear()
                continue
            status = "line_search"
            failed = True
            break
        s = alpha * p
        y = g_new - g
        if np.dot(s, y) > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_list.append(s)
            y_list.append(y)
        x = x + s
        decrease = (f - f_new) / max(abs(f), 1e-300)
        f, g = f_new, g_new
        history.append(float(f))
        steps += 1
        if decrease < rel_tol:
            status = "rel_tol"
            break
    return LbfgsResult(x, float(f), g, steps, n_evals, history, status, failed)
