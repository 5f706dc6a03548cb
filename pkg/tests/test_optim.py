import numpy as np

from isorect.optim import lbfgs


def test_quadratic_reaches_analytic_minimum():
    rng = np.random.default_rng(0)
    n = 6
    a = rng.normal(size=(n, n))
    h = a @ a.T + n * np.eye(n)
    b = rng.normal(size=n)
    x_star = np.linalg.solve(h, b)

    def fun(x):
        return 0.5 * x @ h @ x - b @ x, h @ x - b

    res = lbfgs(fun, np.zeros(n), max_steps=n, rel_tol=0.0, exact_line_search=True)
    assert res.n_steps <= n
    assert np.allclose(res.x, x_star, atol=1e-8)


def test_rosenbrock():
    def fun(x):
        a, b = x
        f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
        g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
        return f, g

    res = lbfgs(fun, np.array([-1.2, 1.0]), max_steps=500, rel_tol=0.0, gtol=1e-12)
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)


def test_history_is_strictly_decreasing():
    rng = np.random.default_rng(2)
    c = rng.normal(size=20)

    def fun(x):
        r = np.sin(x) + x - c
        return float(r @ r), 2 * r * (np.cos(x) + 1)

    res = lbfgs(fun, np.zeros(20), max_steps=40, rel_tol=0.0)
    h = np.asarray(res.history)
    assert len(h) == res.n_steps + 1
    assert np.all(np.diff(h) < 0)


def test_relative_tolerance_stops_early():
    res = lbfgs(lambda x: (float(x @ x), 2 * x), np.ones(3), max_steps=50, rel_tol=0.5)
    assert res.n_steps < 50
    assert res.status != "max_steps"
