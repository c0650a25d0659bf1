import numpy as np
import pytest

from mzimesh.optimize import (
    CALLBACK_STOP, GRADIENT_TOLERANCE, LINE_SEARCH_FAILURE, LineSearchError, bfgs_minimize, check_gradient,
    lbfgs_minimize, strong_wolfe, wolfe_satisfied,
)


def rosenbrock(x):
    f = 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
    g = np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200 * (x[1] - x[0] ** 2)])
    return f, g


def quadratic(n, seed=0):
    rng = np.random.default_rng(seed)
    Q = rng.normal(size=(n, n))
    A = Q @ Q.T + n * np.eye(n)
    b = rng.normal(size=n)
    return A, b, (lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b))


@pytest.mark.parametrize("method", [bfgs_minimize, lbfgs_minimize])
def test_rosenbrock(method):
    rep = method(rosenbrock, np.array([-1.2, 1.0]), tol_grad=1e-10)
    assert rep.termination == GRADIENT_TOLERANCE
    np.testing.assert_allclose(rep.x, [1.0, 1.0], atol=1e-6)
    assert rep.iterations <= 200
    assert all(wolfe_satisfied(t) for t in rep.trace[1:])


def test_quadratic_agreement():
    A, b, fun = quadratic(50)
    x_star = np.linalg.solve(A, b)
    f_star = fun(x_star)[0]
    r1 = bfgs_minimize(fun, np.zeros(50))
    r2 = lbfgs_minimize(fun, np.zeros(50), tol_grad=1e-8)
    assert abs(r1.f - f_star) < 1e-8 and abs(r2.f - f_star) < 1e-8
    assert abs(r1.f - r2.f) < 1e-8


def test_full_memory_lbfgs_reproduces_bfgs():
    _, _, fun = quadratic(8, seed=4)
    x0 = np.ones(8)
    r1 = bfgs_minimize(fun, x0, tol_grad=1e-12, max_iter=15)
    r2 = lbfgs_minimize(fun, x0, memory=100, tol_grad=1e-12, max_iter=15, scaling="first")
    n = min(len(r1.trace), len(r2.trace))
    for a, b in zip(r1.trace[:n], r2.trace[:n]):
        assert a.f == pytest.approx(b.f, rel=1e-10, abs=1e-14)


def test_monotone_descent_trace():
    rep = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]))
    fs = [t.f for t in rep.trace]
    assert all(b <= a for a, b in zip(fs, fs[1:]))


def test_zero_iterations_at_optimum():
    rep = bfgs_minimize(rosenbrock, np.array([1.0, 1.0]))
    assert rep.iterations == 0 and rep.termination == GRADIENT_TOLERANCE


def test_callback_stop():
    rep = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), callback=lambda k, x, f, g: k >= 3)
    assert rep.termination == CALLBACK_STOP and rep.iterations == 3


def test_non_finite_start_reported():
    rep = bfgs_minimize(lambda x: (np.nan, np.zeros(2)), np.zeros(2))
    assert rep.termination == LINE_SEARCH_FAILURE and not rep.converged


def test_line_search_overshoot_on_nonfinite():
    def fun(x):
        if x[0] > 1.5:
            return np.inf, np.array([np.inf])
        return (x[0] - 1) ** 2, np.array([2 * (x[0] - 1)])

    x = np.array([0.0])
    f0, g0 = fun(x)
    a, f, g, s, _ = strong_wolfe(fun, x, -g0, f0, g0, a_init=10.0)
    assert np.isfinite(f) and f < f0


def test_line_search_rejects_ascent():
    with pytest.raises(LineSearchError):
        strong_wolfe(rosenbrock, np.zeros(2), np.array([1.0, 0.0]), 1.0, np.array([1.0, 0.0]))


def test_check_gradient():
    assert check_gradient(rosenbrock, np.array([0.3, -0.2])) < 1e-7
    bad = lambda x: (rosenbrock(x)[0], 2 * rosenbrock(x)[1])
    assert check_gradient(bad, np.array([0.3, -0.2])) > 0.1


def test_save_trace(tmp_path):
    rep = bfgs_minimize(rosenbrock, np.array([-1.2, 1.0]))
    p = tmp_path / "trace.csv"
    rep.save_trace(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "iteration,f,grad_norm" and len(lines) == len(rep.trace) + 1
