"""Unconstrained quasi-Newton minimisers (dense BFGS and limited-memory L-BFGS).

Both take ``fun(x) -> (f, grad)`` and share one strong-Wolfe line search, so
with full memory and the same initial Hessian scaling they walk the same
iterates.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

C1 = 1e-4
C2 = 0.9

GRADIENT_TOLERANCE = "gradient-tolerance"
MAX_ITERATIONS = "max-iterations"
LINE_SEARCH_FAILURE = "line-search-failure"
FUNCTION_TOLERANCE = "function-tolerance"
CALLBACK_STOP = "callback-stop"


class LineSearchError(RuntimeError):
    pass


@dataclass
class StepRecord:
    iteration: int
    f: float
    grad_norm: float
    step: float = 0.0
    f_prev: float = np.nan
    slope_prev: float = np.nan
    slope_new: float = np.nan


@dataclass
class OptimizeReport:
    x: np.ndarray
    f: float
    iterations: int
    grad_norm: float
    termination: str
    f0: float
    n_evals: int = 0
    trace: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.termination in (GRADIENT_TOLERANCE, FUNCTION_TOLERANCE, CALLBACK_STOP)

    def save_trace(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "f", "grad_norm"])
            for t in self.trace:
                w.writerow([t.iteration, repr(t.f), repr(t.grad_norm)])


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimiser of the cubic through two points with slopes, or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / denom


class _Line:
    """phi(a) = f(x + a p) with evaluation caching of the last gradient."""

    def __init__(self, fun, x, p):
        self.fun, self.x, self.p = fun, x, p
        self.n_evals = 0

    def __call__(self, a):
        self.n_evals += 1
        f, g = self.fun(self.x + a * self.p)
        f = float(f)
        g = np.asarray(g, dtype=float)
        slope = float(g @ self.p)
        if not (np.isfinite(f) and np.isfinite(slope)):
            return np.inf, np.nan, g
        return f, slope, g


def strong_wolfe(fun, x, p, f0, g0, a_init=1.0, c1=C1, c2=C2, max_evals=40):
    """Step length satisfying the strong Wolfe conditions.

    Returns ``(alpha, f_new, g_new, slope_new, n_evals)``.
    Non-finite objective values are treated as overshooting.
    """
    line = _Line(fun, x, p)
    slope0 = float(g0 @ p)
    if not slope0 < 0:
        raise LineSearchError("search direction is not a descent direction")

    def zoom(lo, hi):
        a_lo, f_lo, s_lo, g_lo = lo
        a_hi, f_hi, s_hi, _ = hi
        for _ in range(max_evals):
            width = a_hi - a_lo
            a = None
            if np.isfinite(f_hi) and np.isfinite(s_hi):
                a = _cubic_min(a_lo, f_lo, s_lo, a_hi, f_hi, s_hi)
            lo_b, hi_b = sorted((a_lo + 0.1 * width, a_hi - 0.1 * width))
            if a is None or not np.isfinite(a) or not lo_b <= a <= hi_b:
                a = a_lo + 0.5 * width
            f, s, g = line(a)
            if f > f0 + c1 * a * slope0 or f >= f_lo:
                a_hi, f_hi, s_hi = a, f, s
            else:
                if abs(s) <= -c2 * slope0:
                    return a, f, g, s
                if s * (a_hi - a_lo) >= 0:
                    a_hi, f_hi, s_hi = a_lo, f_lo, s_lo
                a_lo, f_lo, s_lo, g_lo = a, f, s, g
            if abs(a_hi - a_lo) <= 1e-16 * max(1.0, abs(a_lo)):
                break
        if a_lo > 0 and f_lo < f0:
            # Armijo holds at a_lo; curvature could not be met within budget.
            return a_lo, f_lo, g_lo, s_lo
        raise LineSearchError("zoom failed to find an acceptable step")

    prev = (0.0, f0, slope0, g0)
    a = a_init
    for i in range(max_evals):
        f, s, g = line(a)
        if f > f0 + c1 * a * slope0 or (i > 0 and f >= prev[1]):
            res = zoom(prev, (a, f, s, g))
            return (*res, line.n_evals)
        if abs(s) <= -c2 * slope0:
            return a, f, g, s, line.n_evals
        if s >= 0:
            res = zoom((a, f, s, g), prev)
            return (*res, line.n_evals)
        prev = (a, f, s, g)
        a = 2.0 * a
    raise LineSearchError("no acceptable step within the evaluation budget")


def _minimize(fun, x0, direction, update, tol_grad, max_iter, ftol, callback):
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    f = float(f)
    g = np.asarray(g, dtype=float)
    f0 = f
    n_evals = 1
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        return OptimizeReport(x, f, 0, np.inf, LINE_SEARCH_FAILURE, f0, n_evals)
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    trace = [StepRecord(0, f, gnorm)]
    termination = MAX_ITERATIONS
    k = 0
    while True:
        if gnorm <= tol_grad:
            termination = GRADIENT_TOLERANCE
            break
        if k >= max_iter:
            termination = MAX_ITERATIONS
            break
        p = direction(g, k)
        if not float(g @ p) < 0:
            p = -g
        a_init = min(1.0, 1.0 / np.linalg.norm(g)) if k == 0 else 1.0
        try:
            a, f_new, g_new, slope_new, ne = strong_wolfe(fun, x, p, f, g, a_init)
        except LineSearchError as exc:
            log.debug("line search failed at iteration %d: %s", k, exc)
            termination = LINE_SEARCH_FAILURE
            break
        n_evals += ne
        s = a * p
        x_new = x + s
        y = g_new - g
        rec = StepRecord(k + 1, f_new, float(np.max(np.abs(g_new))), a, f, float(g @ p), slope_new)
        update(s, y, k)
        f_prev = f
        x, f, g = x_new, f_new, g_new
        gnorm = rec.grad_norm
        trace.append(rec)
        k += 1
        if callback is not None and callback(k, x, f, g):
            termination = CALLBACK_STOP
            break
        if f_prev - f <= ftol * max(abs(f_prev), abs(f), 1e-300):
            termination = FUNCTION_TOLERANCE
            break
    return OptimizeReport(x, f, k, gnorm, termination, f0, n_evals, trace)


def bfgs_minimize(fun: Callable, x0, tol_grad: float = 1e-8, max_iter: int = 2000,
                  ftol: float = 1e-15, callback=None) -> OptimizeReport:
    """Dense inverse-Hessian BFGS.

    The identity is rescaled by ``s'y / y'y`` after the first step, before the
    first update.
    """
    n = np.size(x0)
    H = np.eye(n)

    def direction(g, k):
        return -H @ g

    def update(s, y, k):
        nonlocal H
        ys = float(y @ s)
        if ys <= 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            return
        if k == 0:
            H = np.eye(n) * (ys / float(y @ y))
        rho = 1.0 / ys
        Hy = H @ y
        H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s)

    return _minimize(fun, x0, direction, update, tol_grad, max_iter, ftol, callback)


def lbfgs_minimize(fun: Callable, x0, memory: int = 10, tol_grad: float = 1e-6, max_iter: int = 1000,
                   ftol: float = 1e-15, callback=None, scaling: str = "latest") -> OptimizeReport:
    """Limited-memory BFGS with the two-loop recursion.

    ``scaling="latest"`` takes the initial Hessian scale from the newest pair;
    ``"first"`` keeps the scale of the first pair, which together with
    ``memory >= iterations`` reproduces :func:`bfgs_minimize`.
    ``callback(k, x, f, g)`` returning True stops the run.
    """
    if scaling not in ("latest", "first"):
        raise ValueError("scaling must be 'latest' or 'first'")
    S: list[np.ndarray] = []
    Y: list[np.ndarray] = []
    R: list[float] = []
    gamma_first = None

    def direction(g, k):
        if not S:
            return -g
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(S), reversed(Y), reversed(R)):
            a = rho * float(s @ q)
            alphas.append(a)
            q -= a * y
        gamma = gamma_first if scaling == "first" else float(S[-1] @ Y[-1]) / float(Y[-1] @ Y[-1])
        r = gamma * q
        for s, y, rho, a in zip(S, Y, R, reversed(alphas)):
            b = rho * float(y @ r)
            r += s * (a - b)
        return -r

    def update(s, y, k):
        nonlocal gamma_first
        ys = float(y @ s)
        if ys <= 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            return
        if gamma_first is None:
            gamma_first = ys / float(y @ y)
        S.append(s)
        Y.append(y)
        R.append(1.0 / ys)
        if len(S) > memory:
            del S[0], Y[0], R[0]

    return _minimize(fun, x0, direction, update, tol_grad, max_iter, ftol, callback)


def check_gradient(fun: Callable, x, step: float = 1e-5) -> float:
    """Largest coordinate-wise relative gap between analytic and central-difference gradients."""
    x = np.array(x, dtype=float)
    _, g = fun(x)
    g = np.asarray(g, dtype=float)
    g_fd = np.empty_like(g)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g_fd[i] = (float(fun(x + e)[0]) - float(fun(x - e)[0])) / (2 * step)
    return float(np.max(np.abs(g_fd - g) / (np.abs(g) + np.abs(g_fd) + 1e-12)))


def wolfe_satisfied(rec: StepRecord, c1: float = C1, c2: float = C2, rtol: float = 1e-12) -> bool:
    """Check an accepted step against both strong Wolfe conditions."""
    armijo = rec.f <= rec.f_prev + c1 * rec.step * rec.slope_prev + rtol * abs(rec.f_prev)
    curvature = abs(rec.slope_new) <= -c2 * rec.slope_prev
    return bool(armijo and curvature)
