"""Downstream-task impact of weight errors: 3-bit XOR and 2-D Gaussian regression.

A 3-3-1 network (3x3 linear layer, tanh, linear readout) is trained once;
its first layer stands for the optical matrix, so model errors are injected
there only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .optimize import lbfgs_minimize

XOR3 = "xor3"
GAUSS2D = "gauss2d"
PERCENTILES = (10, 25, 50, 75, 90)
N_RESTARTS = 5
GAUSS_TARGET_RMSE = 1.5e-3


@dataclass
class TaskSpec:
    kind: str = XOR3
    mu1: float = 0.0
    mu2: float = 0.0
    sigma1: float = 1.0
    sigma2: float = 1.0
    n_points: int = 2000
    n_train: int = 1600
    realizations: int = 2000

    def __post_init__(self):
        if self.kind not in (XOR3, GAUSS2D):
            raise ValueError(f"unknown task {self.kind!r}")
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ValueError("sigmas must be positive")
        if not 0 < self.n_train < self.n_points:
            raise ValueError("n_train must lie strictly between 0 and n_points")


def make_xor_dataset():
    """All 8 binary triples; label 1 iff exactly one input is 1."""
    X = np.array([[(k >> 2) & 1, (k >> 1) & 1, k & 1] for k in range(8)], dtype=float)
    y = (X.sum(axis=1) == 1).astype(float)
    return X, y


def gauss2d(x1, x2, spec: TaskSpec | None = None):
    s = spec or TaskSpec(GAUSS2D)
    z = ((np.asarray(x1) - s.mu1) / s.sigma1) ** 2 + ((np.asarray(x2) - s.mu2) / s.sigma2) ** 2
    return np.exp(-0.5 * z) / (2.0 * np.pi * s.sigma1 * s.sigma2)


def make_gauss_dataset(spec: TaskSpec, seed: int = 0):
    """Uniform inputs on [-1, 1]^2 plus a constant bias input; returns (Xtr, ytr, Xte, yte)."""
    rng = np.random.default_rng([seed, 2])
    xy = rng.uniform(-1.0, 1.0, (spec.n_points, 2))
    X = np.column_stack([xy, np.ones(spec.n_points)])
    y = gauss2d(xy[:, 0], xy[:, 1], spec)
    n = spec.n_train
    return X[:n], y[:n], X[n:], y[n:]


@dataclass
class ReferenceNet:
    """y = w2 . tanh(W1 x) + b2 with W1 of shape (3, 3)."""

    W1: np.ndarray
    w2: np.ndarray
    b2: float

    @staticmethod
    def unpack(p):
        return p[:9].reshape(3, 3), p[9:12], float(p[12])

    def pack(self):
        return np.concatenate([self.W1.ravel(), self.w2, [self.b2]])

    def forward(self, X, W1=None):
        """Output for inputs (N, 3); ``W1`` may be a batch (R, 3, 3) giving (R, N)."""
        W = self.W1 if W1 is None else W1
        h = np.tanh(np.einsum("...ij,nj->...ni", W, X))
        return h @ self.w2 + self.b2


def _loss(X, y):
    n = len(y)

    def fun(p):
        W1, w2, b2 = ReferenceNet.unpack(p)
        h = np.tanh(X @ W1.T)
        d = h @ w2 + b2 - y
        f = float(d @ d) / n
        g_out = 2.0 * d / n
        dh = np.outer(g_out, w2) * (1.0 - h * h)
        grad = np.concatenate([(dh.T @ X).ravel(), h.T @ g_out, [g_out.sum()]])
        return f, grad

    return fun


def xor_accuracy(out, y):
    """Percent correct with a 0.5 threshold; ``out`` may carry leading batch axes."""
    return 100.0 * np.mean((out > 0.5) == (y > 0.5), axis=-1)


def rmse(out, y):
    return np.sqrt(np.mean((out - y) ** 2, axis=-1))


@dataclass
class TrainedTask:
    spec: TaskSpec
    net: ReferenceNet
    clean_metric: float
    data: tuple
    restarts_used: int

    @property
    def metric_name(self):
        return "accuracy_percent" if self.spec.kind == XOR3 else "test_rmse"

    def metric(self, W1=None):
        if self.spec.kind == XOR3:
            X, y = self.data
            return xor_accuracy(self.net.forward(X, W1), y)
        _, _, Xte, yte = self.data
        return rmse(self.net.forward(Xte, W1), yte)


class TaskTrainingError(RuntimeError):
    pass


def train_reference(spec: TaskSpec | str, seed: int = 0) -> TrainedTask:
    """Train the 3-3-1 network with L-BFGS, restarting up to 5 times until the clean target is met."""
    spec = TaskSpec(spec) if isinstance(spec, str) else spec
    if spec.kind == XOR3:
        data = make_xor_dataset()
        Xtr, ytr = data
    else:
        data = make_gauss_dataset(spec, seed)
        Xtr, ytr = data[0], data[1]
    fun = _loss(Xtr, ytr)
    best = None
    for r in range(N_RESTARTS):
        p0 = np.random.default_rng([seed, 3, r]).normal(0.0, 1.0, 13)
        rep = lbfgs_minimize(fun, p0, tol_grad=1e-12, max_iter=5000)
        net = ReferenceNet(*ReferenceNet.unpack(rep.x))
        task = TrainedTask(spec, net, 0.0, data, r + 1)
        task.clean_metric = float(task.metric())
        ok = task.clean_metric == 100.0 if spec.kind == XOR3 else task.clean_metric <= GAUSS_TARGET_RMSE
        if ok:
            return task
        if best is None or rep.f < best[0]:
            best = (rep.f, task)
    raise TaskTrainingError(f"{spec.kind}: clean target not met after {N_RESTARTS} restarts "
                            f"(best metric {best[1].clean_metric:.4g})")


@dataclass
class NoiseReport:
    model: str
    task: str
    metric_name: str
    clean: float
    values: np.ndarray
    percentiles: dict = field(default_factory=dict)

    def to_rows(self):
        rows = [{"model": self.model, "task": self.task, "realization": r, "metric": self.metric_name,
                 "value": float(v)} for r, v in enumerate(self.values)]
        for p, v in self.percentiles.items():
            rows.append({"model": self.model, "task": self.task, "realization": f"p{p}",
                         "metric": self.metric_name, "value": float(v)})
        rows.append({"model": self.model, "task": self.task, "realization": "clean", "metric": self.metric_name,
                     "value": self.clean})
        return rows


def write_reports_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["model", "task", "realization", "metric", "value"])
        w.writeheader()
        for rep in reports:
            for row in rep.to_rows():
                row["value"] = repr(row["value"])
                w.writerow(row)


def noise_injection_study(task: TrainedTask, errors_db, realizations: int | None = None, seed: int = 0,
                          mode: str = "multiplicative", model_name: str = "") -> NoiseReport:
    """Perturb the 9 first-layer weights with errors resampled from ``errors_db``.

    ``mode="multiplicative"`` scales each weight by 10^(e/10) (a power-ratio
    error keeps the weight's sign); ``"additive"`` adds ``e`` directly.
    """
    samples = np.asarray(getattr(errors_db, "samples", errors_db), dtype=float).ravel()
    if samples.size == 0:
        raise ValueError("error sample set is empty")
    if mode not in ("multiplicative", "additive"):
        raise ValueError("mode must be 'multiplicative' or 'additive'")
    R = task.spec.realizations if realizations is None else realizations
    eps = np.empty((R, 3, 3))
    for r in range(R):
        eps[r] = samples[np.random.default_rng([seed, 4, r]).integers(0, samples.size, 9)].reshape(3, 3)
    W1 = task.net.W1
    W = W1 * 10.0 ** (eps / 10.0) if mode == "multiplicative" else W1 + eps
    values = task.metric(W)
    pct = dict(zip(PERCENTILES, np.percentile(values, PERCENTILES)))
    return NoiseReport(model_name, task.spec.kind, task.metric_name, task.clean_metric, values, pct)
