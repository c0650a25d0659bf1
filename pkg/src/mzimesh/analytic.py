"""Fitting the crosstalk-free (SAM) and crosstalk-aware (SAM+XT) path models.

SAM is fitted in two stages: phases, heater efficiencies and extinction ratio
on the one-heater-at-a-time sweep, then path losses on the random training
set. SAM+XT starts from the SAM solution and adds the full heater-to-phase
coupling matrix.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chip import WeightDataset
from .mesh import FLOOR_DB, MeshTopology, default_topology, extinction_reflectance
from .optimize import bfgs_minimize

log = logging.getLogger(__name__)

SAM = "sam"
SAMXT = "samxt"
_DB = 10.0 / np.log(10.0)
DEFAULT_MAX_TRAIN = 1000


@dataclass
class AnalyticModel:
    """SAM (``kind="sam"``, diagonal ``phi2``) or SAM+XT (full ``phi2``)."""

    kind: str
    phi0: np.ndarray
    phi2: np.ndarray
    er_db: float
    alpha_db: np.ndarray
    topology: MeshTopology = field(default_factory=default_topology)
    wavelength_nm: float | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (SAM, SAMXT):
            raise ValueError(f"unknown analytic model kind {self.kind!r}")
        self.phi0 = np.asarray(self.phi0, dtype=float)
        phi2 = np.asarray(self.phi2, dtype=float)
        if phi2.ndim == 1:
            phi2 = np.diag(phi2)
        if self.kind == SAM and np.any(phi2 != np.diag(np.diag(phi2))):
            raise ValueError("SAM phase matrix must be diagonal")
        self.phi2 = phi2
        self.alpha_db = np.asarray(self.alpha_db, dtype=float).reshape(3, 3)
        self.er_db = float(self.er_db)

    @property
    def phi2_diag(self) -> np.ndarray:
        return np.diag(self.phi2).copy()

    def _terms(self, v):
        v = np.atleast_2d(np.asarray(v, dtype=float))
        v2 = v * v
        phi = self.phi0 + v2 @ self.phi2.T
        pm = self.topology.path_mzi
        sign = self.topology.path_sign
        r = float(extinction_reflectance(self.er_db))
        ph = phi[:, pm]
        T = (1.0 + r * r + 2.0 * sign * r * np.cos(ph)) / 4.0
        return v, v2, ph, T, r, sign

    def predict_raw(self, v) -> np.ndarray:
        """Unclamped weights in dB, shape (L, 9)."""
        _, _, _, T, _, _ = self._terms(v)
        with np.errstate(divide="ignore"):
            w = self.alpha_db + _DB * np.log(T).sum(axis=-1)
        return w.reshape(w.shape[0], 9)

    def predict(self, v) -> np.ndarray:
        """Weights in dB clamped at the floor, shape (L, 9) (or (9,) for one vector)."""
        single = np.ndim(v) == 1
        w = np.maximum(self.predict_raw(v), FLOOR_DB)
        return w[0] if single else w

    def _grads(self, v, upstream):
        """Back-propagate dLoss/dweight (L, 9) to phase-level quantities."""
        v, v2, ph, T, r, sign = self._terms(v)
        U = upstream.reshape(-1, 3, 3)
        d_phi = -_DB * sign * r * np.sin(ph) / (2.0 * T)  # (L,3,3,3)
        d_r = _DB * (r + sign * np.cos(ph)) / (2.0 * T)
        coef = U[..., None] * d_phi
        G_phi = np.zeros((v.shape[0], self.phi0.size))
        pm = self.topology.path_mzi
        for t in range(3):
            for i in range(3):
                for j in range(3):
                    G_phi[:, pm[i, j, t]] += coef[:, i, j, t]
        s = np.sqrt(10.0 ** (self.er_db / 10.0))
        dr_der = 2.0 / (s + 1.0) ** 2 * s * np.log(10.0) / 20.0
        g_er = float((U[..., None] * d_r).sum()) * dr_der
        return v, v2, G_phi, U, g_er

    def vjp_input(self, v, upstream) -> np.ndarray:
        """Gradient of ``sum(upstream * predict(v))`` w.r.t. the voltages (clamp ignored)."""
        v, v2, G_phi, _, _ = self._grads(v, np.atleast_2d(upstream))
        return 2.0 * v * (G_phi @ self.phi2)

    def loss_and_grads(self, v, labels, domain: str = "db"):
        """MSE between clamped prediction and clamped labels, with parameter gradients.

        ``domain="linear"`` compares power ratios instead of dB values, scaled
        by the mean squared label power; it is smoother near transmission nulls.
        """
        raw = self.predict_raw(v)
        pred = np.maximum(raw, FLOOR_DB)
        lab = np.maximum(labels, FLOOR_DB)
        n = pred.size
        if domain == "linear":
            P, L = 10.0 ** (pred / 10.0), 10.0 ** (lab / 10.0)
            scale = float(np.mean(L * L))
            diff = P - L
            loss = float(np.sum(diff * diff) / (n * scale))
            up = np.where(raw >= FLOOR_DB, 2.0 * diff * P * (np.log(10.0) / 10.0) / (n * scale), 0.0)
        else:
            diff = pred - lab
            loss = float(np.sum(diff * diff) / n)
            up = np.where(raw >= FLOOR_DB, 2.0 * diff / n, 0.0)
        v, v2, G_phi, U, g_er = self._grads(v, up)
        grads = {
            "phi0": G_phi.sum(axis=0),
            "phi2": G_phi.T @ v2,
            "er_db": g_er,
            "alpha_db": U.sum(axis=0),
        }
        return loss, grads

    def with_params(self, **kw) -> "AnalyticModel":
        d = dict(kind=self.kind, phi0=self.phi0, phi2=self.phi2, er_db=self.er_db, alpha_db=self.alpha_db,
                 topology=self.topology, wavelength_nm=self.wavelength_nm, provenance=dict(self.provenance))
        d.update(kw)
        return AnalyticModel(**d)

    def shifted_phase(self, turns) -> "AnalyticModel":
        return self.with_params(phi0=self.phi0 + 2 * np.pi * np.asarray(turns))

    # -- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "phi0_rad": self.phi0.tolist(),
            "phi2_rad_per_v2": self.phi2.tolist(),
            "extinction_ratio_db": self.er_db,
            "alpha_db": self.alpha_db.tolist(),
            "topology": self.topology.to_dict(),
            "wavelength_nm": self.wavelength_nm,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticModel":
        return cls(d["kind"], d["phi0_rad"], d["phi2_rad_per_v2"], d["extinction_ratio_db"], d["alpha_db"],
                   MeshTopology.from_dict(d["topology"]), d.get("wavelength_nm"), d.get("provenance", {}))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def rmse(pred, label) -> float:
    d = np.maximum(pred, FLOOR_DB) - np.maximum(label, FLOOR_DB)
    return float(np.sqrt(np.mean(d * d)))


def _channel_data(ds: WeightDataset, channel):
    k = ds.grid.reference_index if channel is None else channel
    return ds.voltages, ds.weights_db[:, :, k], float(ds.grid.center_wavelengths_nm[k])


# ---------------------------------------------------------------------------
# Initialisation from the sweep
# ---------------------------------------------------------------------------


def _swept_rows(V: np.ndarray):
    """For each heater, the sweep rows where only that heater departs from the baseline."""
    base = np.array([np.bincount(np.unique(V[:, m], return_inverse=True)[1]).argmax() for m in range(9)])
    base = np.array([np.unique(V[:, m])[base[m]] for m in range(9)])
    rows = []
    for m in range(9):
        others = np.delete(np.arange(9), m)
        mask = np.all(np.isclose(V[:, others], base[others]), axis=1)
        rows.append(np.flatnonzero(mask))
    return rows


def initial_phases(topology: MeshTopology, V: np.ndarray, W: np.ndarray, er_db: float = 30.0,
                   n_phi0: int = 72, phi2_grid=None):
    """Grid-search start values for the phase offsets and heater efficiencies.

    For each heater the dB traces of every path through it are matched to the
    single-MZI response up to a free per-path offset.
    """
    phi2_grid = np.linspace(0.4, 1.8, 29) if phi2_grid is None else phi2_grid
    phi0_grid = np.linspace(0, 2 * np.pi, n_phi0, endpoint=False)
    r = float(extinction_reflectance(er_db))
    pm, sign = topology.path_mzi, topology.path_sign
    rows = _swept_rows(V)
    phi0 = np.full(9, np.pi)
    phi2 = np.ones(9)
    for m in range(9):
        idx = rows[m]
        if idx.size < 3:
            continue
        v2 = V[idx, m] ** 2
        ph = phi0_grid[:, None, None] + phi2_grid[None, :, None] * v2  # (A,B,n)
        cost = np.zeros((phi0_grid.size, phi2_grid.size))
        for i, j, t in zip(*np.nonzero(pm == m)):
            y = W[idx, 3 * i + j]
            ok = y > FLOOR_DB + 1.0
            if ok.sum() < 3:
                continue
            T = (1 + r * r + 2 * sign[i, j, t] * r * np.cos(ph[..., ok])) / 4
            model = _DB * np.log(T)
            res = model - y[ok]
            res -= res.mean(axis=-1, keepdims=True)
            cost += (res * res).sum(axis=-1)
        a, b = np.unravel_index(np.argmin(cost), cost.shape)
        phi0[m], phi2[m] = phi0_grid[a], phi2_grid[b]
    return phi0, phi2


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _fit(model: AnalyticModel, V, W, names, tol_grad, max_iter, domain: str = "db"):
    """Minimise the dB MSE over the named parameter blocks; returns (model, OptimizeReport)."""
    shapes = {
        "phi0": (9,),
        "phi2_diag": (9,),
        "phi2": (9, 9),
        "er_db": (),
        "alpha_db": (3, 3),
    }

    def pack(m: AnalyticModel):
        parts = []
        for n in names:
            val = m.phi2_diag if n == "phi2_diag" else getattr(m, n)
            parts.append(np.ravel(val))
        return np.concatenate(parts)

    def unpack(x):
        kw, o = {}, 0
        for n in names:
            size = int(np.prod(shapes[n])) if shapes[n] else 1
            chunk = x[o : o + size]
            o += size
            if n == "phi2_diag":
                kw["phi2"] = np.diag(chunk)
            elif n == "er_db":
                kw["er_db"] = float(chunk[0])
            else:
                kw[n] = chunk.reshape(shapes[n])
        return model.with_params(**kw)

    def fun(x):
        m = unpack(x)
        if m.er_db <= 0.1:
            return np.inf, np.zeros_like(x)
        loss, g = m.loss_and_grads(V, W, domain)
        parts = []
        for n in names:
            if n == "phi2_diag":
                parts.append(np.diag(g["phi2"]))
            else:
                parts.append(np.ravel(g[n]))
        return loss, np.concatenate(parts)

    rep = bfgs_minimize(fun, pack(model), tol_grad=tol_grad, max_iter=max_iter)
    if not rep.converged and rep.termination != "max-iterations":
        warnings.warn(f"analytic fit stopped with {rep.termination}; using best point found")
    return unpack(rep.x), rep


def _sweep_loss(model: AnalyticModel, V, W) -> float:
    d = model.predict(V) - np.maximum(W, FLOOR_DB)
    return float(np.mean(d * d))


def _scan_cost(model: AnalyticModel, V, W, m, phi0_grid, phi2_grid):
    """Sweep loss on a (phi0_m, phi2_m) grid with every other parameter held fixed.

    Path losses of the affected paths are profiled out, so a candidate is not
    penalised for the offset the current losses were tuned to.
    """
    pm, sign = model.topology.path_mzi, model.topology.path_sign
    r = float(extinction_reflectance(model.er_db))
    T = model._terms(V)[3]
    ph_m = phi0_grid[:, None, None] + phi2_grid[None, :, None] * V[:, m] ** 2  # (A, B, L)
    cost = np.zeros((phi0_grid.size, phi2_grid.size))
    with np.errstate(divide="ignore"):
        for i, j, t in zip(*np.nonzero(pm == m)):
            rest = _DB * (np.log(T[:, i, j]).sum(axis=-1) - np.log(T[:, i, j, t]))
            pred = rest + _DB * np.log((1 + r * r + 2 * sign[i, j, t] * r * np.cos(ph_m)) / 4)
            w = W[:, 3 * i + j]
            keep = w > FLOOR_DB + 1.0
            alpha = (w[keep] - pred[..., keep]).mean(axis=-1, keepdims=True) if keep.any() else model.alpha_db[i, j]
            d = np.maximum(pred + alpha, FLOOR_DB) - np.maximum(w, FLOOR_DB)
            cost += (d * d).sum(axis=-1)
    return cost


def _scan_candidates(model: AnalyticModel, V, W, m, n_best: int = 3):
    """Up to ``n_best`` competitive local minima of the scan cost along phi2, each refined."""
    g0 = np.linspace(0, 2 * np.pi, 72, endpoint=False)
    g2 = np.linspace(0.4, 1.8, 71)
    cost = _scan_cost(model, V, W, m, g0, g2)
    prof = cost.min(axis=0)
    interior = np.r_[True, prof[1:] < prof[:-1]] & np.r_[prof[:-1] <= prof[1:], True]
    out = []
    minima = [k for k in np.flatnonzero(interior) if prof[k] <= 3.0 * prof.min()]
    for b in sorted(minima, key=lambda k: prof[k])[:n_best]:
        a = np.argmin(cost[:, b])
        f0, f2 = g0[a] + np.linspace(-0.09, 0.09, 37), g2[b] + np.linspace(-0.02, 0.02, 41)
        fine = _scan_cost(model, V, W, m, f0, f2)
        a2, b2 = np.unravel_index(np.argmin(fine), fine.shape)
        out.append((f0[a2], f2[b2]))
    return out


def _polish(model: AnalyticModel, V, W, names, tol_grad, max_iter, rounds: int = 2):
    """Escape poor local minima by re-seeding one MZI at a time from grid-scan minima."""
    best = _sweep_loss(model, V, W)
    for _ in range(rounds):
        improved = False
        for m in range(9):
            for a, b in _scan_candidates(model, V, W, m):
                dphi = (a - model.phi0[m] + np.pi) % (2 * np.pi) - np.pi
                if abs(dphi) < 0.05 and abs(b - model.phi2[m, m]) < 0.01:
                    continue
                phi0, phi2 = model.phi0.copy(), model.phi2.copy()
                phi0[m], phi2[m, m] = a, b
                cand, _ = _fit(model.with_params(phi0=phi0, phi2=phi2), V, W, names, tol_grad, max_iter)
                loss = _sweep_loss(cand, V, W)
                if loss < best * (1 - 1e-9):
                    model, best, improved = cand, loss, True
        if not improved:
            break
    return model


def _initial_alpha(model: AnalyticModel, V, W):
    """Median dB residual per path over unclamped samples."""
    resid = W - (model.predict_raw(V) - model.alpha_db.ravel())
    ok = W > FLOOR_DB + 1.0
    alpha = np.empty(9)
    for p in range(9):
        sel = resid[ok[:, p], p]
        alpha[p] = np.median(sel) if sel.size else np.max(W[:, p])
    return np.minimum(alpha, 0.0).reshape(3, 3)


def fit_sam(sweep: WeightDataset, training: WeightDataset | None = None, channel: int | None = None,
            max_train: int = DEFAULT_MAX_TRAIN, er_db0: float = 30.0, topology: MeshTopology | None = None,
            tol_grad: float = 1e-9, max_iter: int = 2000, init: AnalyticModel | None = None):
    """Two-stage SAM fit. Returns ``(model, report)``.

    Stage 1 fits phases, efficiencies, extinction ratio (and nuisance path
    losses) on the sweep; stage 2 refits only the path losses on at most
    ``max_train`` training records.
    """
    topology = topology or default_topology()
    Vs, Ws, lam = _channel_data(sweep, channel)
    if init is None:
        phi0, phi2 = initial_phases(topology, Vs, Ws, er_db0)
        model = AnalyticModel(SAM, phi0, phi2, er_db0, np.zeros((3, 3)), topology, lam)
        model = model.with_params(alpha_db=_initial_alpha(model, Vs, Ws))
    else:
        model = init.with_params(kind=SAM, phi2=np.diag(init.phi2_diag), wavelength_nm=lam)
    report = {"stage1_rmse_db_initial": rmse(model.predict(Vs), Ws)}
    names = ["phi0", "phi2_diag", "er_db", "alpha_db"]
    # Two routes into the dB loss: directly, and via a linear-power pre-fit whose
    # landscape is smoother near nulls. They fail on different channels.
    pre, _ = _fit(model, Vs, Ws, names, tol_grad, max_iter, domain="linear")
    fits = [_fit(start, Vs, Ws, names, tol_grad, max_iter) for start in (model, pre)]
    model, rep1 = min(fits, key=lambda f: _sweep_loss(f[0], Vs, Ws))
    polished = _polish(model, Vs, Ws, names, tol_grad, max_iter)
    if polished is not model:
        model, rep1 = _fit(polished, Vs, Ws, names, tol_grad, max_iter)
    report.update(stage1_rmse_db=rmse(model.predict(Vs), Ws), stage1_iterations=rep1.iterations,
                  stage1_termination=rep1.termination)
    warn = not rep1.converged
    if training is not None and len(training):
        tr = training.head(max_train)
        Vt, Wt, _ = _channel_data(tr, channel)
        # Off-diagonal paths sit near the floor throughout the sweep, so their
        # stage-1 losses are unconstrained; restart them from the training residuals.
        model = model.with_params(alpha_db=_initial_alpha(model, Vt, Wt))
        model, rep2 = _fit(model, Vt, Wt, ["alpha_db"], tol_grad, max_iter)
        report.update(stage2_rmse_db=rmse(model.predict(Vt), Wt), stage2_iterations=rep2.iterations,
                      stage2_termination=rep2.termination, n_training=len(tr))
        warn = warn or not rep2.converged
    report["warning"] = bool(warn)
    model.provenance = {"stages": report}
    return model, report


def fit_samxt(sam: AnalyticModel, training: WeightDataset, channel: int | None = None,
              max_train: int = DEFAULT_MAX_TRAIN, tol_grad: float = 1e-9, max_iter: int = 3000):
    """Refine path losses and the full heater coupling matrix from the SAM solution."""
    tr = training.head(max_train)
    V, W, lam = _channel_data(tr, channel)
    start = sam.with_params(kind=SAMXT, phi2=np.diag(sam.phi2_diag))
    report = {"initial_rmse_db": rmse(start.predict(V), W)}
    model, rep = _fit(start, V, W, ["alpha_db", "phi2"], tol_grad, max_iter)
    report.update(training_rmse_db=rmse(model.predict(V), W), iterations=rep.iterations,
                  termination=rep.termination, n_training=len(tr), warning=not rep.converged)
    model.provenance = {"sam": sam.provenance, "samxt": report}
    return model, report


@dataclass
class WavelengthFit:
    wavelengths_nm: np.ndarray
    models: list
    phi2: np.ndarray  # (N_lambda, 9)
    slopes_per_um: np.ndarray  # d phi2 / d lambda, rad V^-2 um^-1
    slope_stderr: np.ndarray
    intercepts: np.ndarray

    def to_rows(self):
        rows = []
        for k, lam in enumerate(self.wavelengths_nm):
            for m in range(self.phi2.shape[1]):
                rows.append({"wavelength_nm": float(lam), "mzi": m + 1, "phi2_rad_per_v2": float(self.phi2[k, m])})
        return rows


def fit_sam_per_wavelength(sweep: WeightDataset, training: WeightDataset | None = None,
                           channels=None, max_train: int = DEFAULT_MAX_TRAIN, **kw) -> WavelengthFit:
    """Independent SAM fit on every channel plus straight-line fits of phi2 vs wavelength.

    Every channel is fitted from its own grid-search start, so the
    per-channel estimates stay independent.
    """
    grid = sweep.grid
    if grid.n_channels < 2:
        raise ValueError("per-wavelength fitting needs at least two channels")
    channels = list(range(grid.n_channels)) if channels is None else list(channels)
    models = [fit_sam(sweep, training, k, max_train, **kw)[0] for k in channels]
    lam_um = grid.center_wavelengths_nm[channels] * 1e-3
    phi2 = np.array([m.phi2_diag for m in models])
    slopes, stderr, icpt = line_fit(lam_um, phi2)
    return WavelengthFit(grid.center_wavelengths_nm[channels], models, phi2, slopes, stderr, icpt)


def line_fit(x, Y):
    """Least-squares lines through each column of ``Y``: (slopes, slope standard errors, intercepts).

    The standard error uses the usual n - 2 residual degrees of freedom.
    """
    x = np.asarray(x, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(x.size, -1)
    if x.size < 3:
        raise ValueError("a slope standard error needs at least three points")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    slopes = xc @ (Y - Y.mean(axis=0)) / sxx
    icpt = Y.mean(axis=0) - slopes * x.mean()
    resid = Y - (icpt + np.outer(x, slopes))
    stderr = np.sqrt((resid * resid).sum(axis=0) / (x.size - 2) / sxx)
    return slopes, stderr, icpt


def load_model(path) -> AnalyticModel:
    return AnalyticModel.from_dict(json.loads(Path(path).read_text()))
