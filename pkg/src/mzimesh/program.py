"""Inverse programming: heater voltages that make a forward model realise a target weight matrix."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analytic import SAMXT, AnalyticModel
from .chip import ChipGroundTruth
from .evaluation import rmse_db
from .mesh import FLOOR_DB
from .optimize import bfgs_minimize

V_MIN, V_MAX = 0.0, 2.0
UNREACHABLE_DB = 1.0


def ground_truth_model(chip: ChipGroundTruth, wavelength_nm: float | None = None) -> AnalyticModel:
    """The emulator's own noise-free response at one wavelength, as a differentiable model."""
    lam = chip.reference_nm if wavelength_nm is None else wavelength_nm
    p = chip.phase_params(lam)
    return AnalyticModel(SAMXT, p.phi0, p.phi2, chip.er_db, chip.path_loss_db(lam), chip.topology, lam,
                         {"source": "ground truth", "chip_config_hash": chip.config_hash()})


def _channel_list(model, channels):
    multi = getattr(model, "n_channels", 1) > 1 or getattr(model, "kind", "") in ("nn-lr", "nn-ls", "nn-lg")
    if channels is None:
        if multi and model.n_channels > 1:
            raise ValueError("multi-channel models need an explicit channel selection")
        return [None]
    if np.isscalar(channels):
        return [int(channels)]
    return [int(c) for c in channels]


def _predict(model, v, channel):
    return model.predict(v) if channel is None else model.predict(v, channel=channel)


def _vjp(model, v, up, channel):
    return model.vjp_input(v, up) if channel is None else model.vjp_input(v, up, channel=channel)


@dataclass
class ProgramResult:
    voltages: np.ndarray
    achieved_db: np.ndarray  # (n_channels, 3, 3)
    target_db: np.ndarray
    residual_db: float
    reachable: bool
    channels: list
    start_residuals_db: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "voltages_v": [round(float(x), 4) for x in self.voltages],
            "target_db": self.target_db.tolist(),
            "achieved_db": np.round(self.achieved_db, 4).tolist(),
            "residual_rmse_db": round(self.residual_db, 4),
            "reachable": self.reachable,
            "channels": self.channels,
            "start_residuals_db": [round(r, 4) for r in self.start_residuals_db],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _objective(model, t, chans):
    n = 9 * len(chans)

    def fun(z):
        v = 1.0 + np.sin(z)
        f = 0.0
        dv = np.zeros(9)
        for c in chans:
            pred = np.asarray(_predict(model, v[None], c)).reshape(9)
            d = pred - t
            f += float(d @ d)
            up = np.where(pred > FLOOR_DB, 2.0 * d, 0.0)
            dv += np.asarray(_vjp(model, v[None], up[None], c)).reshape(9)
        return f / n, dv * np.cos(z) / n

    return fun


def _one_start(args):
    model, t, chans, v0, max_iter = args
    z0 = np.arcsin(np.clip(v0 - 1.0, -1.0, 1.0))
    rep = bfgs_minimize(_objective(model, t, chans), z0, tol_grad=1e-10, max_iter=max_iter)
    return float(np.sqrt(max(rep.f, 0.0))), rep.x


def program_voltages(model, target_db, channels=None, multistart: int = 8, seed: int = 0,
                     threshold_db: float = UNREACHABLE_DB, max_iter: int = 500, jobs: int = 1) -> ProgramResult:
    """Minimise the dB RMSE between ``model`` and ``target_db`` (3x3) over heater voltages.

    Bounds are handled by ``v = 1 + sin(z)``. ``channels`` selects one channel
    or a set of channels of a multi-channel model; the same target applies to
    each. The best of ``multistart`` seeded uniform starts is returned; with
    ``jobs > 1`` the starts run in separate processes with identical results.
    """
    target = np.asarray(target_db, dtype=float)
    if target.shape != (3, 3):
        raise ValueError("target must be a 3x3 matrix of dB weights")
    if np.any(target < FLOOR_DB):
        raise ValueError(f"targets must be >= {FLOOR_DB} dB")
    if multistart < 1:
        raise ValueError("multistart must be at least 1")
    chans = _channel_list(model, channels)
    t = target.ravel()
    rng = np.random.default_rng([seed, 0x5EED])
    starts = rng.uniform(V_MIN, V_MAX, (multistart, 9))
    cells = [(model, t, chans, v0, max_iter) for v0 in starts]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            runs = list(ex.map(_one_start, cells))
    else:
        runs = [_one_start(c) for c in cells]
    residuals = [r for r, _ in runs]
    best = int(np.argmin(residuals))
    v = np.clip(1.0 + np.sin(runs[best][1]), V_MIN, V_MAX)
    achieved = np.stack([np.asarray(_predict(model, v[None], c)).reshape(3, 3) for c in chans])
    resid = rmse_db(achieved, np.broadcast_to(target, achieved.shape))
    return ProgramResult(v, achieved, target, resid, resid <= threshold_db, chans, residuals)
