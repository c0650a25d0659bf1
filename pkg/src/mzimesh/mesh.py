"""MZI transfer math, voltage-to-phase conversion and the per-path power models.

Matrix weights are indexed ``(output i, input j)`` and flattened row-major to a
9-vector (``p = 3*i + j`` with zero-based indices) wherever a flat layout is used.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FLOOR_DB = -60.0
FLOOR_LINEAR = 10.0 ** (FLOOR_DB / 10.0)

BAR = "bar"
CROSS = "cross"
_STATE_SIGN = {CROSS: 1.0, BAR: -1.0}

SPEED_OF_LIGHT = 299_792_458.0


def db_to_linear(x_db):
    return 10.0 ** (np.asarray(x_db, dtype=float) / 10.0)


def linear_to_db(x, floor_db=FLOOR_DB):
    """Convert linear power ratios to dB, clamping at ``floor_db``."""
    x = np.asarray(x, dtype=float)
    return 10.0 * np.log10(np.maximum(x, 10.0 ** (floor_db / 10.0)))


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeshTopology:
    """Routing table of a feed-forward MZI mesh.

    ``paths[(i, j)]`` is the ordered list of ``(mzi_index, state)`` pairs the
    light crosses from input ``j`` to output ``i``. All indices are 1-based here
    to match the chip labelling; the array views used in the math are 0-based.
    """

    paths: dict
    n_inputs: int = 3
    n_outputs: int = 3
    n_mzi: int = 9

    def __post_init__(self):
        self.validate()

    def validate(self):
        per_layer = self.n_mzi // 3
        for i in range(1, self.n_outputs + 1):
            for j in range(1, self.n_inputs + 1):
                if (i, j) not in self.paths:
                    raise ValueError(f"missing path for output {i}, input {j}")
        if len(self.paths) != self.n_inputs * self.n_outputs:
            raise ValueError("unexpected extra path entries")
        for key, path in self.paths.items():
            if len(path) != 3:
                raise ValueError(f"path {key} must cross exactly 3 MZIs")
            idx = [m for m, _ in path]
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ValueError(f"path {key} MZI indices must be strictly increasing")
            layers = [(m - 1) // per_layer for m in idx]
            if sorted(set(layers)) != [0, 1, 2]:
                raise ValueError(f"path {key} must use one MZI from each layer")
            for m, state in path:
                if not 1 <= m <= self.n_mzi:
                    raise ValueError(f"MZI index {m} out of range")
                if state not in _STATE_SIGN:
                    raise ValueError(f"unknown MZI state {state!r}")

    @property
    def path_mzi(self) -> np.ndarray:
        """0-based MZI indices, shape (n_outputs, n_inputs, 3)."""
        out = np.zeros((self.n_outputs, self.n_inputs, 3), dtype=int)
        for (i, j), path in self.paths.items():
            out[i - 1, j - 1] = [m - 1 for m, _ in path]
        return out

    @property
    def path_sign(self) -> np.ndarray:
        """+1 for cross, -1 for bar, shape (n_outputs, n_inputs, 3)."""
        out = np.zeros((self.n_outputs, self.n_inputs, 3))
        for (i, j), path in self.paths.items():
            out[i - 1, j - 1] = [_STATE_SIGN[s] for _, s in path]
        return out

    def to_dict(self) -> dict:
        return {
            "n_inputs": self.n_inputs,
            "n_outputs": self.n_outputs,
            "n_mzi": self.n_mzi,
            "paths": [
                {"output": i, "input": j, "mzis": [[m, s] for m, s in self.paths[(i, j)]]}
                for (i, j) in sorted(self.paths)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MeshTopology":
        paths = {
            (int(p["output"]), int(p["input"])): [(int(m), str(s)) for m, s in p["mzis"]]
            for p in d["paths"]
        }
        return cls(paths, int(d["n_inputs"]), int(d["n_outputs"]), int(d["n_mzi"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "MeshTopology":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_topology() -> MeshTopology:
    """3-layer routing: input j enters MZI j, output i leaves MZI 6+i.

    The middle MZI is ``4 + (i + j) mod 3``, which gives output 2 / input 1 the
    path MZI 1 (bar), 4 (cross), 8 (bar). The three diagonal paths use disjoint
    MZIs, so all diagonal weights can be maximised at once.
    """
    paths = {}
    for i in range(1, 4):
        for j in range(1, 4):
            diag = i == j
            paths[(i, j)] = [
                (j, CROSS if diag else BAR),
                (4 + (i + j) % 3, BAR if diag else CROSS),
                (6 + i, CROSS if diag else BAR),
            ]
    return MeshTopology(paths)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class MziPhaseParams:
    """Voltage-to-phase coefficients of every MZI.

    ``phi2`` is the full power-to-phase matrix in rad/V^2: the diagonal holds the
    self-heating coefficients and the off-diagonal entries the thermal crosstalk.
    A 1-D ``phi2`` is accepted and promoted to a diagonal matrix.
    """

    phi0: np.ndarray
    phi2: np.ndarray
    extinction_ratio_db: float = 30.0

    def __post_init__(self):
        self.phi0 = np.asarray(self.phi0, dtype=float)
        phi2 = np.asarray(self.phi2, dtype=float)
        if phi2.ndim == 1:
            phi2 = np.diag(phi2)
        self.phi2 = phi2
        n = self.phi0.shape[0]
        if self.phi2.shape != (n, n):
            raise ValueError(f"phi2 must be {n}x{n}, got {self.phi2.shape}")
        if self.extinction_ratio_db <= 0:
            raise ValueError("extinction ratio must be positive in dB")

    @property
    def n_mzi(self) -> int:
        return self.phi0.shape[0]

    def diagonal_only(self) -> "MziPhaseParams":
        return MziPhaseParams(self.phi0.copy(), np.diag(np.diag(self.phi2)), self.extinction_ratio_db)

    def to_dict(self) -> dict:
        return {
            "phi0_rad": self.phi0.tolist(),
            "phi2_rad_per_v2": self.phi2.tolist(),
            "extinction_ratio_db": float(self.extinction_ratio_db),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MziPhaseParams":
        return cls(d["phi0_rad"], d["phi2_rad_per_v2"], d["extinction_ratio_db"])


@dataclass
class LossMatrix:
    """Linear power transmission of each (output, input) path."""

    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        if np.any(self.alpha <= 0) or np.any(self.alpha > 1):
            raise ValueError("path losses must lie in (0, 1]")

    @property
    def alpha_db(self) -> np.ndarray:
        return 10.0 * np.log10(self.alpha)

    @classmethod
    def from_db(cls, alpha_db) -> "LossMatrix":
        return cls(db_to_linear(alpha_db))


@dataclass
class OpticalPathParams:
    """Arm path-length difference and its heater-power coefficient per MZI (um, um/V^2)."""

    lambda0_um: np.ndarray
    lambda2_um_per_v2: np.ndarray

    def __post_init__(self):
        self.lambda0_um = np.asarray(self.lambda0_um, dtype=float)
        self.lambda2_um_per_v2 = np.asarray(self.lambda2_um_per_v2, dtype=float)

    @classmethod
    def from_phase(cls, phi0, phi2, wavelength_nm: float) -> "OpticalPathParams":
        lam_um = wavelength_nm * 1e-3
        return cls(np.asarray(phi0) * lam_um / (2 * np.pi), np.asarray(phi2) * lam_um / (2 * np.pi))

    def to_dict(self) -> dict:
        return {
            "lambda0_um": self.lambda0_um.tolist(),
            "lambda2_um_per_v2": self.lambda2_um_per_v2.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OpticalPathParams":
        return cls(d["lambda0_um"], d["lambda2_um_per_v2"])


@dataclass
class WavelengthGrid:
    center_wavelengths_nm: np.ndarray
    channel_spacing_ghz: float = 50.0
    reference_index: int = 0

    def __post_init__(self):
        self.center_wavelengths_nm = np.atleast_1d(np.asarray(self.center_wavelengths_nm, dtype=float))
        if np.any(np.diff(self.center_wavelengths_nm) <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        if not 0 <= self.reference_index < self.n_channels:
            raise ValueError("reference index out of range")

    @property
    def n_channels(self) -> int:
        return self.center_wavelengths_nm.shape[0]

    @property
    def reference_nm(self) -> float:
        return float(self.center_wavelengths_nm[self.reference_index])

    def index_of(self, wavelength_nm: float, atol_nm: float = 1e-6) -> int:
        k = int(np.argmin(np.abs(self.center_wavelengths_nm - wavelength_nm)))
        if abs(self.center_wavelengths_nm[k] - wavelength_nm) > atol_nm:
            raise ValueError(f"wavelength {wavelength_nm} nm is not on the grid")
        return k

    def single(self, k: int | None = None) -> "WavelengthGrid":
        k = self.reference_index if k is None else k
        return WavelengthGrid(self.center_wavelengths_nm[k : k + 1], self.channel_spacing_ghz, 0)

    def to_dict(self) -> dict:
        return {
            "n_channels": self.n_channels,
            "center_wavelengths_nm": self.center_wavelengths_nm.tolist(),
            "channel_spacing_ghz": float(self.channel_spacing_ghz),
            "reference_index": int(self.reference_index),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WavelengthGrid":
        return cls(d["center_wavelengths_nm"], d["channel_spacing_ghz"], d["reference_index"])

    def __eq__(self, other):
        return (
            isinstance(other, WavelengthGrid)
            and np.array_equal(self.center_wavelengths_nm, other.center_wavelengths_nm)
            and self.channel_spacing_ghz == other.channel_spacing_ghz
            and self.reference_index == other.reference_index
        )


def itu_c_band_grid(n_channels: int = 100, spacing_ghz: float = 50.0, first_thz: float = 196.15,
                    reference_nm: float = 1550.0) -> WavelengthGrid:
    """ITU DWDM channels on a 50 GHz grid, sorted by increasing wavelength.

    With the defaults the 100 channels run 1528.4-1568.0 nm and, once
    integrated in groups of 10, the sixth band is centred at ~1549.9 nm.
    """
    freqs_thz = first_thz - spacing_ghz * 1e-3 * np.arange(n_channels)
    lam_nm = SPEED_OF_LIGHT / (freqs_thz * 1e12) * 1e9
    ref = int(np.argmin(np.abs(lam_nm - reference_nm)))
    return WavelengthGrid(lam_nm, spacing_ghz, ref)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def phase_from_voltage(params: MziPhaseParams, m: int, v) -> float:
    """Phase of MZI ``m`` (0-based) for heater voltages ``v``."""
    v = np.asarray(v, dtype=float)
    if v.shape != (params.n_mzi,):
        raise ValueError(f"expected {params.n_mzi} voltages, got shape {v.shape}")
    return float(params.phi0[m] + params.phi2[m] @ v**2)


def phases(phi0, phi2, v):
    """All MZI phases for a batch of voltage vectors, shape (..., n_mzi)."""
    v = np.asarray(v, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    if phi2.ndim == 1:
        return phi0 + phi2 * v**2
    if v.shape[-1] != phi2.shape[1]:
        raise ValueError(f"voltage length {v.shape[-1]} does not match phi2 {phi2.shape}")
    return phi0 + (v**2) @ phi2.T


def ideal_mzi_transfer(phi: float, theta: float) -> np.ndarray:
    """2x2 field transfer matrix of a lossless MZI with balanced couplers."""
    ep = np.exp(1j * phi)
    et = np.exp(1j * theta)
    return 0.5 * np.array([[et * (ep - 1), 1j * et * (ep + 1)], [1j * (ep + 1), -(ep - 1)]])


def extinction_reflectance(er_db):
    """(sqrt(ER) - 1) / (sqrt(ER) + 1) with ER given in dB."""
    s = np.sqrt(db_to_linear(er_db))
    return (s - 1.0) / (s + 1.0)


def mzi_power_term(phi, er_db, state):
    """Power transmission of one MZI with finite extinction ratio.

    ``state`` is ``"bar"``/``"cross"`` or a sign array (+1 cross, -1 bar).
    Expanded form: (1 + r^2 + 2 s r cos(phi)) / 4.
    """
    if np.any(np.asarray(er_db) <= 0):
        raise ValueError("extinction ratio must be positive in dB")
    sign = _STATE_SIGN[state] if isinstance(state, str) else np.asarray(state, dtype=float)
    r = extinction_reflectance(er_db)
    return np.abs(r + sign * np.exp(1j * np.asarray(phi))) ** 2 / 4.0


def _path_power_db(topology: MeshTopology, phi, er_db, alpha_db):
    """Unclamped path weights in dB, shape (..., n_out, n_in)."""
    phi = np.asarray(phi, dtype=float)
    r = extinction_reflectance(er_db)
    sign = topology.path_sign
    phi_path = phi[..., topology.path_mzi]
    terms = (1.0 + r * r + 2.0 * sign * r * np.cos(phi_path)) / 4.0
    with np.errstate(divide="ignore"):
        return alpha_db + 10.0 * np.log10(terms).sum(axis=-1)


def _forward(topology, phase_params, losses, v, return_mask):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != topology.n_mzi:
        raise ValueError(f"expected {topology.n_mzi} voltages, got {v.shape[-1]}")
    phi = phases(phase_params.phi0, phase_params.phi2, v)
    raw = _path_power_db(topology, phi, phase_params.extinction_ratio_db, losses.alpha_db)
    floored = raw < FLOOR_DB
    out = np.where(floored, FLOOR_DB, raw)
    return (out, floored) if return_mask else out


def sam_forward(topology: MeshTopology, phase_params: MziPhaseParams, losses: LossMatrix, v,
                return_mask: bool = False):
    """Crosstalk-free path model: weights in dB, shape (..., 3, 3).

    Any off-diagonal entries of ``phase_params.phi2`` are ignored. With
    ``return_mask`` a boolean array marking floor-clamped weights is also returned.
    """
    return _forward(topology, phase_params.diagonal_only(), losses, v, return_mask)


def samxt_forward(topology: MeshTopology, phase_params: MziPhaseParams, losses: LossMatrix, v,
                  return_mask: bool = False):
    """Path model with every heater contributing to every MZI phase."""
    return _forward(topology, phase_params, losses, v, return_mask)


def phase_params_at_wavelength(opt: OpticalPathParams, lambda_nm: float, er_db: float = 30.0) -> MziPhaseParams:
    if lambda_nm <= 0:
        raise ValueError("wavelength must be positive")
    lam_um = lambda_nm * 1e-3
    return MziPhaseParams(
        2 * np.pi * opt.lambda0_um / lam_um,
        2 * np.pi * opt.lambda2_um_per_v2 / lam_um,
        er_db,
    )
