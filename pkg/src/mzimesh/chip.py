"""Synthetic 3x3 MZI-mesh chip and the measurement protocols run against it.

The emulated chip has fabrication-scattered phase offsets and heater
efficiencies, nearest-neighbour thermal crosstalk, path losses with a linear
spectral tilt, wavelength-dependent phase coefficients, and additive dB noise
that is averaged over repeated acquisitions.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import (
    FLOOR_DB,
    MeshTopology,
    MziPhaseParams,
    OpticalPathParams,
    WavelengthGrid,
    _path_power_db,
    db_to_linear,
    default_topology,
    itu_c_band_grid,
    linear_to_db,
    phase_params_at_wavelength,
    phases,
)

V_MIN, V_MAX = 0.0, 2.0
SWEEP_STEP_V = 0.1

# RNG stream tags; every random draw is keyed by (seed, tag, ...).
_TAG_FAB, _TAG_SWEEP, _TAG_RANDOM_V, _TAG_RANDOM_NOISE, _TAG_SPLIT = range(5)


@dataclass
class MeasurementNoiseSpec:
    sigma_db: float = 0.2
    n_repeats: int = 6
    drift_db: float = 0.0

    def __post_init__(self):
        if self.sigma_db < 0:
            raise ValueError("sigma_db must be non-negative")
        if self.n_repeats < 1:
            raise ValueError("n_repeats must be at least 1")
        if self.drift_db < 0:
            raise ValueError("drift_db must be non-negative")


@dataclass
class ChipGroundTruth:
    """Hidden parameters of the emulated chip.

    ``crosstalk_rad_per_v2`` holds only the off-diagonal heater couplings; the
    self-heating terms live in ``opt_params``. With ``dispersive=False`` the
    phase coefficients and losses are evaluated at ``reference_nm`` for every
    channel.
    """

    topology: MeshTopology
    opt_params: OpticalPathParams
    crosstalk_rad_per_v2: np.ndarray
    loss_db: np.ndarray
    loss_slope_db_per_nm: np.ndarray
    er_db: float = 30.0
    noise: MeasurementNoiseSpec = field(default_factory=MeasurementNoiseSpec)
    seed: int = 0
    reference_nm: float = 1550.0
    dispersive: bool = True

    def __post_init__(self):
        self.crosstalk_rad_per_v2 = np.asarray(self.crosstalk_rad_per_v2, dtype=float)
        self.loss_db = np.asarray(self.loss_db, dtype=float)
        self.loss_slope_db_per_nm = np.asarray(self.loss_slope_db_per_nm, dtype=float)
        xt = self.crosstalk_rad_per_v2
        if np.any(np.diag(xt) != 0):
            raise ValueError("crosstalk matrix must have a zero diagonal")
        diag = self.phase_params(self.reference_nm).phi2.diagonal()
        if np.any(np.abs(xt) >= diag[:, None]):
            raise ValueError("crosstalk must be smaller than the self-heating coefficient")
        if np.any(self.loss_db > 0):
            raise ValueError("path losses must be <= 0 dB")

    def phase_params(self, wavelength_nm: float) -> MziPhaseParams:
        lam = wavelength_nm if self.dispersive else self.reference_nm
        p = phase_params_at_wavelength(self.opt_params, lam, self.er_db)
        return MziPhaseParams(p.phi0, p.phi2 + self.crosstalk_rad_per_v2, self.er_db)

    def path_loss_db(self, wavelength_nm: float) -> np.ndarray:
        if not self.dispersive:
            return self.loss_db
        return self.loss_db + self.loss_slope_db_per_nm * (wavelength_nm - self.reference_nm)

    def noise_free(self, v, grid: WavelengthGrid) -> np.ndarray:
        """Ideal weights in dB, shape (L, 9, N_lambda) for voltages (L, 9)."""
        v = np.atleast_2d(np.asarray(v, dtype=float))
        out = np.empty((v.shape[0], 9, grid.n_channels))
        for k, lam in enumerate(grid.center_wavelengths_nm):
            p = self.phase_params(lam)
            phi = phases(p.phi0, p.phi2, v)
            w = _path_power_db(self.topology, phi, self.er_db, self.path_loss_db(lam))
            out[:, :, k] = np.maximum(w, FLOOR_DB).reshape(v.shape[0], 9)
        return out

    def to_dict(self) -> dict:
        return {
            "topology": self.topology.to_dict(),
            "opt_params": self.opt_params.to_dict(),
            "crosstalk_rad_per_v2": self.crosstalk_rad_per_v2.tolist(),
            "loss_db": self.loss_db.tolist(),
            "loss_slope_db_per_nm": self.loss_slope_db_per_nm.tolist(),
            "er_db": float(self.er_db),
            "noise": {
                "sigma_db": self.noise.sigma_db,
                "n_repeats": self.noise.n_repeats,
                "drift_db": self.noise.drift_db,
            },
            "seed": int(self.seed),
            "reference_nm": float(self.reference_nm),
            "dispersive": bool(self.dispersive),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChipGroundTruth":
        return cls(
            MeshTopology.from_dict(d["topology"]),
            OpticalPathParams.from_dict(d["opt_params"]),
            d["crosstalk_rad_per_v2"],
            d["loss_db"],
            d["loss_slope_db_per_nm"],
            d["er_db"],
            MeasurementNoiseSpec(**d["noise"]),
            d["seed"],
            d["reference_nm"],
            d["dispersive"],
        )

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ChipGroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text()))


def crosstalk_matrix(phi2_diag, coupling=(0.08, 0.03)) -> np.ndarray:
    """Off-diagonal heater coupling decaying with MZI index distance.

    ``coupling[d-1]`` is the fraction of the victim's self-heating coefficient
    picked up from a heater ``d`` positions away.
    """
    n = len(phi2_diag)
    xt = np.zeros((n, n))
    for d, frac in enumerate(coupling, start=1):
        for m in range(n - d):
            xt[m, m + d] = frac * phi2_diag[m]
            xt[m + d, m] = frac * phi2_diag[m + d]
    return xt


def default_chip(seed: int = 0, coupling=(0.08, 0.03), sigma_db: float = 0.2, n_repeats: int = 6,
                 dispersive: bool = True, er_db: float = 30.0, loss_slope_max_db_per_nm: float = 0.03,
                 drift_db: float = 0.0, topology: MeshTopology | None = None,
                 reference_nm: float = 1550.0) -> ChipGroundTruth:
    """Draw a chip with the default fabrication spread."""
    rng = np.random.default_rng([seed, _TAG_FAB])
    topology = topology or default_topology()
    n = topology.n_mzi
    phi0 = rng.uniform(0.0, 2 * np.pi, n)
    phi2 = rng.uniform(0.9, 1.2, n)
    loss_db = rng.uniform(-11.0, -9.0, (3, 3))
    slope = rng.uniform(-loss_slope_max_db_per_nm, loss_slope_max_db_per_nm, (3, 3))
    return ChipGroundTruth(
        topology=topology,
        opt_params=OpticalPathParams.from_phase(phi0, phi2, reference_nm),
        crosstalk_rad_per_v2=crosstalk_matrix(phi2, coupling),
        loss_db=loss_db,
        loss_slope_db_per_nm=slope if dispersive else np.zeros((3, 3)),
        er_db=er_db,
        noise=MeasurementNoiseSpec(sigma_db, n_repeats, drift_db),
        seed=seed,
        reference_nm=reference_nm,
        dispersive=dispersive,
    )


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class WeightDataset:
    """Voltage/weight records over a wavelength grid.

    ``weights_db`` has shape (L, 9, N_lambda); row ``p`` of a record is the
    flattened (output, input) index ``3*i + j``. ``splits`` maps a split name
    to positions into the record arrays.
    """

    grid: WavelengthGrid
    voltages: np.ndarray
    weights_db: np.ndarray
    ids: np.ndarray
    splits: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.voltages = np.asarray(self.voltages, dtype=float)
        self.weights_db = np.asarray(self.weights_db, dtype=float)
        self.ids = np.asarray(self.ids, dtype=int)
        L = self.voltages.shape[0]
        if self.voltages.shape != (L, 9):
            raise ValueError("voltages must have shape (L, 9)")
        if self.weights_db.shape != (L, 9, self.grid.n_channels):
            raise ValueError(f"weights must have shape ({L}, 9, {self.grid.n_channels})")
        self.splits = {k: np.asarray(v, dtype=int) for k, v in self.splits.items()}
        seen = set()
        for name, idx in self.splits.items():
            s = set(idx.tolist())
            if s & seen:
                raise ValueError(f"split {name!r} overlaps another split")
            seen |= s

    def __len__(self):
        return self.voltages.shape[0]

    @property
    def n_channels(self) -> int:
        return self.grid.n_channels

    def split(self, name: str) -> "WeightDataset":
        idx = self.splits[name]
        return self.take(idx)

    def take(self, idx) -> "WeightDataset":
        idx = np.asarray(idx, dtype=int)
        return WeightDataset(self.grid, self.voltages[idx], self.weights_db[idx], self.ids[idx],
                             meta=dict(self.meta))

    def head(self, n: int) -> "WeightDataset":
        return self.take(np.arange(min(n, len(self))))

    def channel(self, k: int) -> "WeightDataset":
        """Single-wavelength view of channel ``k``."""
        return WeightDataset(self.grid.single(k), self.voltages, self.weights_db[:, :, k : k + 1],
                             self.ids, dict(self.splits), dict(self.meta))

    def merged_training(self) -> "WeightDataset":
        """Fold the validation split into training."""
        splits = dict(self.splits)
        val = splits.pop("validation", np.array([], dtype=int))
        splits["training"] = np.concatenate([splits["training"], val])
        return WeightDataset(self.grid, self.voltages, self.weights_db, self.ids, splits, dict(self.meta))

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        """Write ``path`` (JSON Lines records) and ``path + '.meta.json'``."""
        path = Path(path)
        with open(path, "w") as fh:
            for rid, v, w in zip(self.ids, self.voltages, self.weights_db):
                fh.write(json.dumps({"id": int(rid), "voltages_v": v.tolist(), "weights_db": w.tolist()}) + "\n")
        meta = dict(self.meta)
        meta["grid"] = self.grid.to_dict()
        meta["units"] = {"voltages_v": "V", "weights_db": "dB", "center_wavelengths_nm": "nm"}
        meta["splits"] = {k: self.ids[v].tolist() for k, v in sorted(self.splits.items())}
        meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "WeightDataset":
        path = Path(path)
        meta = json.loads(meta_path(path).read_text())
        ids, volts, weights = [], [], []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    ids.append(rec["id"])
                    volts.append(rec["voltages_v"])
                    weights.append(rec["weights_db"])
        grid = WavelengthGrid.from_dict(meta.pop("grid"))
        meta.pop("units", None)
        pos = {rid: k for k, rid in enumerate(ids)}
        splits = {k: [pos[r] for r in v] for k, v in meta.pop("splits", {}).items()}
        return cls(grid, np.array(volts).reshape(-1, 9), np.array(weights).reshape(len(ids), 9, -1),
                   np.array(ids), splits, meta)

    def to_csv(self, path) -> None:
        """Long-format table: one row per (record, weight, wavelength)."""
        lam = self.grid.center_wavelengths_nm
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "output", "input", "wavelength_nm", "weight_db"] + [f"v{m + 1}" for m in range(9)])
            for rid, v, W in zip(self.ids, self.voltages, self.weights_db):
                for p in range(9):
                    for k in range(self.n_channels):
                        w.writerow([int(rid), p // 3 + 1, p % 3 + 1, f"{lam[k]:.4f}", repr(float(W[p, k]))]
                                   + [repr(float(x)) for x in v])


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


# ---------------------------------------------------------------------------
# Measurement protocols
# ---------------------------------------------------------------------------


def emulate_measurement(chip: ChipGroundTruth, v, grid: WavelengthGrid, record_id=0, stream: int = 0) -> np.ndarray:
    """Averaged noisy weights in dB.

    ``v`` of shape (9,) gives (9, N_lambda); a batch (L, 9) gives (L, 9, N_lambda)
    and needs one ``record_id`` per row. Each record's noise comes from its own
    generator keyed by ``(chip.seed, stream, record_id)``.
    """
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    V = np.atleast_2d(v)
    if V.shape[-1] != 9:
        raise ValueError("expected 9 heater voltages")
    if np.any(V < V_MIN) or np.any(V > V_MAX):
        raise ValueError(f"heater voltages must lie in [{V_MIN}, {V_MAX}] V")
    ids = np.atleast_1d(np.asarray(record_id, dtype=int))
    if ids.shape[0] != V.shape[0]:
        raise ValueError("one record id per voltage vector is required")
    clean = chip.noise_free(V, grid)
    ns = chip.noise
    if ns.sigma_db == 0 and ns.drift_db == 0:
        out = clean
    else:
        out = np.empty_like(clean)
        for n, rid in enumerate(ids):
            rng = np.random.default_rng([chip.seed, _TAG_RANDOM_NOISE, stream, int(rid)])
            noise = rng.normal(0.0, ns.sigma_db, (ns.n_repeats,) + clean.shape[1:]).mean(axis=0)
            drift = rng.uniform(-ns.drift_db / 2, ns.drift_db / 2) if ns.drift_db > 0 else 0.0
            out[n] = clean[n] + noise + drift
        out = np.maximum(out, FLOOR_DB)
    return out[0] if single else out


def _diag_score(chip: ChipGroundTruth, V: np.ndarray, grid: WavelengthGrid) -> np.ndarray:
    w = chip.noise_free(V, grid.single())[:, :, 0]
    return w[:, [0, 4, 8]].sum(axis=1)


def sweep_baseline(chip: ChipGroundTruth, grid: WavelengthGrid, max_passes: int = 50) -> np.ndarray:
    """Per-heater coordinate search on the sweep grid maximising the summed diagonal weights (dB)."""
    levels = np.round(np.arange(V_MIN, V_MAX + SWEEP_STEP_V / 2, SWEEP_STEP_V), 10)
    base = np.zeros(9)
    best = _diag_score(chip, base[None], grid)[0]
    for _ in range(max_passes):
        changed = False
        for m in range(9):
            cand = np.repeat(base[None], levels.size, axis=0)
            cand[:, m] = levels
            scores = _diag_score(chip, cand, grid)
            k = int(np.argmax(scores))
            if scores[k] > best + 1e-12:
                best = scores[k]
                base = cand[k].copy()
                changed = True
        if not changed:
            break
    return base


def generate_sweep_dataset(chip: ChipGroundTruth, grid: WavelengthGrid) -> WeightDataset:
    """One-heater-at-a-time sweep, 0-2 V in 0.1 V steps (9 x 21 = 189 records)."""
    base = sweep_baseline(chip, grid)
    levels = np.round(np.arange(V_MIN, V_MAX + SWEEP_STEP_V / 2, SWEEP_STEP_V), 10)
    V = np.repeat(base[None], 9 * levels.size, axis=0)
    for m in range(9):
        V[m * levels.size : (m + 1) * levels.size, m] = levels
    ids = np.arange(V.shape[0])
    W = emulate_measurement(chip, V, grid, ids, stream=_TAG_SWEEP)
    meta = {"protocol": "sweep", "seed": chip.seed, "chip_config_hash": chip.config_hash(),
            "baseline_v": base.tolist()}
    return WeightDataset(grid, V, W, ids, {"sweep": ids}, meta)


def split_counts(n: int, fractions=(0.70, 0.15, 0.15)):
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return n_train, n_val, n - n_train - n_val


def generate_random_dataset(chip: ChipGroundTruth, grid: WavelengthGrid, n: int = 5100,
                            split=(0.70, 0.15, 0.15), merge_validation: bool = False) -> WeightDataset:
    """i.i.d. uniform heater voltages with a seeded training/validation/testing split."""
    if n < 10:
        raise ValueError("need at least 10 records to split")
    n_train, n_val, _ = split_counts(n, split)
    V = np.random.default_rng([chip.seed, _TAG_RANDOM_V]).uniform(V_MIN, V_MAX, (n, 9))
    ids = np.arange(n)
    W = emulate_measurement(chip, V, grid, ids, stream=_TAG_RANDOM_V)
    perm = np.random.default_rng([chip.seed, _TAG_SPLIT]).permutation(n)
    splits = {
        "training": np.sort(perm[:n_train]),
        "validation": np.sort(perm[n_train : n_train + n_val]),
        "testing": np.sort(perm[n_train + n_val :]),
    }
    meta = {"protocol": "random", "seed": chip.seed, "chip_config_hash": chip.config_hash()}
    ds = WeightDataset(grid, V, W, ids, splits, meta)
    return ds.merged_training() if merge_validation else ds


def downsample_bands(ds: WeightDataset, factor: int, input_psd=None) -> WeightDataset:
    """Integrate groups of ``factor`` adjacent channels into one band.

    Each band weight is (sum of output power) / (sum of input power) over its
    member channels; ``input_psd`` (linear, per channel) defaults to flat.
    """
    n = ds.n_channels
    if factor < 1 or n % factor:
        raise ValueError(f"{n} channels cannot be grouped by {factor}")
    psd = np.ones(n) if input_psd is None else np.asarray(input_psd, dtype=float)
    nb = n // factor
    lin = db_to_linear(ds.weights_db) * psd
    p_out = lin.reshape(len(ds), 9, nb, factor).sum(axis=-1)
    p_in = psd.reshape(nb, factor).sum(axis=-1)
    W = linear_to_db(p_out / p_in)
    lam = ds.grid.center_wavelengths_nm.reshape(nb, factor).mean(axis=-1)
    ref = int(np.argmin(np.abs(lam - 1550.0)))
    grid = WavelengthGrid(lam, ds.grid.channel_spacing_ghz * factor, ref)
    meta = dict(ds.meta)
    meta["band_factor"] = meta.get("band_factor", 1) * factor
    return WeightDataset(grid, ds.voltages, W, ds.ids, dict(ds.splits), meta)


def default_grids():
    """(100-channel grid, single reference channel grid)."""
    g = itu_c_band_grid()
    return g, g.single()
