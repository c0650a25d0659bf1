"""Neural-network surrogates mapping heater voltages (and wavelength) to weights in dB.

Kinds:

``nn-sw``     one network, one wavelength channel.
``nn-lr``     ``nn-sw`` core at the reference channel plus a fitted dB offset per channel.
``nn-ls``     one ``nn-sw``-shaped network per channel.
``nn-lg``     one network with the normalised wavelength as an extra input.
``tcnn``      dense layers followed by a transposed convolution across channels.
``tcnn-100``  the same for the undownsampled 100-channel grid.

Every network sees ``u = [v, v^2]`` min-max scaled to [-1, 1] per feature and
predicts per-output min-max scaled weights.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from ..chip import WeightDataset
from ..mesh import FLOOR_DB, WavelengthGrid
from ..optimize import bfgs_minimize, lbfgs_minimize
from .layers import ConvTranspose1d, Dense, Reshape, Sequential, Tanh

log = logging.getLogger(__name__)

NN_SW = "nn-sw"
NN_LR = "nn-lr"
NN_LS = "nn-ls"
NN_LG = "nn-lg"
TCNN = "tcnn"
TCNN_100 = "tcnn-100"
KINDS = (NN_SW, NN_LR, NN_LS, NN_LG, TCNN, TCNN_100)
MULTI_CHANNEL = (NN_LR, NN_LS, NN_LG, TCNN, TCNN_100)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


@dataclass
class MinMax:
    """Per-feature affine map of [min, max] onto [-1, 1]; constant features map to 0."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)

    @classmethod
    def fit(cls, x) -> "MinMax":
        x = np.asarray(x, dtype=float)
        return cls(x.min(axis=0), x.max(axis=0))

    @property
    def half_range(self):
        return (self.hi - self.lo) / 2.0

    @property
    def center(self):
        return (self.hi + self.lo) / 2.0

    def normalize(self, x):
        hr = self.half_range
        safe = np.where(hr > 0, hr, 1.0)
        return np.where(hr > 0, (x - self.center) / safe, 0.0)

    def denormalize(self, z):
        return z * self.half_range + self.center

    def to_dict(self):
        return {"min": self.lo.tolist(), "max": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["min"], d["max"])


def features(v) -> np.ndarray:
    """u = [v, v^2]."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    return np.concatenate([v, v * v], axis=1)


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------


@dataclass
class SurrogateArchitecture:
    kind: str
    hidden: tuple = (64, 64)
    n_channels: int = 1
    conv_kernel: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.kind in (TCNN, TCNN_100):
            if len(self.hidden) != 2 or self.hidden[1] != 9 * self.n_channels:
                raise ValueError("transposed-conv models need two dense layers, the second of width 9*N_lambda")
            if self.conv_kernel % 2 != 1:
                raise ValueError("conv kernel must be odd so the crop is symmetric")

    @property
    def n_inputs(self) -> int:
        return 19 if self.kind == NN_LG else 18

    def build(self) -> Sequential:
        layers = []
        n_in = self.n_inputs
        for h in self.hidden:
            layers += [Dense(n_in, h), Tanh()]
            n_in = h
        if self.kind in (TCNN, TCNN_100):
            k = self.conv_kernel
            layers += [Reshape((9, self.n_channels)),
                       ConvTranspose1d(9, 9, k, stride=1, crop=((k - 1) // 2, (k - 1) // 2))]
        else:
            layers.append(Dense(n_in, 9))
        return Sequential(layers, (self.n_inputs,))

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def default_architecture(kind: str, n_channels: int = 1) -> SurrogateArchitecture:
    if kind in (NN_SW, NN_LR, NN_LS):
        return SurrogateArchitecture(kind, (64, 64), n_channels)
    if kind == NN_LG:
        return SurrogateArchitecture(kind, (96, 96), n_channels)
    if kind == TCNN:
        return SurrogateArchitecture(kind, (96, 9 * n_channels), n_channels)
    if kind == TCNN_100:
        return SurrogateArchitecture(kind, (128, 9 * n_channels), n_channels)
    raise ValueError(f"unknown surrogate kind {kind!r}")


# ---------------------------------------------------------------------------
# Trained model
# ---------------------------------------------------------------------------


@dataclass
class _Member:
    """One trained network with its input and output scalings."""

    net: Sequential
    in_norm: MinMax
    out_norm: MinMax

    def forward_z(self, U, extra=None):
        Z = self.in_norm.normalize(U)
        if extra is not None:
            Z = np.concatenate([Z, extra], axis=1)
        return self.net.forward(Z)

    def predict(self, U, extra=None):
        return self.out_norm.denormalize(self.forward_z(U, extra))

    def vjp(self, U, v, upstream, extra=None):
        """d(sum(upstream * prediction)) / dv."""
        self.forward_z(U, extra)
        dz = upstream * self.out_norm.half_range
        self.net.zero_grad()
        dZ = self.net.backward(dz)[:, :18]
        hr = self.in_norm.half_range
        dU = np.where(hr > 0, dZ / np.where(hr > 0, hr, 1.0), 0.0)
        return dU[:, :9] + 2.0 * v * dU[:, 9:]

    def to_dict(self):
        return {"network": self.net.config(), "params": self.net.flat.tolist(),
                "input_norm": self.in_norm.to_dict(), "output_norm": self.out_norm.to_dict()}

    @classmethod
    def from_dict(cls, d):
        net = Sequential.from_config(d["network"])
        net.set_params(np.asarray(d["params"], dtype=float))
        return cls(net, MinMax.from_dict(d["input_norm"]), MinMax.from_dict(d["output_norm"]))


@dataclass
class TrainedSurrogate:
    """A trained surrogate of any kind.

    ``predict(v)`` returns (L, 9) for ``nn-sw`` and (L, 9, N_lambda) for the
    multi-channel kinds; pass ``channel`` to get one (L, 9) slice.
    """

    arch: SurrogateArchitecture
    members: list
    grid: WavelengthGrid
    offsets_db: np.ndarray | None = None
    lambda_norm: MinMax | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.arch.kind

    @property
    def n_channels(self) -> int:
        return self.grid.n_channels

    def _check_channel(self, channel):
        if channel is None:
            return None
        if not 0 <= channel < self.n_channels:
            raise ValueError(f"channel {channel} outside the trained grid of {self.n_channels}")
        return int(channel)

    def channel_index(self, wavelength_nm: float) -> int:
        return self.grid.index_of(wavelength_nm, atol_nm=1e-3)

    def _lambda_column(self, k, n):
        z = self.lambda_norm.normalize(np.array([self.grid.center_wavelengths_nm[k]]))
        return np.full((n, 1), z[0])

    def predict(self, v, channel: int | None = None) -> np.ndarray:
        single = np.ndim(v) == 1
        v = np.atleast_2d(np.asarray(v, dtype=float))
        channel = self._check_channel(channel)
        U = features(v)
        kind = self.kind
        if kind == NN_SW:
            out = self.members[0].predict(U)
        elif kind == NN_LR:
            core = self.members[0].predict(U)
            out = core if channel is not None else None
            if channel is None:
                out = core[:, :, None] + self.offsets_db[None, None, :]
            else:
                out = core + self.offsets_db[channel]
        elif kind == NN_LS:
            ks = range(self.n_channels) if channel is None else [channel]
            out = np.stack([self.members[k].predict(U) for k in ks], axis=-1)
        elif kind == NN_LG:
            ks = range(self.n_channels) if channel is None else [channel]
            out = np.stack([self.members[0].predict(U, self._lambda_column(k, len(v))) for k in ks], axis=-1)
        else:
            out = self.members[0].predict(U)
            if channel is not None:
                out = out[:, :, channel : channel + 1]
        if channel is not None and out.ndim == 3:
            out = out[:, :, 0]
        out = np.maximum(out, FLOOR_DB)
        return out[0] if single else out

    def vjp_input(self, v, upstream, channel: int | None = None) -> np.ndarray:
        """Gradient of ``sum(upstream * predict(v, channel))`` w.r.t. ``v`` (floor clamp ignored)."""
        v = np.atleast_2d(np.asarray(v, dtype=float))
        upstream = np.asarray(upstream, dtype=float).reshape((len(v),) + self._out_shape(channel))
        channel = self._check_channel(channel)
        U = features(v)
        kind = self.kind
        if kind == NN_SW:
            return self.members[0].vjp(U, v, upstream)
        if kind == NN_LR:
            up = upstream if channel is not None else upstream.sum(axis=-1)
            return self.members[0].vjp(U, v, up)
        if kind == NN_LS:
            if channel is not None:
                return self.members[channel].vjp(U, v, upstream)
            return sum(self.members[k].vjp(U, v, upstream[:, :, k]) for k in range(self.n_channels))
        if kind == NN_LG:
            ks = range(self.n_channels) if channel is None else [channel]
            total = 0.0
            for n, k in enumerate(ks):
                up = upstream if channel is not None else upstream[:, :, n]
                total = total + self.members[0].vjp(U, v, up, self._lambda_column(k, len(v)))
            return total
        full = np.zeros((len(v), 9, self.n_channels))
        if channel is None:
            full[...] = upstream
        else:
            full[:, :, channel] = upstream
        return self.members[0].vjp(U, v, full)

    def _out_shape(self, channel):
        if self.kind == NN_SW or channel is not None:
            return (9,)
        return (9, self.n_channels)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "architecture": self.arch.to_dict(),
            "grid": self.grid.to_dict(),
            "members": [m.to_dict() for m in self.members],
            "offsets_db": None if self.offsets_db is None else self.offsets_db.tolist(),
            "lambda_norm": None if self.lambda_norm is None else self.lambda_norm.to_dict(),
            "parameter_order": "per layer: Dense W (n_out, n_in) then b; ConvTranspose1d w (c_in, c_out, k) "
                               "then b; all row-major",
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d) -> "TrainedSurrogate":
        a = d["architecture"]
        arch = SurrogateArchitecture(a["kind"], tuple(a["hidden"]), a["n_channels"], a["conv_kernel"])
        return cls(
            arch,
            [_Member.from_dict(m) for m in d["members"]],
            WavelengthGrid.from_dict(d["grid"]),
            None if d["offsets_db"] is None else np.asarray(d["offsets_db"]),
            None if d["lambda_norm"] is None else MinMax.from_dict(d["lambda_norm"]),
            d.get("provenance", {}),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "TrainedSurrogate":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class EarlyStopping:
    """Stop once validation RMSE has not improved by more than ``min_delta`` for ``patience`` epochs."""

    def __init__(self, patience: int = 50, min_delta: float = 0.001):
        self.patience = patience
        self.min_delta = min_delta
        self.reference = np.inf
        self.best = np.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best, self.best_epoch = value, epoch
        if value < self.reference - self.min_delta:
            self.reference = value
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def _rmse(pred, label):
    d = np.maximum(pred, FLOOR_DB) - np.maximum(label, FLOOR_DB)
    return float(np.sqrt(np.mean(d * d)))


def _fit_member(arch, U, Y, U_val, Y_val, seed, max_epochs, patience, min_delta, extra=None, extra_val=None,
                memory=10, init_scale=1.0):
    """Train one network; returns (member, history, report)."""
    in_norm = MinMax.fit(U)
    out_norm = MinMax.fit(Y)
    Z = in_norm.normalize(U)
    if extra is not None:
        Z = np.concatenate([Z, extra], axis=1)
    T = out_norm.normalize(Y)
    Zv = None
    if U_val is not None:
        Zv = in_norm.normalize(U_val)
        if extra_val is not None:
            Zv = np.concatenate([Zv, extra_val], axis=1)

    for attempt, scale in enumerate((init_scale, 0.5 * init_scale)):
        net = arch.build()
        net.init(np.random.default_rng(seed), scale)
        n = T.size
        last = {}

        def fun(x):
            net.set_params(x)
            net.zero_grad()
            out = net.forward(Z)
            diff = out - T
            f = float(np.sum(diff * diff)) / n
            net.backward(diff * (2.0 / n))
            last["x"], last["out"] = x.copy(), out
            return f, net.grad.copy()

        def rmses(x):
            net.set_params(x)
            # the accepted point is nearly always the last one evaluated
            out = last["out"] if "x" in last and np.array_equal(last["x"], x) else net.forward(Z)
            tr = _rmse(out_norm.denormalize(out), Y)
            va = _rmse(out_norm.denormalize(net.forward(Zv)), Y_val) if Zv is not None else np.nan
            return tr, va

        stopper = EarlyStopping(patience, min_delta)
        x0 = net.flat.copy()
        tr0, va0 = rmses(x0)
        history = [(0, tr0, va0)]
        best = {"x": x0.copy(), "val": va0 if Zv is not None else tr0}
        stopper.update(0, best["val"])

        def callback(k, x, f, g):
            tr, va = rmses(x)
            history.append((k, tr, va))
            score = va if Zv is not None else tr
            if score < best["val"]:
                best["x"], best["val"] = x.copy(), score
            return stopper.update(k, score)

        rep = lbfgs_minimize(fun, x0, memory=memory, tol_grad=1e-10, max_iter=max_epochs, callback=callback)
        if np.isfinite(rep.f) and len(history) > 1 or rep.termination == "gradient-tolerance":
            net.set_params(best["x"])
            return _Member(net, in_norm, out_norm), history, rep
        log.warning("training diverged (attempt %d); retrying with smaller initial weights", attempt + 1)
    raise TrainingError("training diverged twice")


def _weights(ds: WeightDataset, channel):
    return ds.weights_db[:, :, channel]


def train(arch: SurrogateArchitecture | str, training: WeightDataset, validation: WeightDataset | None = None,
          seed: int = 0, max_epochs: int = 5000, patience: int = 50, min_delta: float = 0.001,
          reference_channel: int | None = None):
    """Train a surrogate; returns ``(TrainedSurrogate, history)``.

    ``history`` holds ``(epoch, train_rmse_db, validation_rmse_db)`` rows; for
    ``nn-ls`` it is a list with one history per channel.
    """
    grid = training.grid
    if isinstance(arch, str):
        arch = default_architecture(arch, grid.n_channels if arch in MULTI_CHANNEL else 1)
    if validation is not None and validation.grid != grid:
        raise ValueError("training and validation grids differ")
    ref = grid.reference_index if reference_channel is None else reference_channel
    U = features(training.voltages)
    Uv = features(validation.voltages) if validation is not None else None
    kw = dict(seed=seed, max_epochs=max_epochs, patience=patience, min_delta=min_delta)
    kind = arch.kind
    prov = {"seed": seed, "max_epochs": max_epochs, "n_training": len(training)}

    def val_w(k):
        return _weights(validation, k) if validation is not None else None

    if kind == NN_SW:
        k = ref
        m, hist, _ = _fit_member(arch, U, _weights(training, k), Uv, val_w(k), **kw)
        model = TrainedSurrogate(arch, [m], grid.single(k), provenance=prov)
    elif kind == NN_LR:
        core_arch = SurrogateArchitecture(NN_LR, arch.hidden, grid.n_channels)
        m, hist, _ = _fit_member(core_arch, U, _weights(training, ref), Uv, val_w(ref), **kw)
        fit_on = validation if validation is not None else training
        core = m.predict(features(fit_on.voltages))
        offsets = np.zeros(grid.n_channels)
        for k in range(grid.n_channels):
            if k != ref:
                offsets[k] = _fit_offset(core, _weights(fit_on, k))
        g = WavelengthGrid(grid.center_wavelengths_nm, grid.channel_spacing_ghz, ref)
        model = TrainedSurrogate(arch, [m], g, offsets_db=offsets, provenance=prov)
    elif kind == NN_LS:
        members, hist = [], []
        for k in range(grid.n_channels):
            m, h, _ = _fit_member(arch, U, _weights(training, k), Uv, val_w(k), **kw)
            members.append(m)
            hist.append(h)
        model = TrainedSurrogate(arch, members, grid, provenance=prov)
    elif kind == NN_LG:
        lam_norm = MinMax.fit(grid.center_wavelengths_nm[:, None])
        lam_z = lam_norm.normalize(grid.center_wavelengths_nm[:, None])[:, 0]
        nk = grid.n_channels

        def expand(Uin, ds):
            Ux = np.repeat(Uin, nk, axis=0)
            ex = np.tile(lam_z, len(Uin))[:, None]
            Y = ds.weights_db.transpose(0, 2, 1).reshape(-1, 9)
            return Ux, ex, Y

        Ux, ex, Y = expand(U, training)
        if validation is not None:
            Uvx, exv, Yv = expand(Uv, validation)
        else:
            Uvx = exv = Yv = None
        m, hist, _ = _fit_member(arch, Ux, Y, Uvx, Yv, extra=ex, extra_val=exv, **kw)
        model = TrainedSurrogate(arch, [m], grid, lambda_norm=lam_norm, provenance=prov)
    else:
        if arch.n_channels != grid.n_channels:
            raise ValueError(f"{kind} built for {arch.n_channels} channels, data has {grid.n_channels}")
        Yv = validation.weights_db if validation is not None else None
        m, hist, _ = _fit_member(arch, U, training.weights_db, Uv, Yv, **kw)
        model = TrainedSurrogate(arch, [m], grid, provenance=prov)

    flat_hist = hist if kind != NN_LS else [row for h in hist for row in h]
    prov["epochs"] = int(max(row[0] for row in flat_hist))
    prov["best_validation_rmse_db"] = float(np.nanmin([row[2] for row in flat_hist])) if validation is not None else None
    return model, hist


def _fit_offset(core, target) -> float:
    """Best additive dB offset of ``core`` onto ``target`` under the floor clamp."""

    def fun(x):
        pred = core + x[0]
        raw_ok = pred >= FLOOR_DB
        d = np.maximum(pred, FLOOR_DB) - np.maximum(target, FLOOR_DB)
        return float(np.mean(d * d)), np.array([float(np.mean(2 * d * raw_ok))])

    x0 = np.array([float(np.mean(target - core))])
    return float(bfgs_minimize(fun, x0, tol_grad=1e-10, max_iter=100).x[0])


def evaluate_rmse(model: TrainedSurrogate, ds: WeightDataset) -> float:
    pred = model.predict(ds.voltages)
    if model.kind == NN_SW:
        k = ds.grid.index_of(model.grid.center_wavelengths_nm[0], atol_nm=1e-3) if ds.n_channels > 1 else 0
        return _rmse(pred, ds.weights_db[:, :, k])
    return _rmse(pred, ds.weights_db)


# ---------------------------------------------------------------------------
# Architecture search
# ---------------------------------------------------------------------------


def sample_architecture(kind: str, rng, n_channels: int = 1) -> SurrogateArchitecture:
    """Random layer count in 1..3 and log-uniform widths in 16..256."""
    if kind in (TCNN, TCNN_100):
        w = int(round(np.exp(rng.uniform(np.log(16), np.log(256)))))
        return SurrogateArchitecture(kind, (w, 9 * n_channels), n_channels)
    depth = int(rng.integers(1, 4))
    widths = tuple(int(round(np.exp(rng.uniform(np.log(16), np.log(256))))) for _ in range(depth))
    return SurrogateArchitecture(kind, widths, n_channels)


def hyperparameter_search(kind: str, budget: int, training: WeightDataset, validation: WeightDataset,
                          seed: int = 0, max_epochs: int = 200, patience: int = 20):
    """Random search; returns ``(best_architecture, trials)`` with trials as (arch, validation RMSE)."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    rng = np.random.default_rng([seed, 7])
    n_ch = training.grid.n_channels if kind in MULTI_CHANNEL else 1
    trials = []
    for _ in range(budget):
        arch = sample_architecture(kind, rng, n_ch)
        model, _ = train(arch, training, validation, seed=seed, max_epochs=max_epochs, patience=patience)
        trials.append((arch, evaluate_rmse(model, validation)))
    best = min(trials, key=lambda t: t[1])[0]
    return best, trials


def load_surrogate(path) -> TrainedSurrogate:
    return TrainedSurrogate.load(path)
