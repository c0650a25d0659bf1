"""Error metrics, error distributions and the training-size x seed study."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chip import WeightDataset


def _pair(pred, label):
    pred = np.asarray(pred, dtype=float)
    label = np.asarray(label, dtype=float)
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {label.shape}")
    return pred, label


def rmse_db(pred, label) -> float:
    """Root-mean-square dB error over every entry."""
    pred, label = _pair(pred, label)
    d = pred - label
    return float(np.sqrt(np.mean(d * d)))


def r_squared(pred, label) -> float:
    pred, label = _pair(pred, label)
    if label.size < 2:
        raise ValueError("need at least two entries")
    ss_tot = float(np.sum((label - label.mean()) ** 2))
    if ss_tot == 0:
        raise ValueError("R^2 is undefined for constant labels")
    return 1.0 - float(np.sum((pred - label) ** 2)) / ss_tot


def model_predictions(model, ds: WeightDataset) -> np.ndarray:
    """Model output shaped like ``ds.weights_db``.

    Single-channel models are evaluated against single-channel datasets only.
    """
    pred = np.asarray(model.predict(ds.voltages))
    if pred.ndim == 2:
        pred = pred[:, :, None]
    if pred.shape != ds.weights_db.shape:
        raise ValueError(f"model output {pred.shape} does not match dataset {ds.weights_db.shape}")
    return pred


@dataclass
class ErrorDistribution:
    """Flat sample of prediction errors (predicted minus measured, dB)."""

    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).ravel()

    @classmethod
    def from_predictions(cls, pred, label) -> "ErrorDistribution":
        pred, label = _pair(pred, label)
        return cls(pred - label)

    @classmethod
    def from_model(cls, model, ds: WeightDataset) -> "ErrorDistribution":
        return cls.from_predictions(model_predictions(model, ds), ds.weights_db)

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean(self.samples ** 2)))

    @property
    def min(self) -> float:
        return float(self.samples.min())

    @property
    def max(self) -> float:
        return float(self.samples.max())

    def histogram(self, bin_width: float = 0.1):
        """Counts on bins aligned to multiples of ``bin_width``; returns (edges, counts)."""
        if bin_width <= 0:
            raise ValueError("bin width must be positive")
        lo = np.floor(self.min / bin_width)
        hi = np.floor(self.max / bin_width) + 1
        edges = np.arange(lo, hi + 1) * bin_width
        counts, _ = np.histogram(self.samples, edges)
        return edges, counts

    def pdf(self, bin_width: float = 0.1):
        """Returns (bin centres, density) with the density integrating to one."""
        edges, counts = self.histogram(bin_width)
        return 0.5 * (edges[1:] + edges[:-1]), counts / (counts.sum() * bin_width)

    def summary(self) -> dict:
        return {"rmse_db": self.rmse, "min_db": self.min, "max_db": self.max, "n": int(self.samples.size)}

    def to_csv(self, path, bin_width: float = 0.1):
        centres, dens = self.pdf(bin_width)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["error_db", "density"])
            for c, d in zip(centres, dens):
                w.writerow([f"{c:.6f}", repr(float(d))])


def per_wavelength_rmse(model, testing: WeightDataset):
    """List of (wavelength nm, RMSE dB), one per channel."""
    pred = model_predictions(model, testing)
    d = pred - testing.weights_db
    per = np.sqrt(np.mean(d * d, axis=(0, 1)))
    return [(float(lam), float(r)) for lam, r in zip(testing.grid.center_wavelengths_nm, per)]


# ---------------------------------------------------------------------------
# Training-size x seed study
# ---------------------------------------------------------------------------


def default_sizes(n: int = 12, smallest: int = 250, largest: int = 3570):
    return [int(s) for s in np.unique(np.round(np.geomspace(smallest, largest, n)))]


@dataclass
class SizeSweepReport:
    kind: str
    rows: list = field(default_factory=list)  # dicts: size, seed, train/validation/test RMSE

    def sizes(self):
        return sorted({r["size"] for r in self.rows})

    def test_rmse(self, size):
        return np.array([r["test_rmse_db"] for r in self.rows if r["size"] == size])

    def summary(self):
        out = []
        for s in self.sizes():
            t = self.test_rmse(s)
            p25, med, p75 = np.percentile(t, [25, 50, 75])
            out.append({"size": s, "n_seeds": int(t.size), "median_db": float(med), "p25_db": float(p25),
                        "p75_db": float(p75)})
        return out

    def to_csv(self, path):
        cols = ["size", "seed", "train_rmse_db", "validation_rmse_db", "test_rmse_db"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["size"], r["seed"]] + [repr(float(r[c])) for c in cols[2:]])

    def to_json(self, path):
        Path(path).write_text(json.dumps({"kind": self.kind, "summary": self.summary(), "runs": self.rows},
                                         indent=2, sort_keys=True) + "\n")


def _sweep_cell(args):
    kind, training, validation, testing, sweep, size, seed, train_kw = args
    tr = training.head(size)
    if kind in ("sam", "samxt"):
        from .analytic import fit_sam, fit_samxt

        model, _ = fit_sam(sweep, tr, max_train=size)
        if kind == "samxt":
            model, _ = fit_samxt(model, tr, max_train=size)
    else:
        from .nn.surrogate import train

        model, _ = train(kind, tr, validation, seed=seed, **train_kw)

    def err(ds):
        return rmse_db(np.maximum(model_predictions(model, ds), -60.0), ds.weights_db)

    return {"size": int(size), "seed": int(seed), "train_rmse_db": err(tr), "validation_rmse_db": err(validation),
            "test_rmse_db": err(testing)}


def size_seed_sweep(kind: str, dataset: WeightDataset, sizes=None, seeds=None, sweep: WeightDataset | None = None,
                    jobs: int = 1, **train_kw) -> SizeSweepReport:
    """Train on the first ``size`` records of the fixed training split for every (size, seed).

    ``dataset`` must carry training/validation/testing splits; analytic kinds
    also need the ``sweep`` dataset and ignore the seed.
    """
    sizes = default_sizes() if sizes is None else [int(s) for s in sizes]
    seeds = list(range(10)) if seeds is None else [int(s) for s in seeds]
    training = dataset.split("training")
    if any(s <= 0 for s in sizes):
        raise ValueError("training sizes must be positive")
    if max(sizes) > len(training):
        raise ValueError(f"largest size {max(sizes)} exceeds the {len(training)} training records")
    if kind in ("sam", "samxt") and sweep is None:
        raise ValueError("analytic kinds need the sweep dataset")
    validation, testing = dataset.split("validation"), dataset.split("testing")
    cells = [(kind, training, validation, testing, sweep, s, seed, train_kw) for s in sizes for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            rows = list(ex.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(c) for c in cells]
    rows.sort(key=lambda r: (r["size"], r["seed"]))
    return SizeSweepReport(kind, rows)
