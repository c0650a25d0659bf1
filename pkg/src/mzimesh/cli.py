"""Command-line pipelines: generate, fit, evaluate, sweep, program, task, report.

Every command reads a TOML config (``--config``) merged over built-in
defaults, accepts ``--set section.key=value`` overrides, writes its outputs
under the run directory and records a manifest in ``<run>/manifests``.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .analytic import SAM, SAMXT, AnalyticModel, fit_sam, fit_samxt, fit_sam_per_wavelength
from .chip import (ChipGroundTruth, WeightDataset, default_chip, downsample_bands,
                   generate_random_dataset, generate_sweep_dataset)
from .evaluation import (ErrorDistribution, model_predictions, per_wavelength_rmse, r_squared, rmse_db,
                         size_seed_sweep)
from .mesh import itu_c_band_grid
from .nn.surrogate import KINDS as NN_KINDS, TrainedSurrogate, TrainingError, train
from .optimize import LineSearchError
from .program import ground_truth_model, program_voltages
from .tasks import TaskSpec, TaskTrainingError, noise_injection_study, train_reference, write_reports_csv

log = logging.getLogger("mzimesh")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

DEFAULTS = {
    "run": {"dir": "runs/default"},
    "chip": {"path": "", "seed": 0, "coupling": [0.08, 0.03], "sigma_db": 0.2, "n_repeats": 6,
             "dispersive": True, "er_db": 30.0},
    "data": {"n_random": 5100, "bands": 1, "split": [0.70, 0.15, 0.15]},
    "fit": {"kind": "sam", "seed": 0, "max_epochs": 5000, "max_train": 1000, "channel": -1},
    "evaluate": {"kinds": [], "bin_width_db": 0.1},
    "sweep": {"kind": "nn-sw", "sizes": [], "seeds": list(range(10)), "max_epochs": 5000},
    "program": {"model": "truth", "target_db": [[-12.0, -30.0, -30.0], [-30.0, -12.0, -30.0],
                                                [-30.0, -30.0, -12.0]],
                "channel": -1, "multistart": 8, "seed": 0, "threshold_db": 1.0},
    "task": {"kind": "xor3", "models": ["sam", "samxt", "nn-sw"], "realizations": 2000, "seed": 0,
             "mode": "multiplicative"},
}
ANALYTIC_KINDS = (SAM, SAMXT)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def _merge(base, over, where=""):
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}{k} must be a table")
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v


def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path=None, overrides=()):
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, "rb") as fh:
                _merge(cfg, tomllib.load(fh))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        section, name = key.split(".", 1)
        _merge(cfg, {section: {name: _parse_value(value)}})
    return cfg


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Run directory helpers
# ---------------------------------------------------------------------------


class Run:
    def __init__(self, cfg):
        self.cfg = cfg
        self.root = Path(cfg["run"]["dir"])
        self.outputs = []

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def wrote(self, *paths):
        self.outputs.extend(Path(p) for p in paths)

    def write_json(self, obj, *parts) -> Path:
        p = self.path(*parts)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        self.wrote(p)
        return p

    def manifest(self, command, seeds):
        files = {}
        for p in sorted(set(self.outputs)):
            files[str(p.relative_to(self.root))] = hashlib.sha256(p.read_bytes()).hexdigest()
        m = {
            "command": command,
            "config": self.cfg,
            "config_hash": config_hash(self.cfg),
            "seeds": seeds,
            "versions": {"mzimesh": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "outputs": files,
        }
        p = self.path("manifests", f"{command}.json")
        p.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
        return p

    # datasets ------------------------------------------------------------

    def dataset_name(self, protocol):
        bands = int(self.cfg["data"]["bands"])
        return f"{protocol}.jsonl" if bands == 1 else f"{protocol}_bands{bands}.jsonl"

    def load_dataset(self, protocol) -> WeightDataset:
        p = self.root / "data" / self.dataset_name(protocol)
        if not p.exists():
            raise FileNotFoundError(f"{p} not found; run 'generate' first")
        return WeightDataset.load(p)

    def chip(self) -> ChipGroundTruth:
        p = self.root / "chip.json"
        if not p.exists():
            raise FileNotFoundError(f"{p} not found; run 'generate' first")
        return ChipGroundTruth.load(p)

    def model_path(self, kind) -> Path:
        return self.root / "models" / f"{kind}.json"

    def load_model(self, kind):
        p = self.model_path(kind)
        if not p.exists():
            raise FileNotFoundError(f"{p} not found; run 'fit' with fit.kind={kind} first")
        return load_model_file(p)


def load_model_file(path):
    d = json.loads(Path(path).read_text())
    if d.get("kind") in ANALYTIC_KINDS:
        return AnalyticModel.from_dict(d)
    return TrainedSurrogate.from_dict(d)


def _channel(cfg_value, ds):
    return ds.grid.reference_index if int(cfg_value) < 0 else int(cfg_value)


def _single(ds, k):
    return ds if ds.n_channels == 1 else ds.channel(k)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(run: Run):
    c, d = run.cfg["chip"], run.cfg["data"]
    if c["path"]:
        chip = ChipGroundTruth.load(c["path"])
    else:
        chip = default_chip(int(c["seed"]), tuple(c["coupling"]), float(c["sigma_db"]), int(c["n_repeats"]),
                            bool(c["dispersive"]), float(c["er_db"]))
    chip.save(run.path("chip.json"))
    run.wrote(run.root / "chip.json")
    bands = int(d["bands"])
    grid = itu_c_band_grid()
    if bands == 1:
        grid = grid.single()
    elif grid.n_channels % bands:
        raise ConfigError(f"data.bands={bands} does not divide {grid.n_channels} channels")
    split = tuple(float(x) for x in d["split"])
    sweep = generate_sweep_dataset(chip, grid)
    rand = generate_random_dataset(chip, grid, int(d["n_random"]), split)
    if 1 < bands < grid.n_channels:
        f = grid.n_channels // bands
        sweep, rand = downsample_bands(sweep, f), downsample_bands(rand, f)
    for name, ds in (("sweep", sweep), ("random", rand)):
        p = run.path("data", run.dataset_name(name))
        ds.save(p)
        run.wrote(p, p.with_name(p.name + ".meta.json"))
    log.info("wrote %d sweep and %d random records over %d channel(s)", len(sweep), len(rand), sweep.n_channels)
    return [chip.seed]


def _fit_kind(run: Run, kind):
    cfg = run.cfg["fit"]
    sweep, rand = run.load_dataset("sweep"), run.load_dataset("random")
    k = _channel(cfg["channel"], rand)
    tr, va = rand.split("training"), rand.split("validation")
    if kind in ANALYTIC_KINDS:
        if kind == SAM:
            model, report = fit_sam(sweep, tr, channel=k, max_train=int(cfg["max_train"]))
        else:
            p = run.model_path(SAM)
            sam = load_model_file(p) if p.exists() else _fit_kind(run, SAM)
            model, report = fit_samxt(sam, tr, channel=k, max_train=int(cfg["max_train"]))
        if report.get("warning"):
            log.warning("%s fit did not converge cleanly: %s", kind, report)
        out = run.model_path(kind)
        out.parent.mkdir(parents=True, exist_ok=True)
        model.save(out)
        run.write_json(report, "models", f"{kind}_report.json")
        run.wrote(out)
        return model
    if kind not in NN_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    if kind == "nn-sw":
        tr, va = _single(tr, k), _single(va, k)
    model, hist = train(kind, tr, va, seed=int(cfg["seed"]), max_epochs=int(cfg["max_epochs"]))
    out = run.model_path(kind)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    hp = run.path("models", f"{kind}_history.csv")
    rows = hist if kind != "nn-ls" else [(c, *r) for c, h in enumerate(hist) for r in h]
    with open(hp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_rmse_db", "validation_rmse_db"] if kind != "nn-ls"
                   else ["channel", "epoch", "train_rmse_db", "validation_rmse_db"])
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    run.wrote(out, hp)
    return model


def cmd_fit(run: Run):
    _fit_kind(run, run.cfg["fit"]["kind"])
    return [int(run.cfg["fit"]["seed"])]


def _eval_data(model, rand, k):
    te = rand.split("testing")
    if isinstance(model, AnalyticModel) or model.kind == "nn-sw":
        return _single(te, k)
    return te


def cmd_evaluate(run: Run):
    cfg = run.cfg["evaluate"]
    rand = run.load_dataset("random")
    k = _channel(run.cfg["fit"]["channel"], rand)
    kinds = list(cfg["kinds"]) or sorted(p.stem for p in (run.root / "models").glob("*.json")
                                         if not p.stem.endswith("_report"))
    if not kinds:
        raise FileNotFoundError("no models to evaluate; run 'fit' first")
    rows = []
    for kind in kinds:
        model = run.load_model(kind)
        te = _eval_data(model, rand, k)
        pred = np.maximum(model_predictions(model, te), -60.0)
        dist = ErrorDistribution.from_predictions(pred, te.weights_db)
        row = {"kind": kind, "test_rmse_db": rmse_db(pred, te.weights_db), "r_squared": r_squared(pred, te.weights_db),
               "min_error_db": dist.min, "max_error_db": dist.max, "n_channels": te.n_channels}
        rows.append(row)
        p = run.path("eval", f"{kind}_error_pdf.csv")
        dist.to_csv(p, float(cfg["bin_width_db"]))
        run.wrote(p)
        if te.n_channels > 1:
            p = run.path("eval", f"{kind}_per_wavelength.csv")
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["wavelength_nm", "rmse_db"])
                for lam, r in per_wavelength_rmse(model, te):
                    w.writerow([f"{lam:.4f}", repr(r)])
            run.wrote(p)
    p = run.path("eval", "metrics.csv")
    with open(p, "w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k2: repr(v) if isinstance(v, float) else v for k2, v in r.items()})
    run.wrote(p)
    run.write_json(rows, "eval", "metrics.json")
    return []


def cmd_sweep(run: Run):
    cfg = run.cfg["sweep"]
    rand = run.load_dataset("random")
    kind = cfg["kind"]
    k = _channel(run.cfg["fit"]["channel"], rand)
    ds = _single(rand, k) if kind in ("nn-sw",) + ANALYTIC_KINDS else rand
    sweep = _single(run.load_dataset("sweep"), k) if kind in ANALYTIC_KINDS else None
    kw = {} if kind in ANALYTIC_KINDS else {"max_epochs": int(cfg["max_epochs"])}
    rep = size_seed_sweep(kind, ds, cfg["sizes"] or None, cfg["seeds"], sweep=sweep, jobs=run.jobs, **kw)
    p1, p2 = run.path("sweep", f"{kind}_size_seed.csv"), run.path("sweep", f"{kind}_size_seed.json")
    rep.to_csv(p1)
    rep.to_json(p2)
    run.wrote(p1, p2)
    return list(cfg["seeds"])


def cmd_program(run: Run):
    cfg = run.cfg["program"]
    chip = run.chip()
    if cfg["model"] == "truth":
        model, channels = ground_truth_model(chip), None
    else:
        model = run.load_model(cfg["model"])
        ch = int(cfg["channel"])
        multi = isinstance(model, TrainedSurrogate) and model.n_channels > 1
        channels = (model.grid.reference_index if ch < 0 else ch) if multi else None
    res = program_voltages(model, cfg["target_db"], channels, int(cfg["multistart"]), int(cfg["seed"]),
                           float(cfg["threshold_db"]), jobs=run.jobs)
    out = res.to_dict()
    out["model"] = cfg["model"]
    run.write_json(out, "program", f"{cfg['model']}_result.json")
    if not res.reachable:
        log.warning("target flagged unreachable: residual %.3f dB", res.residual_db)
    return [int(cfg["seed"])]


def _error_samples(run: Run, kind, rand, k):
    if kind == "zero":
        return np.zeros(1)
    model = run.load_model(kind)
    te = _eval_data(model, rand, k)
    return ErrorDistribution.from_predictions(np.maximum(model_predictions(model, te), -60.0), te.weights_db).samples


def cmd_task(run: Run):
    cfg = run.cfg["task"]
    spec = TaskSpec(cfg["kind"], realizations=int(cfg["realizations"]))
    task = train_reference(spec, int(cfg["seed"]))
    models = list(cfg["models"])
    rand = run.load_dataset("random") if any(m != "zero" for m in models) else None
    k = _channel(run.cfg["fit"]["channel"], rand) if rand is not None else 0
    reports = [noise_injection_study(task, _error_samples(run, m, rand, k), seed=int(cfg["seed"]),
                                     mode=cfg["mode"], model_name=m) for m in models]
    p = run.path("task", f"{spec.kind}_noise.csv")
    write_reports_csv(reports, p)
    run.wrote(p)
    summary = {"task": spec.kind, "metric": task.metric_name, "clean": task.clean_metric,
               "percentiles": {r.model: {f"p{q}": float(v) for q, v in r.percentiles.items()} for r in reports}}
    run.write_json(summary, "task", f"{spec.kind}_summary.json")
    return [int(cfg["seed"])]


def cmd_report(run: Run):
    """Collect every JSON result under the run directory into one summary."""
    if not run.root.exists():
        raise FileNotFoundError(f"{run.root} does not exist")
    out = {}
    for sub in ("eval", "sweep", "program", "task"):
        for p in sorted((run.root / sub).glob("*.json")):
            out[f"{sub}/{p.name}"] = json.loads(p.read_text())
    for p in sorted((run.root / "models").glob("*_report.json")):
        out[f"models/{p.name}"] = json.loads(p.read_text())
    run.write_json(out, "report.json")
    return []


def cmd_slope(run: Run):
    """Per-channel SAM fits and straight-line phase-coefficient slopes."""
    sweep, rand = run.load_dataset("sweep"), run.load_dataset("random")
    wf = fit_sam_per_wavelength(sweep, rand.split("training"), max_train=int(run.cfg["fit"]["max_train"]))
    lam_um = 1e-3 * sweep.grid.reference_nm
    ref = wf.phi2[sweep.grid.reference_index]
    rows = [{"mzi": m + 1, "slope_rad_per_v2_um": float(wf.slopes_per_um[m]), "stderr": float(wf.slope_stderr[m]),
             "expected": float(-ref[m] / lam_um)} for m in range(9)]
    run.write_json({"slopes": rows, "phi2": wf.to_rows()}, "eval", "phi2_slopes.json")
    return []


COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "program": cmd_program,
    "task": cmd_task,
    "report": cmd_report,
    "slope": cmd_slope,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="mzimesh", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="TOML config file")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    ap.add_argument("--run-dir", help="shorthand for --set run.dir=...")
    ap.add_argument("--bands", type=int, help="shorthand for --set data.bands=...")
    ap.add_argument("--kind", help="shorthand for the command's model kind")
    ap.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        sets = list(args.set)
        if args.run_dir:
            sets.append(f"run.dir={json.dumps(args.run_dir)}")
        if args.bands is not None:
            sets.append(f"data.bands={args.bands}")
        if args.kind:
            section = {"sweep": "sweep", "task": "task", "program": "program"}.get(args.command, "fit")
            key = "model" if section == "program" else "kind"
            sets.append(f"{section}.{key}={json.dumps(args.kind)}")
        cfg = load_config(args.config, sets)
        run = Run(cfg)
        run.jobs = max(1, args.jobs)
        seeds = COMMANDS[args.command](run)
        run.manifest(args.command, seeds)
    except (ConfigError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, TaskTrainingError, LineSearchError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
