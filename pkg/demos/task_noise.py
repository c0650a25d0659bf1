"""How model error propagates into a small optical network task.

Trains the 3-3-1 XOR network, then resamples each model's testing errors onto
its first-layer weights and prints the accuracy percentiles.
"""

import warnings

from mzimesh.analytic import fit_sam, fit_samxt
from mzimesh.chip import default_chip, generate_random_dataset, generate_sweep_dataset
from mzimesh.evaluation import ErrorDistribution
from mzimesh.mesh import itu_c_band_grid
from mzimesh.nn import train
from mzimesh.tasks import XOR3, noise_injection_study, train_reference

warnings.simplefilter("ignore")

chip = default_chip(0)
grid = itu_c_band_grid().single()
sweep, rand = generate_sweep_dataset(chip, grid), generate_random_dataset(chip, grid)
tr, va, te = rand.split("training"), rand.split("validation"), rand.split("testing")
sam, _ = fit_sam(sweep, tr)
models = {"sam": sam, "samxt": fit_samxt(sam, tr)[0], "nn-sw": train("nn-sw", tr, va)[0]}

task = train_reference(XOR3, seed=0)
print(f"clean accuracy {task.clean_metric:.1f}%")
for name, model in models.items():
    rep = noise_injection_study(task, ErrorDistribution.from_model(model, te).samples, 2000, model_name=name)
    print(name, {p: round(float(v), 1) for p, v in rep.percentiles.items()})
