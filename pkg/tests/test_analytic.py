import numpy as np
import pytest

from mzimesh.analytic import SAM, SAMXT, AnalyticModel, fit_sam, fit_sam_per_wavelength, fit_samxt, line_fit, load_model, rmse
from mzimesh.chip import default_chip, downsample_bands, generate_random_dataset, generate_sweep_dataset
from mzimesh.mesh import itu_c_band_grid
from mzimesh.optimize import check_gradient


def _model(seed, kind=SAMXT):
    rng = np.random.default_rng(seed)
    phi2 = np.diag(rng.uniform(0.9, 1.2, 9))
    if kind == SAMXT:
        phi2 = phi2 + 0.05 * rng.random((9, 9)) * (1 - np.eye(9))
    return AnalyticModel(kind, rng.uniform(0, 2 * np.pi, 9), phi2, 28.0, rng.uniform(-11, -9, (3, 3)))


@pytest.mark.parametrize("seed", range(4))
def test_parameter_gradients(seed):
    m = _model(seed)
    rng = np.random.default_rng(100 + seed)
    V = rng.uniform(0, 2, (30, 9))
    W = m.predict(V) + rng.normal(0, 0.5, (30, 9))

    for name in ("phi0", "phi2", "alpha_db", "er_db"):
        x0 = np.atleast_1d(getattr(m, name)).ravel().copy()

        def fun(x, name=name):
            val = x.reshape(np.shape(getattr(m, name))) if np.ndim(getattr(m, name)) else float(x[0])
            loss, g = m.with_params(**{name: val}).loss_and_grads(V, W)
            return loss, np.atleast_1d(g[name]).ravel()

        assert check_gradient(fun, x0, step=1e-6) < 1e-4, name


@pytest.mark.parametrize("seed", range(3))
def test_input_gradient(seed):
    m = _model(seed)
    rng = np.random.default_rng(seed)
    up = rng.normal(size=9)

    def fun(v):
        return float(m.predict_raw(v[None])[0] @ up), m.vjp_input(v[None], up[None])[0]

    assert check_gradient(fun, rng.uniform(0.2, 1.8, 9), step=1e-6) < 1e-4


def test_kind_validation():
    with pytest.raises(ValueError):
        AnalyticModel(SAM, np.zeros(9), np.ones((9, 9)), 30.0, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        AnalyticModel("other", np.zeros(9), np.ones(9), 30.0, np.zeros((3, 3)))


def test_serialisation(tmp_path):
    m = _model(1)
    m.save(tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    V = np.random.default_rng(0).uniform(0, 2, (5, 9))
    np.testing.assert_array_equal(back.predict(V), m.predict(V))


def test_phase_shift_invariance():
    m = _model(2)
    V = np.random.default_rng(0).uniform(0, 2, (5, 9))
    np.testing.assert_allclose(m.shifted_phase(np.arange(9)).predict(V), m.predict(V), atol=1e-9)


@pytest.fixture(scope="module")
def noisy_data():
    chip = default_chip(0)
    g = itu_c_band_grid().single()
    return chip, generate_sweep_dataset(chip, g), generate_random_dataset(chip, g)


def test_sam_and_samxt_fit_default_chip(noisy_data):
    _, sweep, rand = noisy_data
    tr, te = rand.split("training"), rand.split("testing")
    sam, rep = fit_sam(sweep, tr)
    xt, rep2 = fit_samxt(sam, tr)
    e_sam = rmse(sam.predict(te.voltages), te.weights_db[:, :, 0])
    e_xt = rmse(xt.predict(te.voltages), te.weights_db[:, :, 0])
    assert rep["stage1_rmse_db"] < 2.0
    assert e_xt < 0.7 * e_sam
    assert rep2["training_rmse_db"] <= rep["stage2_rmse_db"] + 1e-9


def test_sam_recovers_noise_free_sam_data():
    chip = default_chip(2, coupling=(0.0, 0.0), sigma_db=0.0, loss_slope_max_db_per_nm=0.0)
    g = itu_c_band_grid().single()
    sweep, rand = generate_sweep_dataset(chip, g), generate_random_dataset(chip, g, n=600)
    sam, _ = fit_sam(sweep, rand.split("training"))
    te = rand.split("testing")
    assert rmse(sam.predict(te.voltages), te.weights_db[:, :, 0]) <= 1e-6


def test_line_fit_matches_polyfit():
    rng = np.random.default_rng(3)
    x = np.linspace(1.53, 1.57, 10)
    Y = rng.normal(size=(10, 3)) + np.outer(x, [2.0, -1.0, 0.5])
    slopes, stderr, icpt = line_fit(x, Y)
    for k in range(3):
        coef, cov = np.polyfit(x, Y[:, k], 1, cov=True)
        assert np.allclose([slopes[k], icpt[k]], coef)
        assert np.isclose(stderr[k], np.sqrt(cov[0, 0]))


def _clean_bands(dispersive):
    chip = default_chip(0, coupling=(0.0, 0.0), sigma_db=0.0, dispersive=dispersive)
    return chip, downsample_bands(generate_sweep_dataset(chip, itu_c_band_grid()), 10)


def test_per_wavelength_flat_chip_has_no_slope():
    _, sweep = _clean_bands(False)
    wf = fit_sam_per_wavelength(sweep, channels=[0, 5, 9])
    assert wf.phi2.shape == (3, 9)
    assert np.all(np.abs(wf.slopes_per_um) < 1e-4)


def test_per_wavelength_dispersive_slope_matches_scaling():
    chip, sweep = _clean_bands(True)
    wf = fit_sam_per_wavelength(sweep, channels=[0, 5, 9])
    lam_um = sweep.grid.center_wavelengths_nm[5] * 1e-3
    expected = -wf.phi2[1] / lam_um
    assert np.all(np.abs(wf.slopes_per_um / expected - 1) < 0.1)
