import numpy as np
import pytest

from mzimesh.mesh import (
    BAR, CROSS, FLOOR_DB, LossMatrix, MeshTopology, MziPhaseParams, OpticalPathParams, WavelengthGrid,
    db_to_linear, default_topology, extinction_reflectance, ideal_mzi_transfer, itu_c_band_grid, linear_to_db,
    mzi_power_term, phase_from_voltage, phase_params_at_wavelength, phases, sam_forward, samxt_forward,
)

R30 = (np.sqrt(1000.0) - 1) / (np.sqrt(1000.0) + 1)


def test_phase_from_voltage_examples():
    p = MziPhaseParams(np.full(9, 0.3), np.ones(9))
    v = np.zeros(9)
    v[0] = 2.0
    assert phase_from_voltage(p, 0, v) == pytest.approx(4.3, abs=1e-15)
    assert phase_from_voltage(p, 3, np.zeros(9)) == 0.3
    phi2 = np.eye(9)
    phi2[0, 1] = 0.05
    v = np.zeros(9)
    v[1] = 2.0
    assert phase_from_voltage(MziPhaseParams(np.full(9, 0.3), phi2), 0, v) == pytest.approx(0.5, abs=1e-15)


def test_phase_dimension_mismatch():
    p = MziPhaseParams(np.zeros(9), np.ones(9))
    with pytest.raises(ValueError):
        phase_from_voltage(p, 0, np.zeros(8))
    with pytest.raises(ValueError):
        phases(np.zeros(9), np.eye(9), np.zeros(8))


def test_batched_phases_match_scalar():
    rng = np.random.default_rng(0)
    p = MziPhaseParams(rng.uniform(0, 6, 9), np.eye(9) + 0.05 * rng.random((9, 9)))
    V = rng.uniform(0, 2, (5, 9))
    batch = phases(p.phi0, p.phi2, V)
    for n in range(5):
        for m in range(9):
            assert batch[n, m] == pytest.approx(phase_from_voltage(p, m, V[n]), abs=1e-13)


@pytest.mark.parametrize("theta", [0.0, 0.7, -2.0])
def test_ideal_transfer_limits(theta):
    T = np.abs(ideal_mzi_transfer(0.0, theta)) ** 2
    np.testing.assert_allclose(T, [[0, 1], [1, 0]], atol=1e-15)
    T = np.abs(ideal_mzi_transfer(np.pi, theta)) ** 2
    np.testing.assert_allclose(T, [[1, 0], [0, 1]], atol=1e-15)


def test_ideal_transfer_quadrature_point():
    np.testing.assert_allclose(np.abs(ideal_mzi_transfer(np.pi / 2, 0.0)) ** 2, 0.5, atol=1e-15)


def test_power_term_scalar_values():
    assert mzi_power_term(0.0, 30.0, CROSS) == pytest.approx((1 + R30) ** 2 / 4, rel=1e-14)
    assert mzi_power_term(0.0, 30.0, CROSS) == pytest.approx(0.93963, abs=5e-6)
    off = mzi_power_term(np.pi, 30.0, CROSS)
    assert off == pytest.approx(9.397e-4, rel=1e-3)
    assert 10 * np.log10(off) == pytest.approx(-30.27, abs=5e-3)


def test_power_term_sign_array_matches_state():
    phi = np.linspace(0, 6, 7)
    np.testing.assert_array_equal(mzi_power_term(phi, 25.0, np.full(7, -1.0)), mzi_power_term(phi, 25.0, BAR))


def test_power_term_rejects_nonpositive_er():
    with pytest.raises(ValueError):
        mzi_power_term(0.0, 0.0, CROSS)


def test_extinction_is_er():
    phi = np.linspace(0, 2 * np.pi, 2001)
    for er in (10.0, 30.0):
        t = mzi_power_term(phi, er, BAR)
        assert t.max() / t.min() == pytest.approx(db_to_linear(er), rel=1e-6)


def test_default_topology_paths():
    topo = default_topology()
    assert topo.paths[(2, 1)] == [(1, BAR), (4, CROSS), (8, BAR)]
    for i in range(1, 4):
        assert [s for _, s in topo.paths[(i, i)]] == [CROSS, BAR, CROSS]
    # diagonal paths share no MZI
    diag = [set(m for m, _ in topo.paths[(i, i)]) for i in range(1, 4)]
    assert not (diag[0] & diag[1] or diag[1] & diag[2] or diag[0] & diag[2])
    assert MeshTopology.from_dict(topo.to_dict()) == topo


def test_topology_validation():
    paths = dict(default_topology().paths)
    paths[(1, 1)] = [(1, CROSS), (2, BAR), (7, CROSS)]
    with pytest.raises(ValueError):
        MeshTopology(paths)
    paths = dict(default_topology().paths)
    del paths[(3, 3)]
    with pytest.raises(ValueError):
        MeshTopology(paths)


def _all_cross_chip():
    """Phases that put every MZI at full transmission for the diagonal path of output/input 1."""
    topo = default_topology()
    phi0 = np.zeros(9)
    for m, s in topo.paths[(1, 1)]:
        phi0[m - 1] = 0.0 if s == CROSS else np.pi
    return topo, phi0


def test_sam_three_cross_terms():
    topo = default_topology()
    paths = {k: [(m, CROSS) for m, _ in v] for k, v in topo.paths.items()}
    topo = MeshTopology(paths)
    w = sam_forward(topo, MziPhaseParams(np.zeros(9), np.ones(9), 30.0), LossMatrix(np.ones((3, 3))), np.zeros(9))
    expected = 30 * np.log10((1 + R30) ** 2 / 4)
    np.testing.assert_allclose(w, expected, atol=1e-12)
    assert expected == pytest.approx(-0.8117, abs=1e-3)


def test_sam_loss_only_case():
    topo, phi0 = _all_cross_chip()
    alpha = np.full((3, 3), 0.5)
    w = sam_forward(topo, MziPhaseParams(phi0, np.ones(9), 120.0), LossMatrix(alpha), np.zeros(9))
    assert w[0, 0] == pytest.approx(-3.0103, abs=1e-4)


def test_sam_one_bar_at_zero():
    topo, phi0 = _all_cross_chip()
    bar_m = [m for m, s in topo.paths[(1, 1)] if s == BAR][0]
    phi0[bar_m - 1] = 0.0  # bar state is at its minimum at phi = 0
    w = sam_forward(topo, MziPhaseParams(phi0, np.ones(9), 30.0), LossMatrix(np.ones((3, 3))), np.zeros(9))
    t_on = (1 + R30) ** 2 / 4
    t_off = (1 - R30) ** 2 / 4
    assert w[0, 0] == pytest.approx(10 * np.log10(t_off * t_on ** 2), abs=1e-12)
    assert w[0, 0] == pytest.approx(-30.81, abs=0.01)


def test_floor_clamp_and_mask():
    topo, phi0 = _all_cross_chip()
    alpha = np.full((3, 3), 1e-5)
    phi0[[m - 1 for m, s in topo.paths[(1, 1)] if s == BAR]] = 0.0
    w, mask = sam_forward(topo, MziPhaseParams(phi0, np.ones(9), 30.0), LossMatrix(alpha), np.zeros(9),
                          return_mask=True)
    assert w[0, 0] == FLOOR_DB and mask[0, 0]
    assert np.all(w >= FLOOR_DB)


def test_sam_ignores_crosstalk_samxt_uses_it():
    rng = np.random.default_rng(1)
    topo = default_topology()
    phi2 = np.diag(rng.uniform(0.9, 1.2, 9))
    xt = phi2 + 0.1 * (1 - np.eye(9))
    p_diag = MziPhaseParams(rng.uniform(0, 6, 9), phi2)
    p_xt = MziPhaseParams(p_diag.phi0, xt)
    loss = LossMatrix.from_db(np.full((3, 3), -10.0))
    v = rng.uniform(0, 2, 9)
    np.testing.assert_array_equal(sam_forward(topo, p_xt, loss, v), sam_forward(topo, p_diag, loss, v))
    assert not np.allclose(samxt_forward(topo, p_xt, loss, v), sam_forward(topo, p_xt, loss, v))
    np.testing.assert_allclose(samxt_forward(topo, p_diag, loss, v), sam_forward(topo, p_diag, loss, v), atol=0)


def test_forward_matches_independent_product():
    rng = np.random.default_rng(2)
    topo = default_topology()
    p = MziPhaseParams(rng.uniform(0, 6, 9), np.eye(9) * 1.1 + 0.04 * (1 - np.eye(9)), 27.0)
    a = rng.uniform(0.05, 0.2, (3, 3))
    v = rng.uniform(0, 2, 9)
    w = samxt_forward(topo, p, LossMatrix(a), v)
    phi = p.phi0 + p.phi2 @ v**2
    r = extinction_reflectance(27.0)
    for (i, j), path in topo.paths.items():
        lin = a[i - 1, j - 1]
        for m, s in path:
            lin *= abs(r + (1 if s == CROSS else -1) * np.exp(1j * phi[m - 1])) ** 2 / 4
        assert w[i - 1, j - 1] == pytest.approx(max(10 * np.log10(lin), FLOOR_DB), abs=1e-10)


def test_loss_matrix_bounds():
    with pytest.raises(ValueError):
        LossMatrix(np.full((3, 3), 1.5))
    with pytest.raises(ValueError):
        LossMatrix(np.zeros((3, 3)))
    np.testing.assert_allclose(LossMatrix.from_db(np.full((3, 3), -3.0)).alpha_db, -3.0)


def test_db_roundtrip_and_floor():
    x = np.array([1.0, 0.5, 1e-3])
    np.testing.assert_allclose(db_to_linear(linear_to_db(x)), x, rtol=1e-14)
    assert linear_to_db(0.0) == FLOOR_DB


def test_optical_path_consistency():
    rng = np.random.default_rng(3)
    phi0, phi2 = rng.uniform(0, 6, 9), rng.uniform(0.9, 1.2, 9)
    opt = OpticalPathParams.from_phase(phi0, phi2, 1550.0)
    back = phase_params_at_wavelength(opt, 1550.0)
    np.testing.assert_allclose(back.phi0, phi0, atol=1e-9)
    np.testing.assert_allclose(np.diag(back.phi2), phi2, atol=1e-9)
    # phi2 scales as 1/lambda
    at = phase_params_at_wavelength(opt, 1600.0)
    np.testing.assert_allclose(np.diag(at.phi2), phi2 * 1550.0 / 1600.0, rtol=1e-12)


def test_itu_grid():
    g = itu_c_band_grid()
    assert g.n_channels == 100
    assert np.all(np.diff(g.center_wavelengths_nm) > 0)
    assert g.center_wavelengths_nm[0] == pytest.approx(1528.38, abs=0.01)
    assert g.center_wavelengths_nm[-1] == pytest.approx(1567.95, abs=0.01)
    bands = g.center_wavelengths_nm.reshape(10, 10).mean(axis=1)
    assert bands[5] == pytest.approx(1549.92, abs=0.01)
    assert WavelengthGrid.from_dict(g.to_dict()) == g
    with pytest.raises(ValueError):
        g.index_of(1549.0)
    with pytest.raises(ValueError):
        WavelengthGrid([1550.0, 1549.0])
