import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perflab.cell import (CellData, HomogenizedTensor, cell_eigenpair, compute_cell_data,
                          flux_potentials, homogenized_tensor, solve_correctors, theta_energy,
                          verify_cell_estimates, weighted_corrector_residual)
from perflab.errors import GeometryUnresolved, MeanZeroViolated
from perflab.geometry import PerforationSpec, ball, centered_ball, rounded_box


@pytest.fixture(scope="module")
def cube_cell():
    return compute_cell_data(centered_ball(3, 0.5, eta=0.4), 24, potentials=True)


def test_no_holes_shortcuts():
    data = compute_cell_data(PerforationSpec(3), 8, potentials=True)
    assert data.pair.lambda_bar == 0.0
    assert np.all(data.pair.phi == 1.0)
    assert np.all(data.correctors.chi == 0.0)
    assert np.array_equal(data.tensor.A_bar, np.eye(3))
    pot = data.potentials
    for name in ("Psi", "Phi", "Xi", "Theta"):
        assert np.abs(getattr(pot, name)).max() == 0.0
    est = verify_cell_estimates(data.pair, data.correctors)
    assert est.degeneracy == (1.0, 1.0) and est.bounded


def test_eigenpair_invariants(cube_cell):
    pair = cube_cell.pair
    g = pair.grid
    assert np.sum(pair.phi ** 2) * g.cell_volume == pytest.approx(1.0, abs=1e-10)
    assert pair.phi.min() >= 0
    assert np.all(pair.phi[pair.holes] == 0) and np.all(pair.phi[~pair.holes] > 0)
    assert pair.lambda_bar > 0
    assert abs(pair.rayleigh_quotient() - pair.lambda_bar) <= 1e-10 * max(1.0, pair.lambda_bar)


def test_unresolved_hole_rejected():
    with pytest.raises(GeometryUnresolved):
        cell_eigenpair(centered_ball(3, 0.25, eta=0.2), 16)


def test_grid_convergence_of_lambda_bar():
    spec = centered_ball(3, 0.25, eta=1.0)
    lam32 = cell_eigenpair(spec, 32).lambda_bar
    lam64 = cell_eigenpair(spec, 64).lambda_bar
    assert abs(lam32 - lam64) / lam64 < 0.05


def test_lambda_bar_eta_ratio():
    lam = [cell_eigenpair(centered_ball(3, 0.25, eta=e), 64).lambda_bar for e in (0.2, 0.4)]
    assert abs(lam[1] / lam[0] - 2.0) / 2.0 < 0.30


def test_corrector_invariants(cube_cell):
    corr, pair = cube_cell.correctors, cube_cell.pair
    assert np.abs(corr.means).max() <= 1e-9
    assert np.all(corr.chi_hat[:, pair.holes] == 0)
    assert corr.residuals.max() <= 1e-9


def test_corrector_reflection_symmetry(cube_cell):
    chi = cube_cell.correctors.chi[0]
    # cells i and r-1-i are mirror images about the cell center
    assert np.abs(chi + chi[::-1, :, :]).max() <= 1e-8
    assert np.abs(chi - chi[:, ::-1, :]).max() <= 1e-8
    assert np.abs(chi - chi[:, :, ::-1]).max() <= 1e-8


def test_corrector_norm_decreases_with_eta():
    norms = []
    for eta in (0.2, 0.4):
        data = compute_cell_data(centered_ball(3, 0.5, eta=eta), 32)
        norms.append(np.sqrt(np.sum(data.correctors.chi ** 2) / 32 ** 3))
    assert norms[0] < norms[1]


def test_tensor_cubic_symmetry(cube_cell):
    A = cube_cell.tensor.A_bar
    off = A - np.diag(np.diag(A))
    assert np.abs(off).max() <= 1e-6
    assert np.ptp(np.diag(A)) <= 1e-8
    assert np.abs(A - A.T).max() <= 1e-8
    assert np.linalg.eigvalsh(A).min() > 0
    assert A[0, 0] < 1.0


def test_tensor_gap_shrinks_under_refinement():
    gaps = [compute_cell_data(centered_ball(3, 0.5, eta=0.4), r).tensor.gap for r in (16, 32)]
    assert gaps[1] < gaps[0] / 1.5
    # A_hat equals A_def up to round-off on the lattice
    data = compute_cell_data(centered_ball(3, 0.5, eta=0.4), 16)
    assert np.abs(data.tensor.A_hat - data.tensor.A_def).max() < 1e-12


def test_tensor_distance_to_identity_decreases():
    dev = [np.abs(compute_cell_data(centered_ball(3, 0.5, eta=e), 32).tensor.A_bar - np.eye(3)).max()
           for e in (0.15, 0.3)]
    assert dev[0] < dev[1]


def test_tensor_uniform_ellipticity():
    mins = [np.linalg.eigvalsh(compute_cell_data(centered_ball(3, 0.5, eta=e), 48).tensor.A_bar).min()
            for e in (0.1, 0.2, 0.3, 0.4)]
    assert min(mins) >= 0.5 * mins[0]


def test_tensor_json_roundtrip(cube_cell):
    t = HomogenizedTensor.from_dict(cube_cell.tensor.to_dict())
    assert np.array_equal(t.A_bar, cube_cell.tensor.A_bar)


def test_weighted_corrector_identity(cube_cell):
    for r in (16, 32):
        data = compute_cell_data(centered_ball(3, 0.5, eta=0.4), r)
        res = weighted_corrector_residual(data.pair, data.correctors)
        assert res.max() <= 10 / r


def test_flux_potential_identities(cube_cell):
    res = cube_cell.potentials.residuals
    assert res["div_Psi"] <= 1e-8
    assert res["div_Phi"] <= 1e-8
    assert res["skew_Phi"] == 0.0
    assert abs(res["mean_q"]) <= 1e-9


def test_flux_potentials_reject_inconsistent_tensor(cube_cell):
    bad = HomogenizedTensor(*(cube_cell.tensor.A_bar + 0.1 for _ in range(4)))
    with pytest.raises(MeanZeroViolated):
        flux_potentials(cube_cell.pair, cube_cell.correctors, bad)


def test_theta_energy_decreases_with_eta():
    energy = []
    for eta in (0.2, 0.4):
        data = compute_cell_data(centered_ball(3, 0.5, eta=eta), 24, potentials=True)
        energy.append(theta_energy(data.pair, data.potentials))
    assert 0 < energy[0] < energy[1]


def test_cell_estimates(cube_cell):
    est = verify_cell_estimates(cube_cell.pair, cube_cell.correctors)
    assert est.bounded
    assert est.degeneracy[0] > 0


def test_near_hole_linearity():
    data = compute_cell_data(centered_ball(3, 0.25, eta=0.2), 64)
    assert verify_cell_estimates(data.pair, data.correctors).linearity > 0.9


def test_cell_data_roundtrip(cube_cell, tmp_path):
    cube_cell.save(tmp_path / "cell")
    back = CellData.load(tmp_path / "cell")
    assert back.pair.lambda_bar == cube_cell.pair.lambda_bar
    assert np.array_equal(back.pair.phi, cube_cell.pair.phi)
    assert np.array_equal(back.correctors.chi, cube_cell.correctors.chi)
    assert np.array_equal(back.tensor.A_bar, cube_cell.tensor.A_bar)
    assert np.array_equal(back.potentials.Theta, cube_cell.potentials.Theta)


hole_2d = st.builds(lambda cx, cy, r: ball((cx, cy), r),
                    st.floats(0.35, 0.65), st.floats(0.35, 0.65), st.floats(0.1, 0.14))


@settings(max_examples=15)
@given(hole_2d, st.floats(0.65, 1.0))
def test_random_perforation_invariants(hole, eta):
    spec = PerforationSpec(2, (hole,), eta)
    data = compute_cell_data(spec, 32, potentials=True)
    pair, corr, A = data.pair, data.correctors, data.tensor.A_bar
    assert np.sum(pair.phi ** 2) / 32 ** 2 == pytest.approx(1.0, abs=1e-10)
    assert abs(pair.rayleigh_quotient() - pair.lambda_bar) <= 1e-10 * pair.lambda_bar
    assert np.abs(corr.means).max() <= 1e-9
    assert np.abs(A - A.T).max() <= 1e-8 and np.linalg.eigvalsh(A).min() > 0
    assert data.potentials.residuals["div_Psi"] <= 1e-8
    assert data.potentials.residuals["div_Phi"] <= 1e-8


def test_two_holes():
    spec = PerforationSpec(2, (ball((0.3, 0.5), 0.1), rounded_box((0.7, 0.5), (0.03, 0.08), 0.03)), 0.8,
                           c0=0.05)
    data = compute_cell_data(spec, 48, potentials=True)
    assert data.pair.lambda_bar > 0
    assert data.potentials.residuals["div_Phi"] <= 1e-8
