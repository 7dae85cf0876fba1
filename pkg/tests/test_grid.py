import numpy as np
import pytest
from hypothesis import given, strategies as st

from perflab.errors import DegenerateMass, GridMismatch, InvalidWeight, KernelUnresolved
from perflab.geometry import BoxDomain, centered_ball, perforate_domain
from perflab.grid import (Grid, assemble_weighted_stiffness, bump_kernel, cutoff_theta,
                          cutoff_zeta, divergence, gradient, mollify, read_field,
                          sample_periodic, torus, weighted_inner_product, weighted_mass,
                          write_field, write_vtk)


def test_torus_constants_in_kernel():
    op = assemble_weighted_stiffness(torus(8, 3))
    assert np.abs(op.matrix @ np.ones(op.n)).max() < 1e-12


def test_textbook_stencil_1d():
    h = 0.25
    op = assemble_weighted_stiffness(Grid((3,), h), outer="cell")
    expected = np.array([[2, -1, 0], [-1, 2, -1], [0, -1, 2]]) / h ** 2
    assert np.allclose(op.matrix.toarray() / h, expected)


def test_face_dirichlet_uses_half_cell():
    h = 0.25
    op = assemble_weighted_stiffness(Grid((3,), h))
    assert op.matrix.toarray()[0, 0] / h == pytest.approx(3 / h ** 2)


def _form(u, w, grid):
    # sum over torus faces of arithmetic-mean weight times squared difference
    total = 0.0
    for ax in range(grid.d):
        du = (np.roll(u, -1, axis=ax) - u) / grid.h
        wf = 0.5 * (w + np.roll(w, -1, axis=ax))
        total += np.sum(wf * du ** 2)
    return total * grid.cell_volume


@given(st.integers(0, 10_000))
def test_matrix_equals_quadratic_form(seed):
    rng = np.random.default_rng(seed)
    grid = torus(6, 2)
    w = rng.uniform(0.1, 2.0, grid.shape)
    op = assemble_weighted_stiffness(grid, weight=w)
    u = rng.standard_normal(grid.shape)
    assert u.ravel() @ (op.matrix @ u.ravel()) == pytest.approx(_form(u, w, grid), rel=1e-12)


def test_symmetry_pattern_and_positivity(rng):
    grid = Grid((7, 6, 5), 0.1)
    w = rng.uniform(0.0, 1.0, grid.shape)
    holes = rng.random(grid.shape) < 0.1
    op = assemble_weighted_stiffness(grid, weight=w, dirichlet=holes)
    A = op.matrix
    assert (A - A.T).nnz == 0
    assert A.getnnz(axis=1).max() <= 2 * grid.d + 1
    X = rng.standard_normal((op.n, 1000))
    assert np.all(np.einsum("ij,ij->j", X, A @ X) >= -1e-12)


def test_negative_weight_rejected():
    with pytest.raises(InvalidWeight):
        assemble_weighted_stiffness(torus(4, 2), weight=-np.ones((4, 4)))
    with pytest.raises(GridMismatch):
        assemble_weighted_stiffness(torus(4, 2), weight=np.ones((5, 4)))


def test_matrix_weight_symmetric_and_scaled():
    grid = Grid((6, 6), 1 / 6)
    A = np.array([[2.0, 0.3], [0.3, 1.0]])
    K = assemble_weighted_stiffness(grid, matrix_weight=A).matrix
    assert abs(K - K.T).max() < 1e-12
    K1 = assemble_weighted_stiffness(grid, matrix_weight=np.eye(2)).matrix
    K2 = assemble_weighted_stiffness(grid, matrix_weight=2 * np.eye(2)).matrix
    assert abs(K2 - 2 * K1).max() < 1e-12


def test_weighted_mass_examples():
    grid = Grid((4, 4), 0.5)
    assert np.allclose(weighted_mass(grid), 0.25)
    assert np.allclose(weighted_mass(Grid((2,), 1.0), np.array([2.0, 3.0])), [2.0, 3.0])
    with pytest.raises(DegenerateMass):
        weighted_mass(grid, np.zeros((4, 4)))
    assert np.allclose(weighted_mass(grid, np.zeros((4, 4)), floor=1e-12), 0.25e-12)


def test_gradient_examples():
    grid = Grid((8, 8), 0.125)
    assert np.abs(gradient(np.full(grid.shape, 3.0), torus(8, 2))).max() == 0
    x = grid.centers()[..., 0]
    g = gradient(x, grid)
    assert np.allclose(g[0][:-1], 1.0) and np.allclose(g[1][:, :-1], 0.0)


@given(st.integers(0, 10_000), st.sampled_from([(5, 7), (4, 4, 6)]))
def test_summation_by_parts(seed, shape):
    rng = np.random.default_rng(seed)
    grid = Grid(shape, 0.3, periodic=True)
    u = rng.standard_normal(shape)
    v = rng.standard_normal((len(shape),) + shape)
    lhs = np.sum(gradient(u, grid) * v) + np.sum(u * divergence(v, grid))
    assert abs(lhs) <= 1e-12 * np.linalg.norm(u) * np.linalg.norm(v) / grid.h


def test_kernel_resolution_and_normalization():
    grid = Grid((40, 40), 1 / 40)
    with pytest.raises(KernelUnresolved):
        bump_kernel(grid, 1.5 / 40)
    k = bump_kernel(grid, 0.1)
    assert k.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.allclose(k, k[::-1, ::-1])


def test_mollify_constant_delta_ramp():
    grid = Grid((40, 40), 1 / 40)
    eps, c1 = 0.5, 0.2
    out = mollify(np.full(grid.shape, 2.5), torus(40, 2), eps, c1)
    assert np.allclose(out, 2.5, atol=1e-13)
    delta = np.zeros(grid.shape)
    delta[20, 20] = 1.0
    k = bump_kernel(grid, eps * c1)
    m = k.shape[0] // 2
    sm = mollify(delta, grid, eps, c1)
    assert np.allclose(sm[20 - m:20 + m + 1, 20 - m:20 + m + 1], k[::-1, ::-1])
    assert sm.sum() == pytest.approx(1.0, abs=1e-14)
    ramp = grid.centers() @ np.array([0.7, -1.3])
    inner = (slice(m, -m), slice(m, -m))
    assert np.abs(mollify(ramp, grid, eps, c1)[inner] - ramp[inner]).max() < 1e-12


@given(st.integers(0, 1000))
def test_mollify_preserves_mass_on_torus(seed):
    rng = np.random.default_rng(seed)
    grid = torus(24, 2)
    f = rng.standard_normal(grid.shape)
    assert mollify(f, grid, 0.5, 0.25).sum() == pytest.approx(f.sum(), rel=1e-12, abs=1e-12)


def test_cutoff_values():
    eps, c1 = 1.0, 0.05
    grid = Grid((100, 200), 0.01)          # centers 0.005 + 0.01 i hit 0.5 and 1.5 c1 eps exactly
    theta = cutoff_theta(grid, eps, c1, c0=0.2)
    x = grid.axes()[0]
    row = theta[:, 100]
    for dist, expected in ((3 * c1 * eps, 1.0), (0.5 * c1 * eps, 0.0), (1.5 * c1 * eps, 0.5)):
        i = int(np.argmin(np.abs(x - dist)))
        assert abs(x[i] - dist) <= grid.h / 2 + 1e-12
        assert row[i] == pytest.approx(expected, abs=1e-9)
    assert np.allclose(cutoff_zeta(grid, eps, c1) + theta, 1.0)
    with pytest.raises(ValueError):
        cutoff_theta(grid, eps, 0.1, c0=0.2)


def test_cutoff_gradient_bound():
    eps, c1 = 0.25, 0.05
    grid = Grid((160, 160), 1 / 160)
    theta = cutoff_theta(grid, eps, c1)
    g = np.abs(gradient(theta, grid)[:, :-1, :-1]).max()
    assert g <= (1 / (c1 * eps)) * (1 + 2 * grid.h / eps)


def test_sample_periodic():
    spec = centered_ball(2, 0.25)
    pd = perforate_domain(BoxDomain((1.0, 0.5), 0.25), spec, 8)
    assert np.all(sample_periodic(np.full((8, 8), 1.5), pd) == 1.5)
    assert np.array_equal(sample_periodic(pd.cell_holes, pd), pd.holes)
    f = np.random.default_rng(0).standard_normal((8, 8))
    assert sample_periodic(f, pd).mean() == pytest.approx(f.mean(), abs=1e-14)
    with pytest.raises(GridMismatch):
        sample_periodic(np.zeros((16, 16)), pd)


def test_weighted_inner_product(rng):
    grid = Grid((5, 4), 0.25)
    one = np.ones(grid.shape)
    assert weighted_inner_product(one, one, grid=grid) == pytest.approx(np.prod(grid.lengths))
    f, g, w = rng.standard_normal((3,) + grid.shape)
    w = w ** 2
    assert weighted_inner_product(f, f, w, grid) >= 0
    assert weighted_inner_product(f, g, w, grid) == pytest.approx(weighted_inner_product(g, f, w, grid))
    # dense quadrature oracle
    oracle = f.ravel() @ np.diag(w.ravel() * grid.cell_volume) @ g.ravel()
    assert weighted_inner_product(f, g, w, grid) == pytest.approx(oracle, rel=1e-13)


def test_field_io_roundtrip(tmp_path, rng):
    f = rng.standard_normal((3, 4, 5))
    write_field(tmp_path / "f.bin", f)
    raw = (tmp_path / "f.bin").read_bytes()
    assert np.frombuffer(raw[:8], "<i8")[0] == 3
    assert np.array_equal(read_field(tmp_path / "f.bin"), f)
    write_vtk(tmp_path / "f.vtk", f[0], 0.1, "phi")
    text = (tmp_path / "f.vtk").read_text()
    assert "DIMENSIONS 5 6 2" in text and "CELL_DATA 20" in text
