"""Unit-cell computations on the perforated torus Y_eta.

The principal Dirichlet eigenpair (phi, lambda_bar) of the cell, the
degenerate correctors chi, the homogenized tensor by three formulas, the
flux potentials and the pointwise estimates of phi and chi.

Discretization.  Cells of the torus grid carry phi at their centers; a face
between cells a and b carries the weight phi_a * phi_b.  This is the exact
lattice ground-state transform of the 2d+1 point Laplacian: for u = phi v,

    sum_faces (u_a - u_b)^2 = lambda_bar * sum phi^2 v^2 + sum_faces phi_a phi_b (v_a - v_b)^2

(up to h scalings), so the factorization identities hold on the grid
without discretization error and A_bar is the effective tensor of the
lattice problem.  Face weights vanish next to holes, which gives the
natural no-flux condition on the hole boundary.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import GeometryUnresolved, MeanZeroViolated
from .geometry import PerforationSpec, build_hole_indicator
from .grid import Grid, assemble_weighted_stiffness, read_field, torus, write_field
from .solver import amg_preconditioner, cg_solve, periodic_poisson, smallest_eigenpairs

log = logging.getLogger(__name__)

CORRECTOR_TOL = 1e-12
MEAN_TOL = 1e-9


@dataclass
class CellEigenpair:
    phi: np.ndarray
    lambda_bar: float
    resolution: int
    spec: PerforationSpec
    holes: np.ndarray

    @property
    def grid(self) -> Grid:
        return torus(self.resolution, self.spec.d)

    @property
    def active(self) -> np.ndarray:
        return self.phi > 0

    def rayleigh_quotient(self) -> float:
        g = self.grid
        energy = sum(np.sum((np.roll(self.phi, -1, axis=ax) - self.phi) ** 2) for ax in range(g.d))
        return float(energy * g.h ** (g.d - 2) / (np.sum(self.phi ** 2) * g.cell_volume))


@dataclass
class CorrectorSet:
    chi: np.ndarray          # (d,) + grid shape, zero in holes
    chi_hat: np.ndarray      # phi * chi
    means: np.ndarray        # integral of chi^j over Y_eta
    residuals: np.ndarray    # relative residual of each discrete cell problem


@dataclass
class HomogenizedTensor:
    A_bar: np.ndarray
    A_def: np.ndarray
    A_sym: np.ndarray
    A_hat: np.ndarray

    @property
    def gap(self) -> float:
        mats = (self.A_def, self.A_sym, self.A_hat)
        return float(max(np.max(np.abs(a - b)) for i, a in enumerate(mats) for b in mats[i + 1:]))

    def to_dict(self) -> dict:
        return {"A_bar": self.A_bar.tolist(), "A_def": self.A_def.tolist(),
                "A_sym": self.A_sym.tolist(), "A_hat": self.A_hat.tolist(), "gap": self.gap}

    @classmethod
    def from_dict(cls, data: dict) -> "HomogenizedTensor":
        return cls(*(np.asarray(data[k], dtype=float) for k in ("A_bar", "A_def", "A_sym", "A_hat")))


@dataclass
class FluxPotentials:
    """Periodic potentials of the mean-zero cell quantities.

    Staggering: ``Psi[i]``, ``b[i, j]`` and ``f[i, j]`` live on the faces
    a + e_i/2; ``Phi[k, i, j]`` is ``D_k f[i, j] - D_i f[k, j]``.  ``Xi`` and
    ``Theta`` are cell-centered.
    """
    Psi: np.ndarray
    Phi: np.ndarray
    Xi: np.ndarray
    Theta: np.ndarray
    b: np.ndarray
    q: np.ndarray
    residuals: dict = field(default_factory=dict)


@dataclass
class CellEstimateReport:
    degeneracy: tuple        # min, max of phi / min(1, dist/eta)
    interior: tuple          # min, max of |phi - 1| max(1, (dist/eta)^((d-2)/2))
    corrector: tuple         # min, max of |chi| max(1, (dist/eta)^((d-2)/2))
    linearity: float         # correlation of phi with dist/eta where dist < eta
    cap: float = 50.0

    @property
    def bounded(self) -> bool:
        lo, hi = self.degeneracy
        return bool(lo > 0 and hi / lo <= self.cap and self.interior[1] <= self.cap
                    and self.corrector[1] <= self.cap)

    def stable_against(self, other: "CellEstimateReport", rel: float = 0.2) -> bool:
        pairs = [(self.degeneracy[1] / self.degeneracy[0], other.degeneracy[1] / other.degeneracy[0]),
                 (self.interior[1], other.interior[1]), (self.corrector[1], other.corrector[1])]
        return all(abs(a - b) <= rel * max(abs(b), 1e-12) for a, b in pairs)


def _forward(u, ax):
    return np.roll(u, -1, axis=ax)


def _backward(u, ax):
    return np.roll(u, 1, axis=ax)


def face_weights_phi(phi: np.ndarray) -> np.ndarray:
    """phi_a phi_{a+e_i} on the +i face of every cell, shape (d,) + shape."""
    return np.stack([phi * _forward(phi, ax) for ax in range(phi.ndim)])


def cell_eigenpair(spec: PerforationSpec, resolution: int, tol: float = 1e-9,
                   min_cells_across: float = 4.0) -> CellEigenpair:
    """Principal eigenpair of the periodic Laplacian with Dirichlet holes.

    ``phi`` is L2(Y)-normalized, nonnegative and zero on the hole cells.
    Holes narrower than ``min_cells_across`` grid cells raise
    GeometryUnresolved.
    """
    d, r = spec.d, int(resolution)
    holes = build_hole_indicator(spec, r)
    grid = torus(r, d)
    if spec.empty:
        return CellEigenpair(np.ones(grid.shape), 0.0, r, spec, holes)
    narrowest = min(h.diameter for h in spec.holes) * spec.eta * r
    if narrowest < min_cells_across:
        raise GeometryUnresolved(f"hole spans {narrowest:.2f} cells, need {min_cells_across}")
    op = assemble_weighted_stiffness(grid, dirichlet=holes)
    mass = np.full(op.n, grid.cell_volume)
    sol = smallest_eigenpairs(op.matrix, mass, K=1, tol=tol)
    phi = np.abs(op.extend(sol.vectors[:, 0]))
    phi /= np.sqrt(np.sum(phi ** 2) * grid.cell_volume)
    phi[holes] = 0.0
    return CellEigenpair(phi, float(sol.values[0]), r, spec, holes)


def _corrector_operator(pair: CellEigenpair):
    grid = pair.grid
    return assemble_weighted_stiffness(grid, weight=pair.phi ** 2, dirichlet=~pair.active,
                                       face_mean="geometric")


def _preconditioner(A):
    # Jacobi is enough on small cells; multigrid pays off beyond ~30^3
    return amg_preconditioner(A) if A.shape[0] > 20_000 else None


def solve_correctors(pair: CellEigenpair, tol: float = CORRECTOR_TOL) -> CorrectorSet:
    """Solve -div(phi^2 grad chi^j) = div(phi^2 e_j) with mean zero on Y_eta."""
    grid, d = pair.grid, pair.spec.d
    shape = grid.shape
    if pair.lambda_bar == 0.0 and not pair.holes.any():
        z = np.zeros((d,) + shape)
        return CorrectorSet(z, z.copy(), np.zeros(d), np.zeros(d))
    op = _corrector_operator(pair)
    w = face_weights_phi(pair.phi)
    chi = np.zeros((d,) + shape)
    res = np.zeros(d)
    means = np.zeros(d)
    ones = np.ones(op.n)
    pre = _preconditioner(op.matrix)
    for j in range(d):
        rhs_field = (w[j] - _backward(w[j], j)) * grid.h ** (d - 1)
        rhs = op.restrict(rhs_field)
        x = cg_solve(op.matrix, rhs, tol=tol, constraint=ones, preconditioner=pre)
        res[j] = np.linalg.norm(op.matrix @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
        chi[j] = op.extend(x)
        means[j] = chi[j][pair.active].sum() * grid.cell_volume
    return CorrectorSet(chi, pair.phi[None] * chi, means, res)


def face_gradient(u: np.ndarray, h: float) -> np.ndarray:
    """Forward differences on the torus, shape (d,) + u.shape."""
    return np.stack([(_forward(u, ax) - u) / h for ax in range(u.ndim)])


def face_fluxes(pair: CellEigenpair, corr: CorrectorSet) -> np.ndarray:
    """F[i, j] = w_i (delta_ij + D_i chi^j) on the +i faces."""
    d, h = pair.spec.d, pair.grid.h
    w = face_weights_phi(pair.phi)
    F = np.empty((d, d) + pair.phi.shape)
    for j in range(d):
        g = face_gradient(corr.chi[j], h)
        for i in range(d):
            F[i, j] = w[i] * ((i == j) + g[i])
    return F


def homogenized_tensor(pair: CellEigenpair, corr: CorrectorSet) -> HomogenizedTensor:
    """A_bar by the definition, the symmetric Gram form and the weighted correctors."""
    d, grid = pair.spec.d, pair.grid
    h, vol = grid.h, grid.cell_volume
    if corr.chi.shape[1:] != pair.phi.shape:
        raise ValueError("eigenpair and correctors come from different resolutions")
    w = face_weights_phi(pair.phi)
    grads = [face_gradient(corr.chi[j], h) for j in range(d)]
    A_sym = np.empty((d, d))
    A_def = np.empty((d, d))
    A_hat = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            A_sym[i, j] = sum(np.sum(w[k] * ((k == i) + grads[i][k]) * ((k == j) + grads[j][k]))
                              for k in range(d)) * vol
            A_def[i, j] = (i == j) + np.sum(w[i] * grads[j][i]) * vol
            dchat = (_forward(corr.chi_hat[j], i) - _backward(corr.chi_hat[j], i)) / (2 * h)
            A_hat[i, j] = (i == j) + 2.0 * np.sum(pair.phi * dchat) * vol
    return HomogenizedTensor(A_sym.copy(), A_def, A_sym, A_hat)


def weighted_corrector_residual(pair: CellEigenpair, corr: CorrectorSet) -> np.ndarray:
    """L2 norm over Y_eta of -Lap chi_hat^j - lambda_bar chi_hat^j - 2 d_j phi, per j."""
    grid = pair.grid
    h, vol = grid.h, grid.cell_volume
    out = np.empty(pair.spec.d)
    for j in range(pair.spec.d):
        u = corr.chi_hat[j]
        lap = sum(2 * u - _forward(u, ax) - _backward(u, ax) for ax in range(grid.d)) / h ** 2
        dphi = (_forward(pair.phi, j) - _backward(pair.phi, j)) / (2 * h)
        r = (lap - pair.lambda_bar * u - 2.0 * dphi)[pair.active]
        out[j] = np.sqrt(np.sum(r ** 2) * vol)
    return out


def _check_mean(rhs: np.ndarray, scale: float, what: str) -> float:
    m = float(rhs.mean())
    if abs(m) > MEAN_TOL * max(scale, 1.0):
        raise MeanZeroViolated(f"{what}: right-hand side has mean {m:.3e}")
    return m


def flux_potentials(pair: CellEigenpair, corr: CorrectorSet, tensor: HomogenizedTensor,
                    tol: float = CORRECTOR_TOL) -> FluxPotentials:
    """Psi, Phi, Xi and Theta on the torus.

    Psi = grad q with -Lap q = 1 - phi^2; b_ij = a_ij - F_ij on the +i faces;
    Phi_kij = D_k f_ij - D_i f_kj with Lap f_ij = b_ij; Xi from the Gram
    density; Theta from the degenerate problem with the flux density.
    """
    d, grid = pair.spec.d, pair.grid
    h, vol = grid.h, grid.cell_volume
    shape = grid.shape
    A = tensor.A_bar
    res: dict = {}

    rhs_q = 1.0 - pair.phi ** 2
    res["mean_q"] = _check_mean(rhs_q, 1.0, "Psi")
    q = periodic_poisson(rhs_q, grid)
    Psi = face_gradient(q, h)
    div = sum((Psi[ax] - _backward(Psi[ax], ax)) / h for ax in range(d))
    res["div_Psi"] = float(np.sqrt(np.sum((div - (pair.phi ** 2 - 1.0)) ** 2) * vol))

    F = face_fluxes(pair, corr)
    b = A.reshape((d, d) + (1,) * d) - F
    res["mean_b"] = max(_check_mean(b[i, j], 1.0, f"b[{i},{j}]") for i in range(d) for j in range(d))
    f = -periodic_poisson(b, grid)          # Lap f = b
    Phi = np.empty((d, d, d) + shape)
    for k in range(d):
        for i in range(d):
            for j in range(d):
                Phi[k, i, j] = (_forward(f[i, j], k) - f[i, j]) / h - (_forward(f[k, j], i) - f[k, j]) / h
    dPhi = np.zeros((d, d) + shape)
    for k in range(d):
        dPhi += (Phi[k] - np.roll(Phi[k], 1, axis=k + 2)) / h
    res["div_Phi"] = float(np.sqrt(np.sum((dPhi - (b - b.mean(axis=tuple(range(2, 2 + d)), keepdims=True))) ** 2) * vol))
    res["skew_Phi"] = float(np.max(np.abs(Phi + Phi.transpose(1, 0, 2, *range(3, 3 + d)))))

    grads = [face_gradient(corr.chi[m], h) for m in range(d)]
    w = face_weights_phi(pair.phi)
    Xi = np.empty((d, d) + shape)
    for m in range(d):
        for n in range(d):
            gram = sum(w[l] * ((m == l) + grads[m][l]) * ((n == l) + grads[n][l]) for l in range(d))
            rhs = A[m, n] - gram
            _check_mean(rhs, 1.0, f"Xi[{m},{n}]")
            Xi[m, n] = periodic_poisson(rhs, grid)

    Theta = np.zeros((d, d) + shape)
    if pair.holes.any():
        op = _corrector_operator(pair)
        ones = np.ones(op.n)
        pre = _preconditioner(op.matrix)
        for j in range(d):
            for l in range(d):
                density = 0.5 * (F[j, l] + _backward(F[j, l], j)) - A[j, l] * pair.phi ** 2
                _check_mean(density, 1.0, f"Theta[{j},{l}]")
                rhs = -op.restrict(density) * vol
                rhs -= rhs.mean()
                Theta[j, l] = op.extend(cg_solve(op.matrix, rhs, tol=tol, constraint=ones,
                                                          preconditioner=pre))
    return FluxPotentials(Psi, Phi, Xi, Theta, b, q, res)


def theta_energy(pair: CellEigenpair, pot: FluxPotentials) -> float:
    """||phi grad Theta||_{L2(Y)} summed over all (j, l)."""
    h, vol = pair.grid.h, pair.grid.cell_volume
    w = face_weights_phi(pair.phi)
    total = 0.0
    d = pair.spec.d
    for j in range(d):
        for l in range(d):
            g = face_gradient(pot.Theta[j, l], h)
            total += float(np.sum(w * g ** 2) * vol)
    return float(np.sqrt(total))


def discrete_hole_distance(pair: CellEigenpair) -> np.ndarray:
    """Periodic distance from each cell center to the nearest hole-cell center."""
    r, d = pair.resolution, pair.spec.d
    if not pair.holes.any():
        return np.ones(pair.phi.shape)
    tiled = np.tile(~pair.holes, (3,) * d)
    dist = ndimage.distance_transform_edt(tiled) / r
    core = tuple(slice(r, 2 * r) for _ in range(d))
    return dist[core]


def verify_cell_estimates(pair: CellEigenpair, corr: CorrectorSet, cap: float = 50.0) -> CellEstimateReport:
    """Empirical ratios of the pointwise estimates over the fluid cells."""
    d, eta = pair.spec.d, pair.spec.eta
    fluid = ~pair.holes
    dist = discrete_hole_distance(pair)[fluid]
    phi = pair.phi[fluid]
    if not pair.holes.any():
        ones = (1.0, 1.0)
        zeros = (0.0, 0.0)
        return CellEstimateReport(ones, zeros, zeros, 1.0, cap)
    rel = dist / eta
    deg = phi / np.minimum(1.0, rel)
    amp = np.maximum(1.0, rel ** ((d - 2) / 2))
    inter = np.abs(phi - 1.0) * amp
    chi_abs = np.sqrt(np.sum(corr.chi[:, fluid] ** 2, axis=0)) * amp
    near = rel < 1.0
    lin = float(np.corrcoef(phi[near], rel[near])[0, 1]) if near.sum() > 2 else float("nan")
    return CellEstimateReport((float(deg.min()), float(deg.max())),
                              (float(inter.min()), float(inter.max())),
                              (float(chi_abs.min()), float(chi_abs.max())), lin, cap)


@dataclass
class CellData:
    """Everything computed on the torus for one perforation spec."""
    pair: CellEigenpair
    correctors: CorrectorSet
    tensor: HomogenizedTensor
    potentials: FluxPotentials | None = None

    @property
    def spec(self) -> PerforationSpec:
        return self.pair.spec

    @property
    def resolution(self) -> int:
        return self.pair.resolution

    def save(self, directory) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"spec": self.spec.to_dict(), "resolution": self.resolution,
                "lambda_bar": self.pair.lambda_bar, "tensor": self.tensor.to_dict(),
                "corrector_means": self.correctors.means.tolist(),
                "corrector_residuals": self.correctors.residuals.tolist()}
        (out / "cell.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        write_field(out / "phi.bin", self.pair.phi)
        write_field(out / "chi.bin", self.correctors.chi)
        if self.potentials is not None:
            for name in ("Psi", "Phi", "Xi", "Theta"):
                write_field(out / f"{name}.bin", getattr(self.potentials, name))
        return out

    @classmethod
    def load(cls, directory) -> "CellData":
        src = Path(directory)
        meta = json.loads((src / "cell.json").read_text())
        spec = PerforationSpec.from_dict(meta["spec"])
        r = int(meta["resolution"])
        phi = read_field(src / "phi.bin")
        pair = CellEigenpair(phi, float(meta["lambda_bar"]), r, spec, build_hole_indicator(spec, r))
        chi = read_field(src / "chi.bin")
        corr = CorrectorSet(chi, phi[None] * chi, np.asarray(meta["corrector_means"]),
                            np.asarray(meta["corrector_residuals"]))
        pot = None
        if (src / "Psi.bin").exists():
            pot = FluxPotentials(*(read_field(src / f"{n}.bin") for n in ("Psi", "Phi", "Xi", "Theta")),
                                 b=np.empty(0), q=np.empty(0))
        return cls(pair, corr, HomogenizedTensor.from_dict(meta["tensor"]), pot)


def compute_cell_data(spec: PerforationSpec, resolution: int, potentials: bool = False,
                      min_cells_across: float = 4.0) -> CellData:
    pair = cell_eigenpair(spec, resolution, min_cells_across=min_cells_across)
    corr = solve_correctors(pair)
    tensor = homogenized_tensor(pair, corr)
    pot = flux_potentials(pair, corr, tensor) if potentials else None
    log.info("cell eta=%.3g r=%d lambda_bar=%.6g A_bar diag=%s", spec.eta, resolution,
             pair.lambda_bar, np.round(np.diag(tensor.A_bar), 6))
    return CellData(pair, corr, tensor, pot)
