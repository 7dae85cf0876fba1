"""Eigenvalue problems on the perforated box and their comparison tools.

Four pencils share one macroscopic grid:

* direct        -Lap psi = lambda psi on the fluid cells, Dirichlet on holes and box;
* degenerate    -div(phi_eps^2 grad rho) = mu phi_eps^2 rho on the fluid cells;
* intermediate  -div(A_bar grad rho) = mu phi_eps^2 rho on the whole box;
* homogenized   -div(A_bar grad rho) = mu rho on the whole box.

The degenerate stiffness uses the face weight phi_a phi_b, and on the box
faces phi_a (phi_a + phi_c) / 2 with phi_c the periodic neighbour beyond the
box.  With these weights the discrete direct and degenerate pencils are
related exactly by lambda = eps^-2 lambda_bar + mu and psi = phi_eps rho.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cell import CellData, CellEigenpair
from .errors import (DegenerateMass, EmptyBand, GridMismatch, ListTooShort,
                     RankDeficientTrialSpace)
from .geometry import PerforatedDomain
from .grid import (Grid, WeightedOperator, assemble_weighted_stiffness, cutoff_theta, mollify,
                   sample_periodic, write_field)
from .solver import (EIGEN_TOL, finalize_pairs, rayleigh_ritz, smallest_eigenpairs, spd_solver,
                     subspace_angle)

log = logging.getLogger(__name__)

PROBLEMS = ("direct", "degenerate", "intermediate", "homogenized")
MASS_FLOOR = 1e-12
DEFAULT_M = 8


@dataclass
class SpectralSet:
    problem: str
    values: np.ndarray
    vectors: np.ndarray          # (n_active, K)
    active: np.ndarray           # mask on the grid
    grid: Grid
    mass: np.ndarray             # diagonal of the mass matrix on the active cells
    weighted: bool               # phi^2-weighted inner product or plain
    residuals: np.ndarray = field(default_factory=lambda: np.empty(0))
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}")

    def __len__(self):
        return int(self.values.size)

    def field(self, k: int) -> np.ndarray:
        """k-th eigenfunction (0-based) on the full grid, zero off the active set."""
        out = np.zeros(self.grid.shape)
        out[self.active] = self.vectors[:, k]
        return out

    def fields(self, ks=None) -> np.ndarray:
        ks = range(len(self)) if ks is None else ks
        return np.stack([self.field(k) for k in ks])

    def gram(self) -> np.ndarray:
        return self.vectors.T @ (self.mass[:, None] * self.vectors)

    def orthonormality_error(self) -> float:
        return float(np.max(np.abs(self.gram() - np.eye(len(self)))))

    def export(self, directory) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"problem": self.problem, "eigenvalues": self.values.tolist(),
                "weighted": self.weighted, "shape": list(self.grid.shape), "h": self.grid.h,
                "residuals": self.residuals.tolist()}
        (out / f"{self.problem}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        write_field(out / f"{self.problem}_functions.bin", self.fields())
        return out


def _spectral_set(problem, op: WeightedOperator, mass, K, tol, weighted, sigma=0.0, meta=None,
                  method="auto"):
    sol = smallest_eigenpairs(op.matrix, mass, K=K, tol=tol, sigma=sigma, method=method)
    return SpectralSet(problem, sol.values, sol.vectors, op.active, op.grid, mass, weighted,
                       sol.residuals, dict(meta or {}))


def direct_stiffness(pd: PerforatedDomain) -> WeightedOperator:
    return assemble_weighted_stiffness(pd.grid, dirichlet=pd.holes)


def direct_spectrum(pd: PerforatedDomain, K: int, tol: float = EIGEN_TOL) -> SpectralSet:
    """K smallest Dirichlet eigenpairs of -Lap on the perforated box."""
    if not pd.fluid.any():
        raise ValueError("no fluid cells")
    op = direct_stiffness(pd)
    mass = np.full(op.n, pd.grid.cell_volume)
    return _spectral_set("direct", op, mass, K, tol, weighted=False)


def sample_phi(pd: PerforatedDomain, cell: CellEigenpair | np.ndarray) -> np.ndarray:
    """phi(x/eps) on the macroscopic grid."""
    phi = cell.phi if isinstance(cell, CellEigenpair) else np.asarray(cell)
    if phi.shape == pd.grid.shape:
        return phi
    return sample_periodic(phi, pd)


def _box_face_weights(phi_eps: np.ndarray) -> dict:
    # phi_c beyond the box is the periodic continuation; the macro grid holds a
    # whole number of periods, so it is the value on the opposite side.
    out = {}
    for ax in range(phi_eps.ndim):
        for side, (inside, beyond) in enumerate(((0, -1), (-1, 0))):
            a = np.take(phi_eps, inside, axis=ax)
            c = np.take(phi_eps, beyond, axis=ax)
            out[(ax, side)] = 0.5 * a * (a + c)
    return out


def degenerate_stiffness(pd: PerforatedDomain, phi_eps: np.ndarray) -> WeightedOperator:
    active = phi_eps > 0
    return assemble_weighted_stiffness(pd.grid, weight=phi_eps ** 2, dirichlet=~active,
                                       face_mean="geometric",
                                       boundary_weight=_box_face_weights(phi_eps))


def degenerate_spectrum(pd: PerforatedDomain, phi, K: int, tol: float = EIGEN_TOL) -> SpectralSet:
    """K smallest pairs of -div(phi^2 grad rho) = mu phi^2 rho, phi^2-orthonormal."""
    phi_eps = sample_phi(pd, phi)
    if phi_eps.shape != pd.grid.shape:
        raise GridMismatch("phi does not match the domain grid")
    active = phi_eps > 0
    if np.any(active & pd.holes):
        raise DegenerateMass("phi is positive on a hole cell")
    if np.any(pd.fluid & ~active):
        raise DegenerateMass("an active fluid cell has zero weight")
    op = degenerate_stiffness(pd, phi_eps)
    mass = phi_eps[active] ** 2 * pd.grid.cell_volume
    return _spectral_set("degenerate", op, mass, K, tol, weighted=True)


def homogenized_stiffness(A_bar, grid: Grid) -> WeightedOperator:
    return assemble_weighted_stiffness(grid, matrix_weight=np.asarray(A_bar, dtype=float))


def intermediate_spectrum(A_bar, phi_eps: np.ndarray, grid: Grid, K: int, tol: float = EIGEN_TOL,
                          floor: float = MASS_FLOOR) -> SpectralSet:
    """K smallest pairs of -div(A grad rho) = mu phi^2 rho on the whole box.

    Hole cells keep their stiffness and get the mass ``floor * h^d``.
    """
    phi_eps = np.asarray(phi_eps)
    if phi_eps.shape != grid.shape:
        raise GridMismatch("phi does not match the grid")
    op = homogenized_stiffness(A_bar, grid)
    mass = np.maximum(phi_eps.ravel() ** 2, floor) * grid.cell_volume
    # the floored mass is nearly singular, which block methods handle poorly
    method = "auto" if op.n <= 3 * K + 20 else "shift-invert"
    sol = smallest_eigenpairs(op.matrix, mass, K=K, tol=np.inf, method=method)
    floored = phi_eps.ravel() ** 2 < floor
    vals, vecs = sol.values, sol.vectors
    if floored.any() and floored.size > 3 * K + 20:
        vals, vecs = _polish_floored(op.matrix, mass, vals, vecs, floored)
    sol = finalize_pairs(op.matrix, mass, vals, vecs, tol)
    return SpectralSet("intermediate", sol.values, sol.vectors, op.active, grid, mass, True,
                       sol.residuals, {"floor": floor})


def _polish_floored(A, mass, vals, vecs, floored):
    # Rows with the tiny floor mass are nearly algebraic constraints; re-solve
    # them exactly for each vector, then redo Rayleigh-Ritz.
    A = sp.csr_matrix(A)
    f, c = np.flatnonzero(floored), np.flatnonzero(~floored)
    Aff = A[f][:, f]
    Afc = A[f][:, c]
    out = vecs.copy()
    for k, mu in enumerate(vals):
        lhs = (Aff - mu * sp.diags(mass[f])).tocsc()
        out[f, k] = spla.spsolve(lhs, -(Afc @ vecs[c, k]))
    rv, V = rayleigh_ritz(A, mass, out)
    return rv, V


def homogenized_spectrum(A_bar, grid: Grid, K: int, tol: float = EIGEN_TOL) -> SpectralSet:
    op = homogenized_stiffness(A_bar, grid)
    mass = np.full(op.n, grid.cell_volume)
    return _spectral_set("homogenized", op, mass, K, tol, weighted=False)


def homogenized_exact(A_bar, lengths, K: int, nmax: int = 12) -> np.ndarray:
    """Separable Dirichlet eigenvalues of a box for a diagonal A_bar (continuum)."""
    A = np.asarray(A_bar, dtype=float)
    if np.max(np.abs(A - np.diag(np.diag(A)))) > 1e-12:
        raise ValueError("separable formula needs a diagonal tensor")
    d = A.shape[0]
    ks = np.arange(1, nmax + 1)
    grids = np.meshgrid(*([ks] * d), indexing="ij")
    vals = sum(A[i, i] * (np.pi * grids[i] / lengths[i]) ** 2 for i in range(d))
    return np.sort(vals.ravel())[:K]


def homogenized_box_discrete(A_bar, grid: Grid, K: int) -> np.ndarray:
    """Eigenvalues of the discrete homogenized pencil for diagonal A_bar, in closed form.

    The face-centred mirror-ghost stencil is separable; each 1D factor is a
    small tridiagonal matrix.
    """
    A = np.asarray(A_bar, dtype=float)
    if np.max(np.abs(A - np.diag(np.diag(A)))) > 1e-12:
        raise ValueError("closed form needs a diagonal tensor")
    per_axis = []
    for ax, n in enumerate(grid.shape):
        main = np.full(n, 2.0)
        main[0] = main[-1] = 3.0
        ev = sla.eigh_tridiagonal(main, -np.ones(n - 1), eigvals_only=True,
                                  select="i", select_range=(0, min(n, K + 2) - 1))
        per_axis.append(A[ax, ax] * ev / grid.h ** 2)
    grids = np.meshgrid(*per_axis, indexing="ij")
    return np.sort(sum(grids).ravel())[:K]


def reassemble(lambda_bar: float, epsilon: float, degenerate: SpectralSet, phi_eps=None):
    """lambda^k = eps^-2 lambda_bar + mu^k and psi^k = phi_eps rho^k (plain L2 normalized)."""
    values = np.asarray(degenerate.values) * 1.0 + lambda_bar / epsilon ** 2
    if phi_eps is None:
        return values, None
    phi_eps = np.asarray(phi_eps)
    psi = phi_eps[degenerate.active][:, None] * degenerate.vectors
    norms = np.sqrt(np.sum(psi ** 2, axis=0) * degenerate.grid.cell_volume)
    return values, psi / norms


def factorization_mismatch(direct: SpectralSet, degenerate: SpectralSet, phi_eps, lambda_bar,
                           epsilon, rtol: float = 1e-6) -> np.ndarray:
    """Per eigenvalue cluster, the largest subspace angle between psi and phi rho."""
    _, psi = reassemble(lambda_bar, epsilon, degenerate, phi_eps)
    if not np.array_equal(direct.active, degenerate.active):
        raise GridMismatch("direct and degenerate sets live on different cells")
    out = np.zeros(len(direct))
    for group in clusters(direct.values, rtol):
        angle = subspace_angle(direct.vectors[:, group], psi[:, group])
        out[group] = angle
    return out


def clusters(values, rtol: float = 1e-6) -> list:
    """Index groups of (numerically) repeated eigenvalues."""
    values = np.asarray(values)
    groups, cur = [], [0]
    for i in range(1, values.size):
        if abs(values[i] - values[cur[0]]) <= rtol * max(abs(values[cur[0]]), 1.0):
            cur.append(i)
        else:
            groups.append(cur)
            cur = [i]
    if values.size:
        groups.append(cur)
    return groups


def two_scale_identity_check(pd: PerforatedDomain, cell: CellEigenpair, v: np.ndarray) -> float:
    """Relative mismatch of |grad(phi v)|^2 = eps^-2 lambda_bar |phi v|^2 + phi^2 |grad v|^2."""
    phi_eps = sample_phi(pd, cell)
    v = np.where(pd.fluid, np.asarray(v, dtype=float), 0.0)
    eps = pd.box.epsilon
    u = phi_eps * v
    op_d = direct_stiffness(pd)
    ud = op_d.restrict(u)
    lhs = float(ud @ (op_d.matrix @ ud))
    op_w = degenerate_stiffness(pd, phi_eps)
    vw = op_w.restrict(v)
    rhs = cell.lambda_bar / eps ** 2 * float(np.sum(u ** 2) * pd.grid.cell_volume) \
        + float(vw @ (op_w.matrix @ vw))
    return abs(lhs - rhs) / max(abs(lhs), 1e-300)


def random_interior_field(pd: PerforatedDomain, seed: int = 0) -> np.ndarray:
    """Smooth-ish random field on the fluid cells, zero on Gamma."""
    rng = np.random.default_rng(seed)
    x = pd.grid.centers()
    v = np.ones(pd.grid.shape)
    for ax in range(pd.grid.d):
        L = pd.box.L[ax]
        v *= np.sin(np.pi * x[..., ax] / L)
    v *= 1.0 + 0.5 * rng.standard_normal(pd.grid.shape)
    v[pd.gamma | pd.holes] = 0.0
    return v


def _as_field(f, grid: Grid) -> np.ndarray:
    if callable(f):
        x = grid.centers()
        return np.asarray(f(*[x[..., i] for i in range(grid.d)]), dtype=float)
    f = np.asarray(f, dtype=float)
    if f.ndim == 0:
        return np.full(grid.shape, float(f))
    if f.shape != grid.shape:
        raise GridMismatch("source does not match the grid")
    return f


def resolvent_apply(problem: str, f, *, pd: PerforatedDomain | None = None, phi=None,
                    A_bar=None, grid: Grid | None = None) -> np.ndarray:
    """Solve the source problem of one of the pencils with zero Dirichlet data.

    degenerate:   -div(phi^2 grad u) = phi^2 f on the fluid cells (needs pd, phi)
    intermediate: -div(A grad u) = phi^2 f on the box (needs A_bar, phi, grid or pd)
    homogenized:  -div(A grad u) = f on the box (needs A_bar, grid or pd)
    """
    grid = grid if grid is not None else (pd.grid if pd is not None else None)
    if grid is None:
        raise ValueError("a grid or perforated domain is required")
    f = _as_field(f, grid)
    if problem == "degenerate":
        phi_eps = sample_phi(pd, phi)
        op = degenerate_stiffness(pd, phi_eps)
        rhs = op.restrict(phi_eps ** 2 * f) * grid.cell_volume
    elif problem == "intermediate":
        phi_eps = np.asarray(phi) if pd is None else sample_phi(pd, phi)
        op = homogenized_stiffness(A_bar, grid)
        rhs = (phi_eps ** 2 * f).ravel() * grid.cell_volume
    elif problem == "homogenized":
        op = homogenized_stiffness(A_bar, grid)
        rhs = f.ravel() * grid.cell_volume
    elif problem == "direct":
        op = direct_stiffness(pd)
        rhs = op.restrict(f) * grid.cell_volume
    else:
        raise ValueError(f"unknown problem {problem!r}")
    if not np.any(rhs):
        return np.zeros(grid.shape)
    return op.extend(spd_solver(op.matrix)(rhs))


def dirichlet_centered_gradient(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Centered differences with the mirror ghost -u beyond the box faces."""
    out = np.empty((grid.d,) + u.shape)
    for ax in range(grid.d):
        first = np.take(u, [0], axis=ax)
        last = np.take(u, [-1], axis=ax)
        padded = np.concatenate([-first, u, -last], axis=ax)
        n = u.shape[ax]
        out[ax] = (np.take(padded, np.arange(2, n + 2), axis=ax)
                   - np.take(padded, np.arange(0, n), axis=ax)) / (2 * grid.h)
    return out


def boundary_layer(pd: PerforatedDomain, phi_eps: np.ndarray, g: np.ndarray) -> np.ndarray:
    """v with L_{eta,eps} v = 0 on the fluid cells and v = g on the box faces.

    ``g`` is a cell field; its values on the outer layer of cells are used
    as face data (mirror ghost 2 g - v).
    """
    op = degenerate_stiffness(pd, phi_eps)
    bw = _box_face_weights(phi_eps)
    scale = 2.0 * pd.grid.h ** (pd.grid.d - 2)
    rhs_field = np.zeros(pd.grid.shape)
    for (ax, side), w in bw.items():
        idx = [slice(None)] * pd.grid.d
        idx[ax] = 0 if side == 0 else -1
        rhs_field[tuple(idx)] += scale * w * np.take(g, 0 if side == 0 else -1, axis=ax)
    rhs = op.restrict(rhs_field)
    if not np.any(rhs):
        return np.zeros(pd.grid.shape)
    return op.extend(spd_solver(op.matrix)(rhs))


@dataclass
class FirstOrderApproximation:
    u_eps: np.ndarray
    u_eta: np.ndarray
    corrector: np.ndarray
    w: np.ndarray
    v: np.ndarray | None
    norm_w: float           # ||phi_eps w||
    norm_grad_w: float      # ||phi_eps grad w||
    mollified: bool


def first_order_approximation(pd: PerforatedDomain, cell: CellData, f, mollified: bool = True,
                              c1: float | None = None) -> FirstOrderApproximation:
    """w = u_eps - u_eta - eps chi_eps K_eps(grad u_eta) theta_eps.

    With ``mollified=False`` the unsmoothed gradient is used without cutoff
    and the boundary layer v (L v = 0, v = eps chi grad u_eta on the box) is
    added back: w = u_eps - u_eta - eps chi grad u_eta + v.
    """
    grid, eps = pd.grid, pd.box.epsilon
    if cell.resolution != pd.resolution_per_cell:
        raise GridMismatch("cell data and domain use different resolutions")
    phi_eps = sample_phi(pd, cell.pair)
    u_eps = resolvent_apply("degenerate", f, pd=pd, phi=phi_eps)
    u_eta = resolvent_apply("homogenized", f, A_bar=cell.tensor.A_bar, grid=grid)
    grad = dirichlet_centered_gradient(u_eta, grid)
    chi_eps = sample_periodic(cell.correctors.chi, pd)
    v = None
    if mollified:
        c1 = cell.spec.c0 / 4 if c1 is None else c1
        theta = cutoff_theta(grid, eps, c1)
        smooth = np.stack([mollify(grad[l], grid, eps, c1) for l in range(grid.d)])
        corrector = eps * np.sum(chi_eps * smooth, axis=0) * theta
        w = u_eps - u_eta - corrector
    else:
        corrector = eps * np.sum(chi_eps * grad, axis=0)
        v = boundary_layer(pd, phi_eps, corrector)
        w = u_eps - u_eta - corrector + v
    active = phi_eps > 0
    w = np.where(active, w, 0.0)
    op = degenerate_stiffness(pd, phi_eps)
    wa = op.restrict(w)
    norm_w = float(np.sqrt(np.sum(phi_eps ** 2 * w ** 2) * grid.cell_volume))
    norm_grad = float(np.sqrt(max(wa @ (op.matrix @ wa), 0.0)))
    return FirstOrderApproximation(u_eps, u_eta, corrector, w, v, norm_w, norm_grad, mollified)


def duality_pairing(f, g, pd: PerforatedDomain, cell: CellData) -> float:
    """<(T_eps - T_eta) f, g>_{phi^2} over the fluid cells."""
    grid = pd.grid
    phi_eps = sample_phi(pd, cell.pair)
    u_eps = resolvent_apply("degenerate", f, pd=pd, phi=phi_eps)
    u_eta = resolvent_apply("homogenized", f, A_bar=cell.tensor.A_bar, grid=grid)
    gf = _as_field(g, grid)
    diff = np.where(phi_eps > 0, u_eps - u_eta, 0.0)
    return float(np.sum(phi_eps ** 2 * diff * gf) * grid.cell_volume)


@dataclass
class GapReport:
    k: int
    N1: int
    H: float
    G: float
    gaps: tuple             # per-list mu^{N1+1} - mu^{N1}
    M: int


def find_spectral_gap(k: int, lists, M: int = DEFAULT_M) -> GapReport:
    """N1 in [k, Mk) maximizing min_l mu_l^{N1+1} - max_l mu_l^{N1} (1-based indices)."""
    arrs = [np.asarray(a, dtype=float) for a in lists]
    need = M * k + 1
    if k < 1 or any(a.size < need for a in arrs):
        raise ListTooShort(f"each list needs at least {need} eigenvalues")
    stack = np.stack([a[:need] for a in arrs])
    N = np.arange(k, M * k)                      # candidate N1 (1-based)
    lower = stack[:, N - 1].max(axis=0)
    upper = stack[:, N].min(axis=0)
    H = upper - lower
    best = int(np.argmax(H))
    N1 = int(N[best])
    G = float(np.min(1.0 / stack[:, N1 - 1]) - np.max(1.0 / stack[:, N1]))
    gaps = tuple(float(a[N1] - a[N1 - 1]) for a in arrs)
    return GapReport(k, N1, float(H[best]), G, gaps, M)


def band_projection(rho, homogenized: SpectralSet, theta: float, t: float, phi_eps) -> float:
    """phi^2-weighted distance from rho to span{rho_eta^j : |mu_eta^j - theta| <= t}."""
    idx = np.flatnonzero(np.abs(homogenized.values - theta) <= t)
    if idx.size == 0:
        raise EmptyBand(f"no homogenized eigenvalue within {t} of {theta}")
    grid = homogenized.grid
    phi_eps = np.asarray(phi_eps)
    w = phi_eps ** 2 * grid.cell_volume
    rho = np.asarray(rho)
    basis = homogenized.fields(idx)
    B = basis.reshape(idx.size, -1)
    W = w.ravel()
    G = (B * W) @ B.T
    b = (B * W) @ rho.ravel()
    coef = sla.solve(G, b, assume_a="pos")
    r = rho.ravel() - coef @ B
    return float(np.sqrt(max(np.sum(W * r * r), 0.0)))


@dataclass
class PairingMatrix:
    values: np.ndarray        # <rho_eps^j, rho_eta^l>_{phi^2}
    separation: np.ndarray    # |mu_eta^l - mu_eps^j|
    rows: list                # clusters of the degenerate set
    cols: list                # clusters of the homogenized set

    def block_norms(self) -> np.ndarray:
        """Frobenius norm of each cluster block (invariant under rotations in a cluster)."""
        out = np.zeros((len(self.rows), len(self.cols)))
        for a, r in enumerate(self.rows):
            for b, c in enumerate(self.cols):
                out[a, b] = np.linalg.norm(self.values[np.ix_(r, c)])
        return out

    def block_separation(self) -> np.ndarray:
        out = np.zeros((len(self.rows), len(self.cols)))
        for a, r in enumerate(self.rows):
            for b, c in enumerate(self.cols):
                out[a, b] = self.separation[np.ix_(r, c)].min()
        return out


def almost_orthogonality_matrix(degenerate: SpectralSet, homogenized: SpectralSet, phi_eps,
                                k: int | None = None, rtol: float = 1e-6) -> PairingMatrix:
    k = min(len(degenerate), len(homogenized)) if k is None else k
    if len(degenerate) < k or len(homogenized) < k:
        raise ListTooShort("both sets need at least k eigenpairs")
    grid = homogenized.grid
    w = np.asarray(phi_eps) ** 2 * grid.cell_volume
    R = degenerate.fields(range(k)).reshape(k, -1)
    P = homogenized.fields(range(k)).reshape(k, -1)
    vals = (R * w.ravel()) @ P.T
    sep = np.abs(homogenized.values[None, :k] - degenerate.values[:k, None])
    return PairingMatrix(vals, sep, clusters(degenerate.values[:k], rtol),
                         clusters(homogenized.values[:k], rtol))


def minimax_trial_space(k: int, cell: CellData, homogenized: SpectralSet, pd: PerforatedDomain,
                        c1: float | None = None) -> np.ndarray:
    """Fields rho_eta^j + eps chi^l_eps d_l rho_eta^j theta_eps for j < k."""
    grid, eps = pd.grid, pd.box.epsilon
    c1 = cell.spec.c0 / 4 if c1 is None else c1
    theta = cutoff_theta(grid, eps, c1)
    chi_eps = sample_periodic(cell.correctors.chi, pd)
    out = []
    for j in range(k):
        rho = homogenized.field(j)
        grad = dirichlet_centered_gradient(rho, grid)
        out.append(rho + eps * np.sum(chi_eps * grad, axis=0) * theta)
    return np.stack(out)


def minimax_upper_test(k: int, cell: CellData, homogenized: SpectralSet, pd: PerforatedDomain,
                       c1: float | None = None) -> float:
    """Largest Rayleigh quotient of the degenerate pencil over the k-dim trial space."""
    if len(homogenized) < k:
        raise ListTooShort("homogenized set shorter than k")
    phi_eps = sample_phi(pd, cell.pair)
    op = degenerate_stiffness(pd, phi_eps)
    V = np.stack([op.restrict(v) for v in minimax_trial_space(k, cell, homogenized, pd, c1)], axis=1)
    mass = phi_eps[op.active] ** 2 * pd.grid.cell_volume
    Ar = V.T @ (op.matrix @ V)
    Br = V.T @ (mass[:, None] * V)
    Ar = 0.5 * (Ar + Ar.T)
    Br = 0.5 * (Br + Br.T)
    ev = np.linalg.eigvalsh(Br)
    if ev.min() <= 1e-10 * max(ev.max(), 1e-300):
        raise RankDeficientTrialSpace(f"reduced Gram matrix has condition {ev.max() / max(ev.min(), 1e-300):.2e}")
    return float(sla.eigh(Ar, Br, eigvals_only=True)[-1])


def weyl_slope(values, jmin: int = 4, jmax: int = 30) -> float:
    """Least-squares slope of log mu^j against log j over j in [jmin, jmax] (1-based)."""
    values = np.asarray(values)
    if values.size < jmax:
        raise ListTooShort(f"need {jmax} eigenvalues")
    j = np.arange(jmin, jmax + 1)
    return float(np.polyfit(np.log(j), np.log(values[j - 1]), 1)[0])

