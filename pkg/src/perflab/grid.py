"""Uniform cell-centered grids, finite-volume operators and field utilities.

Fields are plain numpy arrays shaped like ``grid.shape`` (scalar) or
``(d,) + grid.shape`` (vector).  Stiffness and mass matrices carry the cell
volume ``h**d`` so that ``u @ A @ u`` is the discrete energy integral.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .errors import DegenerateMass, GridMismatch, InvalidWeight, KernelUnresolved


@dataclass(frozen=True)
class Grid:
    shape: tuple
    h: float
    periodic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if min(self.shape) < 2 or self.h <= 0:
            raise ValueError("grid needs at least 2 cells per side and h > 0")

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return self.h ** self.d

    @property
    def lengths(self) -> tuple:
        return tuple(n * self.h for n in self.shape)

    def axes(self) -> list:
        return [(np.arange(n) + 0.5) * self.h for n in self.shape]

    def centers(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)


def torus(resolution: int, d: int) -> Grid:
    """Grid on the unit torus Y with ``resolution`` cells per side."""
    return Grid((resolution,) * d, 1.0 / resolution, periodic=True)


@dataclass
class WeightedOperator:
    """Sparse symmetric stiffness over the active cells of a grid."""

    matrix: sp.csr_matrix
    active: np.ndarray
    grid: Grid
    weight: np.ndarray | None = None

    def __post_init__(self):
        self.index = np.full(self.grid.shape, -1, dtype=np.int64)
        self.index[self.active] = np.arange(int(self.active.sum()))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def restrict(self, field: np.ndarray) -> np.ndarray:
        return np.asarray(field)[self.active]

    def extend(self, vec: np.ndarray, fill: float = 0.0) -> np.ndarray:
        vec = np.asarray(vec)
        out = np.full(self.grid.shape + vec.shape[1:], fill, dtype=vec.dtype)
        out[self.active] = vec
        return out

    def apply(self, field: np.ndarray) -> np.ndarray:
        return self.extend(self.matrix @ self.restrict(field))


def _shift_pairs(shape, axis, periodic):
    """Flat index pairs (a, a + e_axis) over all interior (or wrapped) faces."""
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    if periodic:
        return idx.ravel(), np.roll(idx, -1, axis=axis).ravel()
    lo = [slice(None)] * len(shape)
    hi = [slice(None)] * len(shape)
    lo[axis], hi[axis] = slice(0, -1), slice(1, None)
    return idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()


def _boundary_cells(shape, axis):
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    first = [slice(None)] * len(shape)
    last = [slice(None)] * len(shape)
    first[axis], last[axis] = 0, -1
    return idx[tuple(first)].ravel(), idx[tuple(last)].ravel()


def face_weights(weight: np.ndarray, axis: int, periodic: bool, face_mean: str = "arithmetic"):
    """Face weights between each cell and its +axis neighbour.

    Returns an array shaped like the faces produced by ``_shift_pairs``.
    ``geometric`` takes sqrt(w_a w_b); for w = phi**2 that is phi_a phi_b.
    """
    a, b = _shift_pairs(weight.shape, axis, periodic)
    wa, wb = weight.ravel()[a], weight.ravel()[b]
    if face_mean == "arithmetic":
        return 0.5 * (wa + wb)
    if face_mean == "geometric":
        return np.sqrt(wa * wb)
    raise ValueError(f"unknown face mean {face_mean!r}")


def centered_difference_matrix(grid: Grid, axis: int) -> sp.csr_matrix:
    """(u[a+e] - u[a-e]) / 2h with zero ghosts (wrap on a torus)."""
    n = grid.size
    a, b = _shift_pairs(grid.shape, axis, grid.periodic)
    rows = np.concatenate([a, b])
    cols = np.concatenate([b, a])
    vals = np.concatenate([np.full(a.size, 0.5), np.full(a.size, -0.5)]) / grid.h
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def assemble_weighted_stiffness(grid: Grid, weight=None, dirichlet=None, matrix_weight=None,
                                face_mean: str = "arithmetic", boundary_weight=None,
                                outer: str = "face") -> WeightedOperator:
    """Finite-volume stiffness for -div(w grad u) on the non-Dirichlet cells.

    Dirichlet cells carry the value 0 at their centers.  On a box grid the
    outer Dirichlet condition sits on the box faces (``outer="face"``, mirror
    ghost, coefficient 2/h) or at the centers of the ghost cells
    (``outer="cell"``).  ``boundary_weight`` overrides the weight used on
    outer faces: a dict ``{(axis, side): array}`` with side 0 (low) or 1
    (high), each array shaped like the boundary layer of cells.
    With ``matrix_weight`` (constant d x d) the face coefficients along axis
    i are ``A[i, i]`` and off-diagonal entries enter through a centered
    cross stencil.
    """
    d, shape, h = grid.d, grid.shape, grid.h
    n = grid.size
    if weight is None:
        weight = np.ones(shape)
    weight = np.asarray(weight, dtype=float)
    if weight.shape != shape:
        raise GridMismatch("weight does not match the grid")
    if np.any(weight < 0) or not np.all(np.isfinite(weight)):
        raise InvalidWeight("weight must be finite and nonnegative")
    active = np.ones(shape, dtype=bool) if dirichlet is None else ~np.asarray(dirichlet, dtype=bool)
    act = active.ravel()
    scale = h ** (d - 2)

    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    for ax in range(d):
        a, b = _shift_pairs(shape, ax, grid.periodic)
        if matrix_weight is not None:
            wf = np.full(a.size, float(matrix_weight[ax][ax]))
        else:
            wf = face_weights(weight, ax, grid.periodic, face_mean)
        wf = wf * scale
        np.add.at(diag, a, wf)
        np.add.at(diag, b, wf)
        both = act[a] & act[b]
        rows += [a[both], b[both]]
        cols += [b[both], a[both]]
        vals += [-wf[both], -wf[both]]
        if not grid.periodic:
            factor = 2.0 if outer == "face" else 1.0
            for side, cells in enumerate(_boundary_cells(shape, ax)):
                if matrix_weight is not None:
                    wb = np.full(cells.size, float(matrix_weight[ax][ax]))
                elif boundary_weight is not None and (ax, side) in boundary_weight:
                    wb = np.asarray(boundary_weight[(ax, side)], dtype=float).ravel()
                else:
                    wb = weight.ravel()[cells]
                np.add.at(diag, cells, factor * scale * wb)
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    K = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    if matrix_weight is not None:
        M = np.asarray(matrix_weight, dtype=float)
        for i, j in itertools.permutations(range(d), 2):
            if M[i, j] != 0.0:
                Di = centered_difference_matrix(grid, i)
                Dj = centered_difference_matrix(grid, j)
                # D_i D_j is symmetric because the two factors commute
                K = K - grid.cell_volume * M[i, j] * (Di @ Dj)
    sel = np.flatnonzero(act)
    K = K.tocsr()[sel][:, sel]
    K = (0.5 * (K + K.T)).tocsr()
    K.eliminate_zeros()
    return WeightedOperator(K, active, grid, weight)


def weighted_mass(grid: Grid, weight=None, active=None, floor: float = 0.0) -> np.ndarray:
    """Diagonal of the weighted mass matrix, w * h^d on the active cells.

    ``floor`` (relative to h^d) replaces zero weights; otherwise a zero
    weight on an active cell is an error.
    """
    if weight is None:
        weight = np.ones(grid.shape)
    weight = np.asarray(weight, dtype=float)
    if np.any(weight < 0):
        raise InvalidWeight("mass weight must be nonnegative")
    if active is None:
        active = np.ones(grid.shape, dtype=bool)
    w = weight[active]
    if floor > 0:
        w = np.maximum(w, floor)
    elif np.any(w <= 0):
        raise DegenerateMass(f"{int(np.sum(w <= 0))} active cells have zero mass weight")
    return w * grid.cell_volume


def gradient(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Forward differences; zero ghost beyond the last cell on a box grid."""
    out = np.empty((grid.d,) + u.shape)
    for ax in range(grid.d):
        if grid.periodic:
            nxt = np.roll(u, -1, axis=ax)
        else:
            nxt = np.zeros_like(u)
            src = [slice(None)] * grid.d
            dst = [slice(None)] * grid.d
            src[ax], dst[ax] = slice(1, None), slice(0, -1)
            nxt[tuple(dst)] = u[tuple(src)]
        out[ax] = (nxt - u) / grid.h
    return out


def divergence(v: np.ndarray, grid: Grid) -> np.ndarray:
    """Backward differences, the negative adjoint of :func:`gradient`."""
    out = np.zeros(v.shape[1:])
    for ax in range(grid.d):
        c = v[ax]
        if grid.periodic:
            prv = np.roll(c, 1, axis=ax)
        else:
            prv = np.zeros_like(c)
            src = [slice(None)] * grid.d
            dst = [slice(None)] * grid.d
            src[ax], dst[ax] = slice(0, -1), slice(1, None)
            prv[tuple(dst)] = c[tuple(src)]
        out += (c - prv) / grid.h
    return out


def centered_gradient(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Cell-centered gradient (average of the forward and backward differences)."""
    fwd = gradient(u, grid)
    out = np.empty_like(fwd)
    for ax in range(grid.d):
        if grid.periodic:
            out[ax] = 0.5 * (fwd[ax] + np.roll(fwd[ax], 1, axis=ax))
        else:
            prev = np.zeros_like(u)
            src = [slice(None)] * grid.d
            dst = [slice(None)] * grid.d
            src[ax], dst[ax] = slice(0, -1), slice(1, None)
            prev[tuple(dst)] = u[tuple(src)]
            out[ax] = 0.5 * (fwd[ax] + (u - prev) / grid.h)
    return out


def bump_kernel(grid: Grid, radius: float) -> np.ndarray:
    """Discrete (1 - r^2/R^2)^4 bump normalized to unit sum."""
    m = int(np.floor(radius / grid.h))
    if m < 2:
        raise KernelUnresolved(f"kernel radius {radius:.3g} spans fewer than 2 cells of size {grid.h:.3g}")
    offs = np.arange(-m, m + 1) * grid.h
    r2 = sum(np.meshgrid(*([offs ** 2] * grid.d), indexing="ij"))
    k = np.clip(1.0 - r2 / radius ** 2, 0.0, None) ** 4
    return k / k.sum()


def mollify(field: np.ndarray, grid: Grid, epsilon: float, c1: float, kernel=None) -> np.ndarray:
    """Discrete smoothing K_eps(f) with kernel support radius c1*eps.

    On a box the field is extended by zero outside the grid.
    """
    if kernel is None:
        kernel = bump_kernel(grid, c1 * epsilon)
    mode = "wrap" if grid.periodic else "constant"
    return ndimage.correlate(np.asarray(field, dtype=float), kernel, mode=mode, cval=0.0)


def boundary_distance(grid: Grid) -> np.ndarray:
    """Distance from each cell center to the boundary of the box."""
    if grid.periodic:
        raise ValueError("a torus has no boundary")
    dist = None
    for ax, x in enumerate(grid.axes()):
        L = grid.shape[ax] * grid.h
        dx = np.minimum(x, L - x)
        shape = [1] * grid.d
        shape[ax] = -1
        dx = dx.reshape(shape)
        dist = dx if dist is None else np.minimum(dist, dx)
    return np.broadcast_to(dist, grid.shape).copy()


def cutoff_theta(grid: Grid, epsilon: float, c1: float, c0: float | None = None) -> np.ndarray:
    """Boundary cutoff: 0 within c1*eps of the boundary, 1 beyond 2*c1*eps."""
    if c1 <= 0 or (c0 is not None and c1 > c0 / 4 + 1e-15):
        raise ValueError("c1 must lie in (0, c0/4]")
    dist = boundary_distance(grid)
    return np.clip((dist - c1 * epsilon) / (c1 * epsilon), 0.0, 1.0)


def cutoff_zeta(grid: Grid, epsilon: float, c1: float, c0: float | None = None) -> np.ndarray:
    return 1.0 - cutoff_theta(grid, epsilon, c1, c0)


def sample_periodic(cell_field: np.ndarray, pd) -> np.ndarray:
    """Replicate a field on Y over the macroscopic grid of ``pd`` (no interpolation).

    Leading axes beyond the last d are carried along (vector/tensor fields).
    """
    cell_field = np.asarray(cell_field)
    d, r = pd.grid.d, pd.resolution_per_cell
    if cell_field.shape[-d:] != (r,) * d:
        raise GridMismatch(f"cell field of shape {cell_field.shape[-d:]} does not match {r}^{d}")
    lead = (slice(None),) * (cell_field.ndim - d)
    return cell_field[lead + np.ix_(*pd.cell_index)]


def weighted_inner_product(f, g, weight=None, grid: Grid | None = None, active=None) -> float:
    h_d = 1.0 if grid is None else grid.cell_volume
    prod = np.asarray(f) * np.asarray(g)
    if weight is not None:
        prod = prod * np.asarray(weight)
    if active is not None:
        prod = prod[active]
    return float(h_d * np.sum(prod))


def write_field(path, field: np.ndarray) -> None:
    """Flat binary: int64 ndim, int64 dims, then float64 values (little endian, C order)."""
    arr = np.ascontiguousarray(field, dtype="<f8")
    with open(path, "wb") as fh:
        np.asarray([arr.ndim], dtype="<i8").tofile(fh)
        np.asarray(arr.shape, dtype="<i8").tofile(fh)
        arr.tofile(fh)


def read_field(path) -> np.ndarray:
    with open(path, "rb") as fh:
        ndim = int(np.fromfile(fh, dtype="<i8", count=1)[0])
        shape = tuple(int(n) for n in np.fromfile(fh, dtype="<i8", count=ndim))
        data = np.fromfile(fh, dtype="<f8")
    return data.reshape(shape)


def write_vtk(path, field: np.ndarray, h: float, name: str = "field") -> None:
    """Legacy ASCII VTK structured points with one cell-data scalar."""
    arr = np.asarray(field, dtype=float)
    dims = list(arr.shape) + [1] * (3 - arr.ndim)
    lines = [
        "# vtk DataFile Version 3.0",
        name,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        "DIMENSIONS " + " ".join(str(n + 1) for n in dims),
        "ORIGIN 0 0 0",
        f"SPACING {h} {h} {h}",
        f"CELL_DATA {arr.size}",
        f"SCALARS {name} double 1",
        "LOOKUP_TABLE default",
    ]
    # VTK runs x fastest
    values = arr.reshape(dims).transpose(2, 1, 0).ravel()
    lines += [" ".join(f"{v:.17g}" for v in values[i:i + 8]) for i in range(0, values.size, 8)]
    Path(path).write_text("\n".join(lines) + "\n")
