"""Linear solves and generalized symmetric eigenproblems.

Eigenpairs come from shift-invert Lanczos (ARPACK via scipy) followed by a
Rayleigh-Ritz clean-up.  The inner solves use a sparse LU factorization on
small systems and algebraic-multigrid preconditioned CG on large ones.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import OracleTooLarge, RankExceeded, SolverStalled
from .grid import Grid

log = logging.getLogger(__name__)

LINEAR_TOL = 1e-10
EIGEN_TOL = 1e-8
LU_LIMIT = 8_000


def _as_matrix(A):
    return A.matrix if hasattr(A, "matrix") else A


def _as_diag(B, n):
    if B is None:
        return np.ones(n)
    if sp.issparse(B):
        return B.diagonal()
    B = np.asarray(B, dtype=float)
    if B.ndim == 2:
        return np.diag(B).copy()
    return B


def cg_solve(A, b, tol: float = LINEAR_TOL, max_iter: int | None = None, constraint=None,
             preconditioner=None, x0=None) -> np.ndarray:
    """Preconditioned CG (Jacobi by default).

    With ``constraint`` (a weight vector c) the matrix is taken to be
    singular with the constants as kernel: ``b`` must sum to zero, iterates
    are projected, and the returned solution satisfies ``c @ x == 0``.
    """
    A = _as_matrix(A)
    b = np.asarray(b, dtype=float)
    n = b.size
    max_iter = max_iter or 20 * n + 100
    projected = constraint is not None
    if projected:
        c = np.asarray(constraint, dtype=float)
        if abs(b.sum()) > 1e-9 * max(np.abs(b).sum(), 1e-300):
            raise ValueError("right-hand side is not orthogonal to the constants")
        b = b - b.mean()

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    if isinstance(preconditioner, str) and preconditioner == "amg":
        preconditioner = amg_preconditioner(A)
    if preconditioner is None:
        dinv = 1.0 / A.diagonal()
        precond = lambda r: dinv * r  # noqa: E731
    elif isinstance(preconditioner, spla.LinearOperator):
        precond = preconditioner.matvec
    elif callable(preconditioner):
        precond = preconditioner
    else:
        precond = lambda r: preconditioner @ r  # noqa: E731

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    z = precond(r)
    if projected:
        z -= z.mean()
    p = z.copy()
    rz = r @ z
    history = [np.linalg.norm(r) / bnorm]
    for _ in range(max_iter):
        if history[-1] <= tol:
            break
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if projected:
            r -= r.mean()
        history.append(np.linalg.norm(r) / bnorm)
        z = precond(r)
        if projected:
            z -= z.mean()
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    # recompute the true residual to guard against drift
    true = np.linalg.norm(b - A @ x) / bnorm
    if true > tol * 10 and history[-1] > tol:
        raise SolverStalled(f"CG stalled at relative residual {true:.2e}", history)
    if projected:
        x -= (c @ x) / c.sum()
    return x


def amg_preconditioner(A):
    import pyamg

    # pyamg estimates spectral radii from np.random start vectors; pin them so
    # that reruns are bit-identical, and leave the caller's global state alone
    state = np.random.get_state()
    np.random.seed(0)
    try:
        ml = pyamg.smoothed_aggregation_solver(sp.csr_matrix(A), max_coarse=500)
    finally:
        np.random.set_state(state)
    return ml.aspreconditioner(cycle="V")


def spd_solver(A, tol: float = 1e-12):
    """Return a callable b -> A^{-1} b for a sparse SPD matrix."""
    A = sp.csc_matrix(_as_matrix(A))
    n = A.shape[0]
    if n <= LU_LIMIT:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
        return lu.solve
    M = amg_preconditioner(A)

    def solve(b):
        x, info = spla.cg(A, b, rtol=tol, atol=0.0, M=M, maxiter=2000)
        if info != 0:
            raise SolverStalled(f"AMG-CG inner solve failed (info={info})")
        return x

    return solve


@dataclass
class EigenSolution:
    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    b_orthonormal: bool
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.values.size


def _fix_signs(V):
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def finalize_pairs(A, bdiag, vals, vecs, tol, check=True):
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    vecs = _fix_signs(vecs)
    vecs = vecs / np.sqrt(np.sum(bdiag[:, None] * vecs * vecs, axis=0))[None, :]
    R = A @ vecs - (bdiag[:, None] * vecs) * vals[None, :]
    # ||Ax - mu Bx|| / ||Bx||, relative to max(|mu|, 1)
    res = np.linalg.norm(R, axis=0)
    bx = np.linalg.norm(bdiag[:, None] * vecs, axis=0)
    rel = res / (np.maximum(np.abs(vals), 1.0) * bx)
    gram = vecs.T @ (bdiag[:, None] * vecs)
    ortho = bool(np.max(np.abs(gram - np.eye(vals.size))) <= 1e-8)
    if check and np.any(rel > tol):
        raise SolverStalled(f"eigen residuals {rel.max():.2e} exceed tolerance {tol:.1e}")
    return EigenSolution(vals, vecs, rel, ortho)


def dense_eig_oracle(A, B=None, count: int | None = None) -> EigenSolution:
    """Lowest ``count`` pairs (default all) by dense symmetric-definite reduction (test oracle)."""
    A = _as_matrix(A)
    n = A.shape[0]
    if n > 4096:
        raise OracleTooLarge(f"dense oracle limited to 4096 unknowns, got {n}")
    count = n if count is None else min(int(count), n)
    Ad = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    bdiag = _as_diag(B, n)
    if bdiag.min() < 1e-8 * bdiag.max():
        # Cholesky of a badly conditioned B loses ~cond(B) eps; if A is
        # definite, solve the reciprocal pencil B x = (1/mu) A x instead
        try:
            nu, vecs = sla.eigh(np.diag(bdiag), Ad, subset_by_index=[n - count, n - 1])
            vals = 1.0 / nu[::-1]
            return finalize_pairs(Ad, bdiag, vals, vecs[:, ::-1], tol=1e-8, check=False)
        except np.linalg.LinAlgError:
            pass
    vals, vecs = sla.eigh(Ad, np.diag(bdiag), subset_by_index=[0, count - 1])
    return finalize_pairs(Ad, bdiag, vals, vecs, tol=1e-8, check=False)


def rayleigh_ritz(A, bdiag, V):
    """Ritz values and B-orthonormal Ritz vectors of the pencil in span(V)."""
    Q, _ = np.linalg.qr(V)
    Ar = Q.T @ (A @ Q)
    Br = Q.T @ (bdiag[:, None] * Q)
    rv, rw = sla.eigh(0.5 * (Ar + Ar.T), 0.5 * (Br + Br.T))
    return rv, Q @ rw


def smallest_eigenpairs(A, B=None, K: int = 1, tol: float = EIGEN_TOL, sigma: float = 0.0,
                        method: str = "auto") -> EigenSolution:
    """K smallest eigenpairs of A x = mu B x with B diagonal and positive.

    ``sigma`` is the shift of the inversion; it must lie below the spectrum
    (use a negative value for singular A).
    """
    A = sp.csr_matrix(_as_matrix(A))
    n = A.shape[0]
    if K > n:
        raise RankExceeded(f"requested {K} eigenpairs of a {n}-dimensional problem")
    bdiag = _as_diag(B, n)
    if np.any(bdiag <= 0):
        raise ValueError("mass matrix must be strictly positive")
    if method == "auto":
        if n <= 3 * K + 20:
            method = "dense"
        elif n > LU_LIMIT:
            method = "lobpcg"
        else:
            method = "shift-invert"
    if method == "dense":
        sol = dense_eig_oracle(A, bdiag)
        return finalize_pairs(A, bdiag, sol.values[:K], sol.vectors[:, :K], tol)

    m = min(n - 1, K + max(4, K // 2))
    if method == "lobpcg":
        try:
            return _lobpcg(A, bdiag, K, K, tol, sigma)
        except SolverStalled as exc:
            log.info("LOBPCG fell back to shift-invert: %s", exc)
    shifted = (A - sigma * sp.diags(bdiag)).tocsc()
    solve = spd_solver(shifted)
    op = spla.LinearOperator((n, n), matvec=solve, dtype=float)
    ncv = min(n, max(2 * m + 1, m + 20))
    rng = np.random.default_rng(0)
    v0 = rng.standard_normal(n)
    try:
        vals, vecs = spla.eigsh(A, k=m, M=sp.diags(bdiag).tocsc(), sigma=sigma, which="LM",
                                OPinv=op, tol=1e-13, ncv=ncv, v0=v0, maxiter=20 * n)
    except spla.ArpackNoConvergence as exc:
        raise SolverStalled(f"ARPACK did not converge: {exc}") from exc
    # Rayleigh-Ritz in the returned subspace
    Q, _ = np.linalg.qr(vecs)
    Ar = Q.T @ (A @ Q)
    Br = Q.T @ (bdiag[:, None] * Q)
    rv, rw = sla.eigh(0.5 * (Ar + Ar.T), 0.5 * (Br + Br.T))
    vecs = Q @ rw[:, :K]
    return finalize_pairs(A, bdiag, rv[:K], vecs, tol)


def _lobpcg(A, bdiag, K, m, tol, sigma, rounds: int = 40, chunk: int = 25):
    # Block preconditioned eigensolver with AMG on the shifted operator.  The
    # pencil is scaled to unit mass; short restarts stop as soon as the first K
    # pairs meet the tolerance (padding vectors may straddle a cluster and
    # converge slowly, which we do not wait for).
    n = A.shape[0]
    scale = bdiag.mean()
    As = A / scale
    bs = bdiag / scale
    M = amg_preconditioner((As - sigma * sp.diags(bs)).tocsr())
    Bm = sp.diags(bs)
    X = np.random.default_rng(0).standard_normal((n, m))
    for _ in range(rounds):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, X = spla.lobpcg(As, X, B=Bm, M=M, tol=0.1 * tol, largest=False, maxiter=chunk)
        Q, _ = np.linalg.qr(X)
        Ar = Q.T @ (As @ Q)
        Br = Q.T @ (bs[:, None] * Q)
        rv, rw = sla.eigh(0.5 * (Ar + Ar.T), 0.5 * (Br + Br.T))
        X = Q @ rw / np.sqrt(scale)
        sol = finalize_pairs(A, bdiag, rv[:K], X[:, :K], tol, check=False)
        if np.all(sol.residuals <= tol):
            return finalize_pairs(A, bdiag, rv[:K], X[:, :K], tol)
    raise SolverStalled(f"LOBPCG residuals {sol.residuals.max():.2e} above {tol:.1e}")


def subspace_angle(U, V, weight=None) -> float:
    """Largest principal angle between column spaces in the weighted inner product."""
    w = np.ones(U.shape[0]) if weight is None else np.asarray(weight)
    s = np.sqrt(w)[:, None]
    return float(np.max(sla.subspace_angles(s * U, s * V)))


def discrete_symbol(grid: Grid) -> np.ndarray:
    """Eigenvalues of the periodic 2d+1 point -Laplacian on each Fourier mode."""
    sym = 0.0
    for ax, n in enumerate(grid.shape):
        k = np.fft.fftfreq(n) * n
        s = (2.0 - 2.0 * np.cos(2.0 * np.pi * k / n)) / grid.h ** 2
        shape = [1] * grid.d
        shape[ax] = n
        sym = sym + s.reshape(shape)
    return np.broadcast_to(sym, grid.shape)


def periodic_poisson(rhs: np.ndarray, grid: Grid) -> np.ndarray:
    """Mean-zero solution of -Delta_h u = rhs - mean(rhs) on a torus grid.

    The periodic 2d+1 point Laplacian is diagonal in the discrete Fourier
    basis, so the solve is exact up to round-off.
    """
    if not grid.periodic:
        raise ValueError("periodic_poisson needs a torus grid")
    rhs = np.asarray(rhs, dtype=float)
    axes = tuple(range(rhs.ndim - grid.d, rhs.ndim))
    fhat = np.fft.fftn(rhs, axes=axes)
    sym = np.array(discrete_symbol(grid), copy=True)
    zero = (0,) * grid.d
    sym[zero] = 1.0
    uhat = fhat / sym
    uhat[(Ellipsis,) + zero] = 0.0
    return np.real(np.fft.ifftn(uhat, axes=axes))


def periodic_laplacian(u: np.ndarray, grid: Grid) -> np.ndarray:
    """-Delta_h u on a torus (2d+1 point stencil)."""
    out = np.zeros_like(u)
    for ax in range(grid.d):
        a = u.ndim - grid.d + ax
        out += (2 * u - np.roll(u, 1, axis=a) - np.roll(u, -1, axis=a)) / grid.h ** 2
    return out
