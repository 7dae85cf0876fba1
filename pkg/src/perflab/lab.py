"""Experiment orchestration: sweeps over (eps, eta, k), slope fits and reports.

Every pass/fail row carries a claim tag naming the property it tests:

    eigenvalue-rate-eps   e(eps) = |lambda - eps^-2 lambda_bar - mu| decays like eps
    eigenvalue-rate-eta   e(eta) at fixed eps decays like eta^((d-2)/2)
    band-decay-eps        band residual of rho_eps^k decreases with eps
    band-width            band residual never increases when the band widens
    identity              a discrete identity holds at two grid levels
    gap-finder            a common spectral gap exists with N1 in [k, Mk)
    minimax-upper         trial-space value bounds mu_eps^k from above
    minimax-excess        that bound tightens along the eps ladder
    almost-orthogonality  well-separated pairings shrink when eps halves
    weyl-slope            homogenized mu^j grows like j^(2/d)
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cell import CellData, compute_cell_data, weighted_corrector_residual
from .errors import BudgetExceeded, InsufficientPoints, PerflabError
from .geometry import BoxDomain, PerforationSpec, epsilon_denominator, perforate_domain
from .grid import Grid
from .spectra import (almost_orthogonality_matrix, band_projection, clusters, degenerate_spectrum,
                      direct_spectrum, factorization_mismatch, find_spectral_gap,
                      homogenized_spectrum, intermediate_spectrum, minimax_upper_test,
                      random_interior_field, reassemble, sample_phi, two_scale_identity_check,
                      weyl_slope)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epsilon", "eta", "k", "quantity", "value", "error", "slope", "pass")
CHECKS = ("rate_eigenvalue", "rate_eigenfunction", "cell_estimates", "identities", "duality",
          "gap_finder", "minimax", "almost_orthogonality", "weyl")


@dataclass
class ExperimentConfig:
    perforation: dict
    epsilons: list
    etas: list
    K: int = 3
    L: tuple = (1.0, 1.0, 1.0)
    cell_resolution: int = 8            # cells per period, shared by Y and Omega
    identity_resolutions: tuple = (24, 48)
    homogenized_levels: tuple = (24, 48)
    t_values: tuple = (0.05, 0.5)
    checks: tuple = ("rate_eigenvalue",)
    min_cells_across: float = 2.0
    budget_dofs: int = 500_000
    seed: int = 0
    csv_path: str | None = None
    json_path: str | None = None

    def __post_init__(self):
        self.epsilons = [float(e) for e in self.epsilons]
        self.etas = [float(e) for e in self.etas]
        self.L = tuple(float(x) for x in self.L)
        self.identity_resolutions = tuple(int(r) for r in self.identity_resolutions)
        self.homogenized_levels = tuple(int(n) for n in self.homogenized_levels)
        self.t_values = tuple(float(t) for t in self.t_values)
        self.checks = tuple(self.checks)
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.K <= 40:
            raise ValueError("K must lie in [1, 40]")
        unknown = set(self.checks) - set(CHECKS)
        if unknown:
            raise ValueError(f"unknown checks {sorted(unknown)}")
        if len(self.L) != int(self.perforation["d"]):
            raise ValueError("box dimension differs from the perforation dimension")
        for eps in self.epsilons:
            epsilon_denominator(eps)
            for side in self.L:
                n = side / eps * self.cell_resolution
                if abs(n - round(n)) > 1e-8:
                    raise ValueError(f"side {side} is not commensurate with eps={eps}")
        for eta in self.etas:
            self.spec(eta)
        if len(self.homogenized_levels) != 2:
            raise ValueError("homogenized_levels needs exactly two grid sizes")

    @property
    def d(self) -> int:
        return int(self.perforation["d"])

    def spec(self, eta: float) -> PerforationSpec:
        return PerforationSpec.from_dict(self.perforation).with_eta(eta)

    def box(self, eps: float) -> BoxDomain:
        return BoxDomain(self.L, eps)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("L", "identity_resolutions", "homogenized_levels", "t_values", "checks"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


@dataclass
class Row:
    epsilon: float | None
    eta: float | None
    k: int | None
    quantity: str
    value: float | None = None
    error: float | None = None
    slope: float | None = None
    passed: bool | None = None
    claim: str = ""
    note: str = ""
    runtime: float = 0.0

    def csv_fields(self) -> list:
        def num(x):
            return "" if x is None else f"{x:.10g}"
        flag = "" if self.passed is None else ("true" if self.passed else "false")
        return [num(self.epsilon), num(self.eta), "" if self.k is None else str(self.k),
                self.quantity, num(self.value), num(self.error), num(self.slope), flag]

    def to_dict(self) -> dict:
        out = {c: None for c in CSV_COLUMNS}
        out.update(epsilon=self.epsilon, eta=self.eta, k=self.k, quantity=self.quantity,
                   value=self.value, error=self.error, slope=self.slope)
        out["pass"] = self.passed
        out["claim"] = self.claim
        out["note"] = self.note
        return out


@dataclass
class RateReport:
    rows: list = field(default_factory=list)
    name: str = "report"

    def add(self, *args, **kwargs) -> Row:
        row = Row(*args, **kwargs)
        self.rows.append(row)
        return row

    def extend(self, other: "RateReport") -> "RateReport":
        self.rows.extend(other.rows)
        return self

    def claims(self) -> list:
        return [r for r in self.rows if r.passed is not None]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.claims())

    def failures(self) -> list:
        return [r for r in self.claims() if not r.passed]

    def find(self, quantity: str, **kw) -> list:
        return [r for r in self.rows if r.quantity == quantity
                and all(getattr(r, key) == val for key, val in kw.items())]

    def to_dict(self) -> dict:
        return {"name": self.name, "columns": list(CSV_COLUMNS),
                "rows": [r.to_dict() for r in self.rows]}

    @classmethod
    def from_dict(cls, data: dict) -> "RateReport":
        rep = cls(name=data.get("name", "report"))
        for r in data["rows"]:
            rep.add(r["epsilon"], r["eta"], r["k"], r["quantity"], r["value"], r["error"],
                    r["slope"], r["pass"], r.get("claim", ""), r.get("note", ""))
        return rep


class CellCache:
    """Cell data keyed by (eta, resolution); counts hits and misses."""

    def __init__(self, potentials: bool = False, min_cells_across: float = 4.0):
        self.store: dict = {}
        self.hits = 0
        self.misses = 0
        self.potentials = potentials
        self.min_cells_across = min_cells_across

    def get(self, spec: PerforationSpec, resolution: int) -> CellData:
        key = (json.dumps(spec.to_dict(), sort_keys=True), int(resolution))
        if key in self.store:
            self.hits += 1
            return self.store[key]
        self.misses += 1
        data = compute_cell_data(spec, resolution, potentials=self.potentials,
                                 min_cells_across=self.min_cells_across)
        self.store[key] = data
        return data


def fit_loglog_slope(points, min_points: int = 3):
    """Least-squares slope of log y against log x, and r^2."""
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < min_points:
        raise InsufficientPoints(f"need {min_points} points, got {len(pts)}")
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.log([p[0] for p in pts])
        y = np.log([p[1] for p in pts])
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("slope fit needs positive finite data")
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    fit = A @ np.array([slope, icpt])
    ss_res = float(np.sum((y - fit) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), float(r2)


def _richardson(coarse, fine, order: float = 2.0):
    coarse, fine = np.asarray(coarse), np.asarray(fine)
    return fine + (fine - coarse) / (2 ** order - 1)


def _cluster_closed_K(values, K: int) -> int:
    """Smallest K' >= K that does not split a cluster of the given ladder."""
    for group in clusters(values, 1e-6):
        if K - 1 in group:
            return group[-1] + 1
    return K


def homogenized_reference(A_bar, L, levels, K: int) -> tuple:
    """Two-level Richardson extrapolation of the homogenized eigenvalues.

    Returns (extrapolated, coarse, fine); the grids have levels[0] and
    levels[1] cells along the longest side, the second twice the first.
    """
    n0, n1 = levels
    if n1 != 2 * n0:
        raise ValueError("Richardson levels must differ by a factor 2")
    out = []
    for n in (n0, n1):
        h = max(L) / n
        grid = Grid(tuple(int(round(side / h)) for side in L), h)
        out.append(homogenized_spectrum(A_bar, grid, K).values[:K])
    return _richardson(out[0], out[1]), out[0], out[1]


def _check_budget(n: int, budget: int, what: str) -> None:
    if n > budget:
        raise BudgetExceeded(f"{what}: {n} unknowns exceed the budget of {budget}")


def run_eigenvalue_rate_sweep(config: ExperimentConfig, cache: CellCache | None = None,
                              eps_slope_min: float = 0.7, eta_tol: float = 0.4) -> RateReport:
    """Tabulate e = |lambda^k - eps^-2 lambda_bar - mu^k| over (eps, eta, k) and fit slopes."""
    cache = cache or CellCache(min_cells_across=config.min_cells_across)
    rep = RateReport(name="eigenvalue_rate")
    r = config.cell_resolution
    for eps in config.epsilons:
        n = int(np.prod([round(side / eps * r) for side in config.L]))
        _check_budget(n, config.budget_dofs, f"eps={eps}")
    errors: dict = {}
    for eta in config.etas:
        spec = config.spec(eta)
        cell = cache.get(spec, r)
        lam_bar = cell.pair.lambda_bar
        mu_ref, mu_c, mu_f = homogenized_reference(cell.tensor.A_bar, config.L,
                                                   config.homogenized_levels, config.K + 12)
        K_solve = _cluster_closed_K(mu_f, config.K)
        for eps in config.epsilons:
            t0 = time.perf_counter()
            tag = f"(eps={eps:.4g}, eta={eta:.3g})"
            try:
                pd = perforate_domain(config.box(eps), spec, r)
                direct = direct_spectrum(pd, K_solve)
            except PerflabError as exc:
                log.warning("%s row skipped: %s", tag, exc)
                rep.add(eps, eta, None, "direct_failed", note=str(exc))
                continue
            dt = time.perf_counter() - t0
            for k in range(1, config.K + 1):
                lam = float(direct.values[k - 1])
                e = abs(lam - lam_bar / eps ** 2 - float(mu_ref[k - 1]))
                disc = abs(float(mu_f[k - 1] - mu_ref[k - 1]))
                log.info("%s k=%d lambda=%.10g e=%.3e", tag, k, lam, e)
                rep.add(eps, eta, k, "lambda", lam, runtime=dt)
                rep.add(eps, eta, k, "eigenvalue_error", e, disc,
                        note="mu reference: Richardson over homogenized grids "
                             f"{config.homogenized_levels}")
                errors[(eta, k, eps)] = e
    _eps_slopes(rep, config, errors, eps_slope_min)
    _eta_slopes(rep, config, errors, eta_tol)
    return rep


def _eps_slopes(rep, config, errors, slope_min):
    empty = PerforationSpec.from_dict(config.perforation).empty
    for eta in config.etas:
        for k in range(1, config.K + 1):
            pts = [(eps, errors[(eta, k, eps)]) for eps in sorted(config.epsilons, reverse=True)
                   if (eta, k, eps) in errors]
            if empty:
                rep.add(None, eta, k, "eps_slope", note="degenerate: zero target")
                continue
            try:
                slope, r2 = fit_loglog_slope(pts)
            except (InsufficientPoints, ValueError) as exc:
                rep.add(None, eta, k, "eps_slope", note=str(exc))
                continue
            values = [p[1] for p in pts]
            decreasing = all(b < a for a, b in zip(values, values[1:]))
            ok = decreasing and slope >= slope_min
            note = f"r2={r2:.4f}; strictly decreasing={decreasing}; need slope >= {slope_min}"
            rep.add(None, eta, k, "eps_slope", slope, None, slope, ok, "eigenvalue-rate-eps", note)


def _eta_slopes(rep, config, errors, tol):
    target = (config.d - 2) / 2
    if PerforationSpec.from_dict(config.perforation).empty:
        return
    for eps in config.epsilons:
        for k in range(1, config.K + 1):
            pts = [(eta, errors[(eta, k, eps)]) for eta in sorted(config.etas)
                   if (eta, k, eps) in errors]
            if len(pts) < 3:
                if len(pts) > 1:
                    rep.add(eps, None, k, "eta_slope", note=f"only {len(pts)} eta values; no fit")
                continue
            slope, r2 = fit_loglog_slope(pts)
            ok = abs(slope - target) <= tol
            rep.add(eps, None, k, "eta_slope", slope, None, slope, ok, "eigenvalue-rate-eta",
                    f"r2={r2:.4f}; target {target} +- {tol}")


def run_eigenfunction_sweep(config: ExperimentConfig, cache: CellCache | None = None) -> RateReport:
    """Band residuals of rho_eps^k against homogenized eigenfunctions over (eps, t)."""
    cache = cache or CellCache(min_cells_across=config.min_cells_across)
    rep = RateReport(name="eigenfunction")
    r = config.cell_resolution
    residual: dict = {}
    for eta in config.etas:
        spec = config.spec(eta)
        cell = cache.get(spec, r)
        for eps in config.epsilons:
            pd = perforate_domain(config.box(eps), spec, r)
            _check_budget(pd.grid.size, config.budget_dofs, f"eps={eps}")
            hom = homogenized_spectrum(cell.tensor.A_bar, pd.grid, config.K + 12)
            K_solve = _cluster_closed_K(hom.values, config.K)
            deg = degenerate_spectrum(pd, cell.pair, K_solve)
            phi_eps = sample_phi(pd, cell.pair)
            for k in range(1, config.K + 1):
                theta = float(hom.values[k - 1])
                for t in config.t_values:
                    res = band_projection(deg.field(k - 1), hom, theta, t, phi_eps)
                    residual[(eta, k, eps, t)] = res
                    rep.add(eps, eta, k, f"band_residual[t={t:g}]", res)
    for eta in config.etas:
        for k in range(1, config.K + 1):
            for t in config.t_values:
                vals = [residual[(eta, k, eps, t)] for eps in sorted(config.epsilons, reverse=True)]
                if len(vals) >= 3:
                    ok = all(b < a for a, b in zip(vals, vals[1:]))
                    rep.add(None, eta, k, f"band_decay[t={t:g}]", vals[-1], None, None, ok,
                            "band-decay-eps", "strictly decreasing in eps")
            ts = sorted(config.t_values)
            for eps in config.epsilons:
                vals = [residual[(eta, k, eps, t)] for t in ts]
                ok = all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
                rep.add(eps, eta, k, "band_width_monotone", vals[0] - vals[-1], None, None, ok,
                        "band-width", f"residual at t={ts[0]:g} >= residual at t={ts[-1]:g}")
    return rep


EXACT = 1e-9


def _identity_rows(config: ExperimentConfig, spec: PerforationSpec, resolution: int, eps: float):
    """All identity mismatches at one grid level, as {name: value}."""
    cell = compute_cell_data(spec, resolution, potentials=True,
                             min_cells_across=config.min_cells_across)
    pd = perforate_domain(config.box(eps), spec, resolution)
    phi_eps = sample_phi(pd, cell.pair)
    out = {}
    v = random_interior_field(pd, config.seed)
    out["two_scale_identity"] = two_scale_identity_check(pd, cell.pair, v)
    # solve a few extra pairs and keep only whole clusters; a cluster cut at
    # the end of the list has no well-defined subspace
    direct = direct_spectrum(pd, config.K + 4)
    deg = degenerate_spectrum(pd, cell.pair, config.K + 4)
    K = _cluster_closed_K(direct.values, config.K)
    if K >= config.K + 4:
        raise BudgetExceeded("eigenvalue cluster at K is wider than the extra pairs")
    lam, _ = reassemble(cell.pair.lambda_bar, eps, deg)
    out["reassembly"] = float(np.max(np.abs(lam[:K] - direct.values[:K]) / direct.values[:K]))
    out["factorization"] = float(np.max(factorization_mismatch(direct, deg, phi_eps,
                                                               cell.pair.lambda_bar, eps)[:K]))
    out["tensor_formula_gap"] = cell.tensor.gap
    pot = cell.potentials
    out["div_Psi"] = pot.residuals["div_Psi"]
    out["div_Phi"] = pot.residuals["div_Phi"]
    out["skew_Phi"] = pot.residuals["skew_Phi"]
    out["weighted_corrector"] = float(np.max(weighted_corrector_residual(cell.pair, cell.correctors)))
    out["rayleigh_lambda_bar"] = abs(cell.pair.rayleigh_quotient() - cell.pair.lambda_bar)
    out["corrector_mean"] = float(np.max(np.abs(cell.correctors.means)))
    return out


def run_identity_suite(config: ExperimentConfig, eps: float | None = None,
                       ratio_min: float = 1.5, no_hole_tol: float = 1e-12) -> RateReport:
    """Every identity at two grid levels, with refinement ratios; plus no-hole rows."""
    rep = RateReport(name="identities")
    eps = config.epsilons[0] if eps is None else eps
    r0, r1 = config.identity_resolutions
    for eta in config.etas:
        spec = config.spec(eta)
        coarse = _identity_rows(config, spec, r0, eps)
        fine = _identity_rows(config, spec, r1, eps)
        for name in coarse:
            a, b = coarse[name], fine[name]
            rep.add(eps, eta, None, f"{name}[r={r0}]", a)
            rep.add(eps, eta, None, f"{name}[r={r1}]", b)
            if max(a, b) <= EXACT:
                ok, note, ratio = True, "exact at both levels", None
            else:
                ratio = a / b if b > 0 else float("inf")
                ok = ratio >= ratio_min
                note = f"refinement ratio {ratio:.3g}, need >= {ratio_min}"
            rep.add(eps, eta, None, f"{name}:refinement", ratio, b, None, ok, "identity", note)
    empty = PerforationSpec(config.d, (), 1.0, PerforationSpec.from_dict(config.perforation).c0)
    rows = _identity_rows(config, empty, r0, eps)
    for name, val in rows.items():
        rep.add(eps, None, None, f"{name}:no_holes", val, None, None, val <= no_hole_tol, "identity",
                f"exact to {no_hole_tol:g}")
    return rep


def export_report(report: RateReport, path, fmt: str = "csv") -> Path:
    """Write the report as CSV (fixed columns) or JSON; output is deterministic."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in report.rows:
            writer.writerow(row.csv_fields())
        path.write_text(buf.getvalue())
    elif fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return path


def read_report(path) -> RateReport:
    return RateReport.from_dict(json.loads(Path(path).read_text()))


def run_config(config: ExperimentConfig) -> RateReport:
    """Run every enabled check of a config into one report."""
    rep = RateReport(name="sweep")
    cache = CellCache(min_cells_across=config.min_cells_across)
    if "identities" in config.checks:
        rep.extend(run_identity_suite(config))
    if "rate_eigenvalue" in config.checks:
        rep.extend(run_eigenvalue_rate_sweep(config, cache))
    if "rate_eigenfunction" in config.checks:
        rep.extend(run_eigenfunction_sweep(config, cache))
    if "cell_estimates" in config.checks:
        rep.extend(run_cell_estimates(config))
    if "duality" in config.checks:
        rep.extend(run_duality(config, cache))
    if "gap_finder" in config.checks:
        rep.extend(run_gap_finder(config, cache))
    if "minimax" in config.checks:
        rep.extend(run_minimax(config, cache))
    if "almost_orthogonality" in config.checks:
        rep.extend(run_almost_orthogonality(config, cache))
    if "weyl" in config.checks:
        rep.extend(run_weyl(config, cache))
    return rep


def run_cell_estimates(config: ExperimentConfig) -> RateReport:
    """Pointwise-estimate ratios at two cell resolutions."""
    from .cell import verify_cell_estimates

    rep = RateReport(name="cell_estimates")
    r0, r1 = config.identity_resolutions
    for eta in config.etas:
        spec = config.spec(eta)
        reports = []
        for r in (r0, r1):
            cell = compute_cell_data(spec, r, min_cells_across=config.min_cells_across)
            est = verify_cell_estimates(cell.pair, cell.correctors)
            reports.append(est)
            rep.add(None, eta, None, f"degeneracy_ratio[r={r}]", est.degeneracy[1] / est.degeneracy[0])
            rep.add(None, eta, None, f"interior_max[r={r}]", est.interior[1])
            rep.add(None, eta, None, f"corrector_max[r={r}]", est.corrector[1])
        ok = reports[1].bounded and reports[1].stable_against(reports[0])
        rep.add(None, eta, None, "cell_estimates", None, None, None, ok, "cell-estimates",
                "bounded by the cap and stable within 20% under refinement")
    return rep


def run_duality(config: ExperimentConfig, cache: CellCache | None = None,
                slope_min: float = 0.8) -> RateReport:
    """<(T_eps - T_eta) f, g>_{phi^2} over eps for smooth f, g."""
    from .spectra import duality_pairing

    cache = cache or CellCache(min_cells_across=config.min_cells_across)
    rep = RateReport(name="duality")
    r = config.cell_resolution

    def f(*x):
        return np.prod([np.sin(np.pi * xi / side) for xi, side in zip(x, config.L)], axis=0)

    def g(*x):
        return 1.0 + 0.0 * x[0]

    for eta in config.etas:
        cell = cache.get(config.spec(eta), r)
        pts = []
        for eps in sorted(config.epsilons, reverse=True):
            pd = perforate_domain(config.box(eps), config.spec(eta), r)
            _check_budget(pd.grid.size, config.budget_dofs, f"eps={eps}")
            val = duality_pairing(f, g, pd, cell)
            rep.add(eps, eta, None, "duality_pairing", val)
            pts.append((eps, abs(val)))
        if len(pts) >= 3 and all(p[1] > 0 for p in pts):
            slope, r2 = fit_loglog_slope(pts)
            rep.add(None, eta, None, "duality_slope", slope, None, slope, slope >= slope_min,
                    "duality-rate-eps", f"need slope >= {slope_min}")
    return rep


def _pair_setup(config, cache, eta, eps, extra: int = 12):
    spec = config.spec(eta)
    cell = cache.get(spec, config.cell_resolution)
    pd = perforate_domain(config.box(eps), spec, config.cell_resolution)
    _check_budget(pd.grid.size, config.budget_dofs, f"eps={eps}")
    hom = homogenized_spectrum(cell.tensor.A_bar, pd.grid, config.K + extra)
    return cell, pd, hom


def run_gap_finder(config: ExperimentConfig, cache: CellCache | None = None, ks=(1, 2),
                   M: int = 8, eps: float | None = None) -> RateReport:
    """Common gaps of the degenerate, intermediate and homogenized spectra at one eps."""
    cache = cache or CellCache(min_cells_across=config.min_cells_across)
    rep = RateReport(name="gap_finder")
    eps = sorted(config.epsilons)[len(config.epsilons) // 2] if eps is None else eps
    need = M * max(ks) + 1
    for eta in config.etas:
        spec = config.spec(eta)
        cell = cache.get(spec, config.cell_resolution)
        pd = perforate_domain(config.box(eps), spec, config.cell_resolution)
        _check_budget(pd.grid.size, config.budget_dofs, f"eps={eps}")
        phi_eps = sample_phi(pd, cell.pair)
        lists = [degenerate_spectrum(pd, cell.pair, need).values,
                 intermediate_spectrum(cell.tensor.A_bar, phi_eps, pd.grid, need).values,
                 homogenized_spectrum(cell.tensor.A_bar, pd.grid, need).values]
        for k in ks:
            gap = find_spectral_gap(k, lists, M)
            ok = gap.H > 0 and k <= gap.N1 < M * k
            rep.add(eps, eta, k, "gap_N1", gap.N1)
            rep.add(eps, eta, k, "gap_H", gap.H, None, None, ok, "gap-finder",
                    f"N1={gap.N1}; need H > 0 and N1 in [{k}, {M * k})")
    return rep


def run_minimax(config: ExperimentConfig, cache: CellCache | None = None,
                tol: float = 1e-6) -> RateReport:
    """Trial-space Rayleigh bound against mu_eps^k over the eps ladder."""
    cache = cache or CellCache(min_cells_across=config.min_cells_across)
    rep = RateReport(name="minimax")
    for eta in config.etas:
        excess: dict = {}
        for eps in sorted(config.epsilons, reverse=True):
            cell, pd, hom = _pair_setup(config, cache, eta, eps)
            deg = degenerate_spectrum(pd, cell.pair, _cluster_closed_K(hom.values, config.K))
            for k in range(1, config.K + 1):
                val = minimax_upper_test(k, cell, hom, pd)
                mu = float(deg.values[k - 1])
                excess[(k, eps)] = val - mu
                rep.add(eps, eta, k, "minimax_value", val, val - mu, None, val >= mu - tol,
                        "minimax-upper", f"mu_eps={mu:.10g}; need value >= mu_eps - {tol:g}")
        ladder = sorted(config.epsilons, reverse=True)
        if len(ladder) >= 2:
            for k in range(1, config.K + 1):
                vals = [excess[(k, e)] for e in ladder]
                ok = all(b < a for a, b in zip(vals, vals[1:]))
                rep.add(None, eta, k, "minimax_excess", vals[-1], None, None, ok, "minimax-excess",
                        "excess strictly decreasing along the eps ladder")
    return rep


def _bands(values, gap: float) -> list:
    """Chains of eigenvalues whose consecutive differences are below ``gap``."""
    out, cur = [], [0]
    for i in range(1, len(values)):
        if values[i] - values[i - 1] < gap:
            cur.append(i)
        else:
            out.append(tuple(cur))
            cur = [i]
    out.append(tuple(cur))
    return out


def run_almost_orthogonality(config: ExperimentConfig, cache: CellCache | None = None,
                             min_sep: float = 1.0, factor: float = 0.5,
                             floor: float = 1e-10) -> RateReport:
    """Pairings <rho_eps^j, rho_eta^l>_{phi^2} at the two finest eps.

    Eigenvalues closer than ``min_sep`` are grouped into bands on each side,
    since individual vectors inside a band rotate as eps changes; the
    Frobenius norm of each (degenerate band, homogenized band) block is the
    rotation-invariant pairing magnitude. A block is tested when its
    separation is at least ``min_sep`` at both levels, and must shrink by
    ``factor`` when eps halves. Blocks below ``floor`` at both levels vanish
    by symmetry and are only counted.
    """
    cache = cache or CellCache(min_cells_across=config.min_cells_across)
    rep = RateReport(name="almost_orthogonality")
    coarse_eps, fine_eps = sorted(config.epsilons, reverse=True)[-2:]
    for eta in config.etas:
        levels = {}
        for eps in (coarse_eps, fine_eps):
            cell, pd, hom = _pair_setup(config, cache, eta, eps)
            Ke = _cluster_closed_K(hom.values, config.K)
            deg = degenerate_spectrum(pd, cell.pair, Ke)
            hom = homogenized_spectrum(cell.tensor.A_bar, pd.grid, Ke)
            P = almost_orthogonality_matrix(deg, hom, sample_phi(pd, cell.pair))
            blocks = {}
            for A in _bands(deg.values, min_sep):
                for B in _bands(hom.values, min_sep):
                    blk = np.ix_(A, B)
                    blocks[(A, B)] = (float(np.linalg.norm(P.values[blk])),
                                      float(P.separation[blk].min()))
            levels[eps] = blocks
        tested = zeros = 0
        for (A, B), (m0, s0) in levels[coarse_eps].items():
            if (A, B) not in levels[fine_eps]:
                continue
            m1, s1 = levels[fine_eps][(A, B)]
            if min(s0, s1) < min_sep:
                continue
            if max(m0, m1) <= floor:
                zeros += 1
                continue
            tested += 1
            ratio = m1 / m0 if m0 > 0 else float("inf")
            rep.add(fine_eps, eta, A[0] + 1, f"pairing[j={A[0] + 1}..{A[-1] + 1};l={B[0] + 1}..{B[-1] + 1}]",
                    m1, m0, None, m1 <= factor * m0, "almost-orthogonality",
                    f"ratio {ratio:.3g}, need <= {factor}; separation {min(s0, s1):.3g}")
        rep.add(None, eta, None, "blocks_tested", tested)
        rep.add(None, eta, None, "blocks_zero_by_symmetry", zeros, note=f"below {floor:g} at both levels")
    return rep


def run_weyl(config: ExperimentConfig, cache: CellCache | None = None, n: int = 24,
             jmin: int = 4, jmax: int = 30, tol: float = 0.25) -> RateReport:
    """Weyl slope of the homogenized spectrum on a grid with n cells along the longest side."""
    cache = cache or CellCache(min_cells_across=config.min_cells_across)
    rep = RateReport(name="weyl")
    h = max(config.L) / n
    grid = Grid(tuple(int(round(side / h)) for side in config.L), h)
    target = 2 / config.d
    for eta in config.etas:
        cell = cache.get(config.spec(eta), config.cell_resolution)
        slope = weyl_slope(homogenized_spectrum(cell.tensor.A_bar, grid, jmax).values, jmin, jmax)
        rep.add(None, eta, None, "weyl_slope", slope, None, slope, abs(slope - target) <= tol,
                "weyl-slope", f"target {target:.4g} +- {tol}; j in [{jmin}, {jmax}]")
    return rep
