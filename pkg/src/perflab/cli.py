"""Command-line entry point.

    perflab cell CONFIG [--eta E] [--resolution R] [--out DIR]
    perflab spectrum CONFIG [--eta E] [--epsilon EPS] [--k K] [--problem P ...] [--out DIR]
    perflab sweep CONFIG [--out FILE] [--format csv|json] [--seed S]
    perflab verify CONFIG [--out FILE] [--format csv|json]
    perflab export REPORT.json --out FILE [--format csv|json]

Exit codes: 0 success, 1 usage or configuration error, 2 invariant
violation, 3 claim failure.  Tables on stdout are comma separated.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import PerflabError

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_CLAIM = 0, 1, 2, 3

log = logging.getLogger("perflab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="perflab", description="Spectral homogenization laboratory for perforated domains")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("config", help="experiment config (JSON)")
        sp.add_argument("--eta", type=float, help="override the list of eta values with one value")
        sp.add_argument("--epsilon", type=float, action="append", help="override eps (repeatable)")
        sp.add_argument("--resolution", type=int, help="cells per period")
        sp.add_argument("--k", type=int, help="number of eigenvalues K")
        sp.add_argument("--out", help="output path")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--seed", type=int, help="random seed (default from config, else 0)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("cell", help="cell eigenpair, correctors and homogenized tensor"))
    sp = common(sub.add_parser("spectrum", help="eigenvalues of the selected problems"))
    sp.add_argument("--problem", action="append",
                    choices=("direct", "degenerate", "intermediate", "homogenized"))
    common(sub.add_parser("sweep", help="run the enabled checks of a config"))
    common(sub.add_parser("verify", help="identity suite and cell estimates"))
    ex = sub.add_parser("export", help="re-emit a stored JSON report")
    ex.add_argument("report")
    ex.add_argument("--out", required=True)
    ex.add_argument("--format", choices=("csv", "json"), default="csv")
    return p


def load_config(args):
    from .lab import ExperimentConfig

    path = Path(args.config)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if args.eta is not None:
        data["etas"] = [args.eta]
    if args.epsilon:
        data["epsilons"] = list(args.epsilon)
    if args.resolution is not None:
        data["cell_resolution"] = args.resolution
    if args.k is not None:
        data["K"] = args.k
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        return ExperimentConfig.from_dict(data)
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _fmt(x) -> str:
    return "" if x is None else f"{x:.10g}"


def cmd_cell(args) -> int:
    from .cell import compute_cell_data

    cfg = load_config(args)
    eta = cfg.etas[0]
    data = compute_cell_data(cfg.spec(eta), cfg.cell_resolution, potentials=True,
                             min_cells_across=cfg.min_cells_across)
    out = Path(args.out or "cell_data")
    data.save(out)
    A = data.tensor.A_bar
    print(f"eta,{_fmt(eta)}")
    print(f"resolution,{data.resolution}")
    print(f"lambda_bar,{_fmt(data.pair.lambda_bar)}")
    for i, row in enumerate(A):
        print(f"A_bar[{i}]," + ",".join(_fmt(v) for v in row))
    print(f"agreement_gap,{_fmt(data.tensor.gap)}")
    vol = data.pair.grid.cell_volume
    checks = {
        "phi_normalized": abs(np.sum(data.pair.phi ** 2) * vol - 1.0) <= 1e-10,
        "phi_nonnegative": bool(np.all(data.pair.phi >= 0)),
        "A_symmetric": float(np.max(np.abs(A - A.T))) <= 1e-8,
        "A_positive": float(np.linalg.eigvalsh(0.5 * (A + A.T)).min()) > 0,
        "corrector_mean_zero": float(np.max(np.abs(data.correctors.means))) <= 1e-9,
    }
    for name, ok in checks.items():
        print(f"invariant,{name},{'pass' if ok else 'FAIL'}")
    print(f"saved,{out}")
    return EXIT_OK if all(checks.values()) else EXIT_INVARIANT


def cmd_spectrum(args) -> int:
    from .cell import compute_cell_data
    from .geometry import perforate_domain
    from .spectra import (degenerate_spectrum, direct_spectrum, homogenized_spectrum,
                          intermediate_spectrum, reassemble, sample_phi)

    cfg = load_config(args)
    eta, eps = cfg.etas[0], cfg.epsilons[0]
    problems = args.problem or ["direct", "degenerate"]
    spec = cfg.spec(eta)
    cell = compute_cell_data(spec, cfg.cell_resolution, min_cells_across=cfg.min_cells_across)
    pd = perforate_domain(cfg.box(eps), spec, cfg.cell_resolution)
    phi_eps = sample_phi(pd, cell.pair)
    sets = {}
    for name in problems:
        if name == "direct":
            sets[name] = direct_spectrum(pd, cfg.K)
        elif name == "degenerate":
            sets[name] = degenerate_spectrum(pd, cell.pair, cfg.K)
        elif name == "intermediate":
            sets[name] = intermediate_spectrum(cell.tensor.A_bar, phi_eps, pd.grid, cfg.K)
        else:
            sets[name] = homogenized_spectrum(cell.tensor.A_bar, pd.grid, cfg.K)
    out = Path(args.out) if args.out else None
    print("problem,k,eigenvalue")
    for name, s in sets.items():
        for k, v in enumerate(s.values, start=1):
            print(f"{name},{k},{_fmt(v)}")
        if out is not None:
            s.export(out)
    if "direct" in sets and "degenerate" in sets:
        lam, _ = reassemble(cell.pair.lambda_bar, eps, sets["degenerate"])
        res = float(np.max(np.abs(lam - sets["direct"].values) / sets["direct"].values))
        print(f"reassembly_residual,,{_fmt(res)}")
        if res > 1e-6:
            return EXIT_INVARIANT
    return EXIT_OK


def _emit(report, args, default_name: str) -> int:
    from .lab import export_report

    path = Path(args.out or f"{default_name}.{args.format}")
    export_report(report, path, args.format)
    print("claim,quantity,epsilon,eta,k,value,slope,pass")
    for r in report.claims():
        print(f"{r.claim},{r.quantity},{_fmt(r.epsilon)},{_fmt(r.eta)},"
              f"{'' if r.k is None else r.k},{_fmt(r.value)},{_fmt(r.slope)},"
              f"{'pass' if r.passed else 'FAIL'}")
    print(f"written,{path}")
    return EXIT_OK if report.passed else EXIT_CLAIM


def cmd_sweep(args) -> int:
    from .lab import run_config

    cfg = load_config(args)
    return _emit(run_config(cfg), args, "sweep")


def cmd_verify(args) -> int:
    from .lab import RateReport, run_cell_estimates, run_identity_suite

    cfg = load_config(args)
    rep = RateReport(name="verify")
    rep.extend(run_identity_suite(cfg))
    if "cell_estimates" in cfg.checks:
        rep.extend(run_cell_estimates(cfg))
    return _emit(rep, args, "verify")


def cmd_export(args) -> int:
    from .lab import export_report, read_report

    src = Path(args.report)
    if not src.exists():
        raise UsageError(f"report {src} not found")
    try:
        rep = read_report(src)
    except (json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"{src} is not a report: {exc}") from exc
    export_report(rep, args.out, args.format)
    print(f"written,{args.out}")
    return EXIT_OK


COMMANDS = {"cell": cmd_cell, "spectrum": cmd_spectrum, "sweep": cmd_sweep,
            "verify": cmd_verify, "export": cmd_export}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PerflabError as exc:
        print(f"invariant violation: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
