import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from perflab.errors import BudgetExceeded, InsufficientPoints
from perflab.lab import (CSV_COLUMNS, CellCache, ExperimentConfig, RateReport, _cluster_closed_K,
                         _richardson, export_report, fit_loglog_slope, homogenized_reference,
                         read_report, run_config, run_duality, run_eigenfunction_sweep,
                         run_eigenvalue_rate_sweep)

ROOT = Path(__file__).resolve().parents[1]
DEMO = ROOT / "scripts" / "demo_config.json"
GOLDEN = Path(__file__).parent / "golden" / "demo_sweep.csv"

BALL = {"d": 2, "holes": [{"shape": "ball", "center": [0.5, 0.5], "radius": 0.5}], "eta": 0.4, "c0": 0.2}


def small(**kw):
    base = dict(perforation=BALL, epsilons=[0.5, 0.25, 0.125], etas=[0.4], K=2, L=[1.0, 1.0],
                cell_resolution=16, identity_resolutions=[12, 24], homogenized_levels=[32, 64])
    base.update(kw)
    return ExperimentConfig(**base)


def test_fit_slope_examples():
    pts = [(x, 3 * x ** 1.5) for x in (0.5, 0.25, 0.125)]
    slope, r2 = fit_loglog_slope(pts)
    assert slope == pytest.approx(1.5, abs=1e-12) and r2 == pytest.approx(1.0)
    with pytest.raises(InsufficientPoints):
        fit_loglog_slope(pts[:2])
    with pytest.raises(ValueError):
        fit_loglog_slope([(1, 1), (2, 0), (3, 1)])


@given(st.floats(-3, 3), st.lists(st.floats(-0.3, 0.3), min_size=4, max_size=8))
def test_fit_slope_matches_regression(p, noise):
    x = np.geomspace(1, 0.01, len(noise))
    y = x ** p * np.exp(noise)
    slope, r2 = fit_loglog_slope(zip(x, y))
    ref = np.polyfit(np.log(x), np.log(y), 1)[0]
    assert slope == pytest.approx(ref, abs=1e-9)
    assert r2 <= 1 + 1e-12


def test_richardson_removes_second_order():
    exact, c = 7.0, 3.0
    coarse, fine = exact + c * 0.1 ** 2, exact + c * 0.05 ** 2
    assert _richardson(coarse, fine) == pytest.approx(exact, abs=1e-12)


def test_homogenized_reference_close_to_continuum():
    ref, coarse, fine = homogenized_reference(np.eye(2), (1.0, 1.0), (32, 64), 4)
    exact = np.pi ** 2 * np.array([2, 5, 5, 8])
    assert np.max(np.abs(ref - exact) / exact) < 1e-4 < np.max(np.abs(fine - exact) / exact)
    with pytest.raises(ValueError):
        homogenized_reference(np.eye(2), (1.0, 1.0), (32, 48), 4)


def test_cluster_closing():
    vals = np.array([1.0, 2.0, 2.0, 2.0, 3.0])
    assert _cluster_closed_K(vals, 1) == 1
    assert _cluster_closed_K(vals, 2) == 4
    assert _cluster_closed_K(vals, 4) == 4


def test_config_validation():
    with pytest.raises(ValueError):
        small(K=0)
    with pytest.raises(ValueError):
        small(K=41)
    with pytest.raises(ValueError):
        small(checks=["nonsense"])
    with pytest.raises(ValueError):
        small(L=[1.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        small(epsilons=[0.3])
    with pytest.raises(ValueError):
        small(L=[1.1, 1.0])
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({**small().to_dict(), "bogus": 1})
    assert small(K=40).K == 40


def test_config_json_roundtrip(tmp_path):
    cfg = small(checks=["identities", "duality"], seed=11)
    cfg.to_json(tmp_path / "c.json")
    assert ExperimentConfig.from_json(tmp_path / "c.json") == cfg


def test_cell_cache_counts():
    cache = CellCache()
    cfg = small()
    a = cache.get(cfg.spec(0.4), 16)
    b = cache.get(cfg.spec(0.4), 16)
    cache.get(cfg.spec(0.3), 16)
    assert a is b and cache.hits == 1 and cache.misses == 2


def test_budget_guard():
    with pytest.raises(BudgetExceeded):
        run_eigenvalue_rate_sweep(small(budget_dofs=1000))


def test_empty_report_export(tmp_path):
    path = export_report(RateReport(), tmp_path / "r.csv")
    assert path.read_text() == ",".join(CSV_COLUMNS) + "\n"
    with pytest.raises(ValueError):
        export_report(RateReport(), tmp_path / "r.xml", "xml")


def test_json_roundtrip(tmp_path):
    rep = RateReport(name="x")
    rep.add(0.5, 0.3, 1, "lambda", 12.5)
    rep.add(None, 0.3, 1, "eps_slope", 1.1, None, 1.1, True, "eigenvalue-rate-eps", "r2=0.99")
    export_report(rep, tmp_path / "r.json", "json")
    back = read_report(tmp_path / "r.json")
    assert back.to_dict() == rep.to_dict()
    export_report(rep, tmp_path / "a.csv")
    export_report(back, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_no_hole_sweep_has_zero_target():
    cfg = small(perforation={"d": 2, "holes": [], "eta": 1.0, "c0": 0.2}, etas=[1.0])
    rep = run_eigenvalue_rate_sweep(cfg)
    # what remains is grid error of the direct solve against the extrapolated mu
    rel = [r.value / l.value for r, l in zip(rep.find("eigenvalue_error"), rep.find("lambda"))]
    assert rel and max(rel) < 5e-3
    notes = {r.note for r in rep.find("eps_slope")}
    assert notes == {"degenerate: zero target"}
    assert rep.claims() == []


def test_eigenvalue_sweep_rows():
    rep = run_eigenvalue_rate_sweep(small())
    assert len(rep.find("eigenvalue_error")) == 3 * 2
    slopes = rep.find("eps_slope")
    assert len(slopes) == 2 and all(r.claim == "eigenvalue-rate-eps" for r in slopes)
    for r in slopes:
        assert r.value == r.slope and "r2=" in r.note


def test_eigenfunction_sweep_claims():
    rep = run_eigenfunction_sweep(small(K=1))
    assert len(rep.find("band_width_monotone")) == 3
    assert all(r.passed for r in rep.find("band_width_monotone"))
    assert len(rep.find("band_decay[t=0.5]")) == 1


def test_duality_rows():
    rep = run_duality(small(epsilons=[0.5, 0.25]))
    assert len(rep.find("duality_pairing")) == 2
    assert rep.find("duality_slope") == []


def _read(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def _same_table(a, b, rtol=1e-6, atol=1e-9):
    assert len(a) == len(b)
    for ra, rb in zip(a, b):
        assert len(ra) == len(rb)
        for x, y in zip(ra, rb):
            try:
                fx, fy = float(x), float(y)
            except ValueError:
                assert x == y
                continue
            assert math.isclose(fx, fy, rel_tol=rtol, abs_tol=atol), (ra, rb)


@pytest.mark.slow
def test_demo_config_golden_and_deterministic(tmp_path):
    cfg = ExperimentConfig.from_json(DEMO)
    a = export_report(run_config(cfg), tmp_path / "a.csv")
    b = export_report(run_config(cfg), tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()
    _same_table(_read(a), _read(GOLDEN))
    assert json.loads(DEMO.read_text())["seed"] == cfg.seed
