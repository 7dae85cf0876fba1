import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from perflab.errors import GeometryUnresolved, GridMismatch
from perflab.geometry import (BoxDomain, Hole, PerforationSpec, ball, build_hole_indicator,
                              cell_centers, centered_ball, check_assumption_A, distance_to_holes,
                              load_geometry, perforate_domain, rounded_box, save_geometry)


def test_empty_spec_gives_no_holes():
    spec = PerforationSpec(3)
    assert not build_hole_indicator(spec, 8).any()


def test_ball_volume_fraction_3d():
    mask = build_hole_indicator(centered_ball(3, 0.25), 32)
    exact = 4 / 3 * np.pi * 0.25 ** 3
    assert abs(mask.mean() - exact) / exact < 0.05


def test_ball_area_fraction_2d():
    mask = build_hole_indicator(centered_ball(2, 0.25, eta=0.5), 64)
    exact = np.pi * 0.125 ** 2
    assert abs(mask.mean() - exact) / exact < 0.10


def test_coarse_resolution_rejected():
    with pytest.raises(ValueError):
        build_hole_indicator(centered_ball(2, 0.25), 4)


def test_unresolved_hole_raises():
    # a tiny ball between cell centers of an 8-grid
    spec = PerforationSpec(2, (ball((0.5, 0.5), 0.03),), 1.0)
    with pytest.raises(GeometryUnresolved):
        build_hole_indicator(spec, 8)


def test_spec_invariants():
    with pytest.raises(ValueError):
        PerforationSpec(3, (ball((0.5, 0.5, 0.5), 0.4),), 1.0, c0=0.2)   # too close to the boundary
    with pytest.raises(ValueError):
        PerforationSpec(2, (ball((0.4, 0.5), 0.05), ball((0.6, 0.5), 0.05)), 1.0)   # pair too close
    with pytest.raises(ValueError):
        PerforationSpec(2, (ball((0.5, 0.5), 0.01),), 1.0)   # diameter below 0.05
    with pytest.raises(ValueError):
        PerforationSpec(2, eta=0.0)


def test_box_invariants():
    with pytest.raises(ValueError):
        BoxDomain((1.0, 1.0), 0.3)
    with pytest.raises(ValueError):
        BoxDomain((0.25, 1.0), 0.5)
    with pytest.raises(ValueError):
        BoxDomain((1.0, 1.0), 1.0)


def test_distance_no_holes_is_capped():
    assert np.all(distance_to_holes(PerforationSpec(3), [[0.1, 0.2, 0.3]]) == 1.0)


def test_distance_to_ball():
    spec = PerforationSpec(3, (ball((0.5, 0.5, 0.5), 0.2),), 1.0)
    assert distance_to_holes(spec, [[0.5, 0.5, 0.9]])[0] == pytest.approx(0.2, abs=1e-14)
    assert distance_to_holes(spec, [[0.5, 0.55, 0.5]])[0] == 0.0


def test_distance_periodic_wrap():
    eta = 0.5
    spec = PerforationSpec(3, (ball((0.1, 0.5, 0.5), 0.05),), eta, c0=0.02)
    d = distance_to_holes(spec, [[0.95, 0.5, 0.5]])[0]
    assert d == pytest.approx(0.15 - 0.05 * eta, abs=1e-14)


def _brute_distance(spec, p):
    best = np.inf
    for z in itertools.product((-1, 0, 1), repeat=spec.d):
        for hole in spec.holes:
            c = np.asarray(hole.center) + np.asarray(z)
            best = min(best, np.linalg.norm(np.asarray(p) - c) - spec.eta * hole.radius)
    return max(best, 0.0)


@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.floats(0.1, 1.0),
       st.floats(0.15, 0.85), st.floats(0.05, 0.12))
def test_distance_matches_image_scan(p, eta, cx, r):
    spec = PerforationSpec(3, (ball((cx, 0.5, 0.5), r),), eta, c0=0.02)
    assert distance_to_holes(spec, [p])[0] == pytest.approx(_brute_distance(spec, p), abs=1e-12)


@given(st.integers(8, 24), st.floats(0.3, 1.0))
def test_distance_lipschitz_along_grid_lines(n, eta):
    spec = PerforationSpec(2, (ball((0.5, 0.5), 0.2), ), eta)
    dist = distance_to_holes(spec, cell_centers(n, 2))
    h = 1.0 / n
    for ax in range(2):
        jumps = np.abs(np.diff(dist, axis=ax))
        assert jumps.max() <= h * (1 + 1e-12)


def test_rounded_box_distance():
    spec = PerforationSpec(2, (rounded_box((0.5, 0.5), (0.1, 0.05), 0.05),), 1.0)
    # straight above the flat top: distance = y - 0.5 - 0.05 - 0.05
    assert distance_to_holes(spec, [[0.5, 0.8]])[0] == pytest.approx(0.2, abs=1e-14)
    # diagonal from the corner of the inner box
    p = np.array([0.6 + 0.1, 0.55 + 0.1])
    assert distance_to_holes(spec, [p])[0] == pytest.approx(np.sqrt(0.02) - 0.05, abs=1e-14)


@given(st.sampled_from([2, 3, 4]), st.sampled_from([8, 10, 12]), st.sampled_from([2, 3]))
def test_tiling_consistency(q, r, d):
    spec = centered_ball(d, 0.3, eta=0.8)
    box = BoxDomain((1.0,) * d, 1.0 / q)
    pd = perforate_domain(box, spec, r)
    for z in itertools.product(range(q), repeat=d):
        block = pd.holes[tuple(slice(zi * r, (zi + 1) * r) for zi in z)]
        assert np.array_equal(block, pd.cell_holes)
        assert block.mean() == pd.cell_holes.mean()


def test_partition_and_boundary_masks():
    pd = perforate_domain(BoxDomain((1.0, 1.0, 1.0), 0.5), centered_ball(3, 0.25, 0.8), 8)
    assert np.all(pd.fluid ^ pd.holes)
    assert not np.any(pd.gamma & pd.sigma)
    assert not np.any(pd.gamma & pd.holes) and not np.any(pd.sigma & pd.holes)


def test_no_holes_domain():
    pd = perforate_domain(BoxDomain((1.0, 1.0), 0.5), PerforationSpec(2), 8)
    assert pd.fluid.all() and not pd.sigma.any()


def test_grid_mismatch():
    with pytest.raises(GridMismatch):
        perforate_domain(BoxDomain((1.1, 1.0), 0.5), centered_ball(2, 0.25), 8)


def test_eight_interior_holes():
    pd = perforate_domain(BoxDomain((1.0, 1.0, 1.0), 0.5), centered_ball(3, 0.25), 8)
    from scipy import ndimage
    _, count = ndimage.label(pd.holes)
    assert count == 8
    rep = check_assumption_A(pd)
    assert rep.ok and rep.cut == 0 and rep.interior == 8


def _brute_cut_count(box, spec):
    eps, L = box.epsilon, np.asarray(box.L)
    count = 0
    ranges = [range(-1, int(np.ceil(side / eps)) + 1) for side in box.L]
    for z in itertools.product(*ranges):
        for hole in spec.holes:
            c = eps * (np.asarray(z) + np.asarray(hole.center))
            ext = eps * hole.extent(spec.eta)
            lo, hi = c - ext, c + ext
            meets = np.all(hi > 0) and np.all(lo < L)
            if meets and (np.any(lo <= 0) or np.any(hi >= L)):
                count += 1
    return count


def test_cut_holes_match_image_count():
    box = BoxDomain((1.125, 1.0, 1.0), 0.25)
    spec = centered_ball(3, 0.25)
    rep = check_assumption_A(perforate_domain(box, spec, 8))
    assert rep.cut == _brute_cut_count(box, spec) == 16
    assert rep.ok
    assert all(c["connected"] for c in rep.classifications if c["kind"] == "CUT")


def test_tangent_hole_flagged():
    # last hole column ends 0.0125 = c0*eps*eta/2 before the box face
    box = BoxDomain((1.2, 1.0), 0.25)
    spec = centered_ball(2, 0.25)
    rep = check_assumption_A(perforate_domain(box, spec, 40))
    assert not rep.ok
    assert any("within" in v for v in rep.violations)


def test_geometry_json_roundtrip(tmp_path):
    spec = PerforationSpec(2, (ball((0.3, 0.5), 0.1), rounded_box((0.7, 0.5), (0.05, 0.1), 0.03)),
                           0.8)
    box = BoxDomain((1.0, 0.5), 0.25)
    save_geometry(tmp_path / "g.json", spec, box, 16)
    data = json.loads((tmp_path / "g.json").read_text())
    assert set(data) == {"d", "holes", "eta", "c0", "L", "epsilon", "resolution_per_cell"}
    spec2, box2, r = load_geometry(tmp_path / "g.json")
    assert spec2 == spec and box2 == box and r == 16


def test_hole_from_dict_accepts_half_widths_for_ball():
    h = Hole.from_dict({"shape": "ball", "center": [0.5, 0.5], "radius": 0.2, "half_widths": [0, 0]})
    assert h.diameter == pytest.approx(0.4)
