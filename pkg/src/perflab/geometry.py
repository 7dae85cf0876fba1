"""Periodic hole patterns, box domains and their perforation.

Holes are axis-aligned rounded boxes: the set of points within distance
``rounding`` of the box with half widths ``half_widths``.  A ball is the
special case of zero half widths.  All hole sizes are given in cell units
*before* the scale ``eta`` is applied.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import GeometryUnresolved, GridMismatch
from .grid import Grid

_TOL = 1e-9


@dataclass(frozen=True)
class Hole:
    shape: str
    center: tuple
    radius: float = 0.0
    half_widths: tuple | None = None

    def __post_init__(self):
        if self.shape not in ("ball", "rounded-box"):
            raise ValueError(f"unknown hole shape {self.shape!r}")
        if self.radius < 0:
            raise ValueError("hole radius must be nonnegative")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if self.shape == "ball":
            object.__setattr__(self, "half_widths", (0.0,) * len(self.center))
            if self.radius <= 0:
                raise ValueError("ball radius must be positive")
        else:
            hw = self.half_widths if self.half_widths is not None else (0.0,) * len(self.center)
            if len(hw) != len(self.center) or min(hw) < 0:
                raise ValueError("half_widths must be nonnegative, one per axis")
            object.__setattr__(self, "half_widths", tuple(float(a) for a in hw))

    @property
    def diameter(self) -> float:
        return 2.0 * float(np.linalg.norm(self.half_widths)) + 2.0 * self.radius

    def extent(self, eta: float) -> np.ndarray:
        """Half extent along each axis after scaling by ``eta``."""
        return eta * (np.asarray(self.half_widths) + self.radius)

    def signed_distance(self, points: np.ndarray, eta: float) -> np.ndarray:
        """Distance from ``points`` (..., d) to the scaled hole; negative inside."""
        q = np.abs(points - np.asarray(self.center)) - eta * np.asarray(self.half_widths)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside - eta * self.radius

    def to_dict(self) -> dict:
        out = {"shape": self.shape, "center": list(self.center), "radius": self.radius}
        if self.shape == "rounded-box":
            out["half_widths"] = list(self.half_widths)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Hole":
        hw = data.get("half_widths")
        return cls(data["shape"], tuple(data["center"]), float(data.get("radius", 0.0)),
                   tuple(hw) if hw is not None else None)


def ball(center, radius) -> Hole:
    return Hole("ball", tuple(center), float(radius))


def rounded_box(center, half_widths, rounding) -> Hole:
    return Hole("rounded-box", tuple(center), float(rounding), tuple(half_widths))


def _pair_distance(a: Hole, b: Hole, eta: float) -> float:
    gap = np.abs(np.subtract(a.center, b.center)) - eta * (
        np.asarray(a.half_widths) + np.asarray(b.half_widths))
    return float(np.linalg.norm(np.maximum(gap, 0.0))) - eta * (a.radius + b.radius)


@dataclass(frozen=True)
class PerforationSpec:
    """Hole pattern of the unit cell Y = [0, 1]^d."""

    d: int
    holes: tuple = ()
    eta: float = 1.0
    c0: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "holes", tuple(self.holes))
        if self.d not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if self.c0 <= 0:
            raise ValueError("clearance c0 must be positive")
        for i, hole in enumerate(self.holes):
            if len(hole.center) != self.d:
                raise ValueError(f"hole {i} has wrong dimension")
            if not 0.05 <= hole.diameter <= 1.0:
                raise ValueError(f"hole {i}: unscaled diameter {hole.diameter:.3g} outside [0.05, 1]")
            ext = hole.extent(self.eta)
            c = np.asarray(hole.center)
            clearance = min((c - ext).min(), (1.0 - c - ext).min())
            if clearance <= self.c0:
                raise ValueError(f"hole {i}: distance {clearance:.3g} to the cell boundary is not > c0")
        for i, j in itertools.combinations(range(len(self.holes)), 2):
            if _pair_distance(self.holes[i], self.holes[j], self.eta) <= self.c0:
                raise ValueError(f"holes {i} and {j} closer than c0")

    def with_eta(self, eta: float) -> "PerforationSpec":
        return PerforationSpec(self.d, self.holes, eta, self.c0)

    @property
    def empty(self) -> bool:
        return len(self.holes) == 0

    def to_dict(self) -> dict:
        return {"d": self.d, "holes": [h.to_dict() for h in self.holes],
                "eta": self.eta, "c0": self.c0}

    @classmethod
    def from_dict(cls, data: dict) -> "PerforationSpec":
        return cls(int(data["d"]), tuple(Hole.from_dict(h) for h in data.get("holes", [])),
                   float(data.get("eta", 1.0)), float(data.get("c0", 0.2)))


def centered_ball(d: int, radius: float = 0.25, eta: float = 1.0, c0: float = 0.2) -> PerforationSpec:
    """One ball of unscaled ``radius`` at the cell center."""
    return PerforationSpec(d, (ball((0.5,) * d, radius),), eta, c0)


def epsilon_denominator(epsilon: float) -> int:
    q = Fraction(epsilon).limit_denominator(10_000)
    if q.numerator != 1 or abs(float(q) - epsilon) > _TOL or q.denominator < 2:
        raise ValueError(f"epsilon must be 1/q with integer q >= 2, got {epsilon}")
    return q.denominator


@dataclass(frozen=True)
class BoxDomain:
    L: tuple
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "L", tuple(float(x) for x in self.L))
        if min(self.L) <= 0:
            raise ValueError("side lengths must be positive")
        epsilon_denominator(self.epsilon)
        if self.epsilon > min(self.L) + _TOL:
            raise ValueError("epsilon exceeds the smallest side length")

    @property
    def d(self) -> int:
        return len(self.L)

    @property
    def volume(self) -> float:
        return float(np.prod(self.L))

    def to_dict(self) -> dict:
        return {"L": list(self.L), "epsilon": self.epsilon}


def cell_centers(resolution: int, d: int) -> np.ndarray:
    """Cell-center coordinates of a uniform grid on Y, shape (n,)*d + (d,)."""
    x = (np.arange(resolution) + 0.5) / resolution
    return np.stack(np.meshgrid(*([x] * d), indexing="ij"), axis=-1)


def _min_image(points: np.ndarray, hole: Hole, eta: float) -> np.ndarray:
    best = None
    for shift in itertools.product((-1.0, 0.0, 1.0), repeat=points.shape[-1]):
        dist = hole.signed_distance(points + np.asarray(shift), eta)
        best = dist if best is None else np.minimum(best, dist)
    return best


def signed_distance_to_holes(spec: PerforationSpec, points) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if spec.empty:
        return np.ones(points.shape[:-1])
    out = None
    for hole in spec.holes:
        dist = _min_image(points, hole, spec.eta)
        out = dist if out is None else np.minimum(out, dist)
    return out


def distance_to_holes(spec: PerforationSpec, points) -> np.ndarray:
    """Periodic distance to T_eta, clamped to 0 inside holes.

    With no holes the distance is reported as 1.0 (one cell side).
    """
    return np.maximum(signed_distance_to_holes(spec, points), 0.0)


def build_hole_indicator(spec: PerforationSpec, resolution: int) -> np.ndarray:
    if resolution < 8:
        raise ValueError("resolution must be at least 8 cells per side")
    if spec.empty:
        return np.zeros((resolution,) * spec.d, dtype=bool)
    mask = signed_distance_to_holes(spec, cell_centers(resolution, spec.d)) <= 0.0
    if not mask.any():
        raise GeometryUnresolved(f"no cell center of the {resolution}^{spec.d} grid lies in a hole")
    return mask


@dataclass(frozen=True)
class PerforatedDomain:
    box: BoxDomain
    perforation: PerforationSpec
    resolution_per_cell: int
    grid: Grid
    cell_holes: np.ndarray
    holes: np.ndarray
    fluid: np.ndarray
    gamma: np.ndarray
    sigma: np.ndarray

    @property
    def h(self) -> float:
        return self.grid.h

    @property
    def cell_index(self) -> tuple:
        """Per-axis index arrays mapping macro cells to cells of Y."""
        r = self.resolution_per_cell
        return tuple(np.arange(n) % r for n in self.grid.shape)

    def cell_coordinates(self) -> np.ndarray:
        return self.grid.centers()


def perforate_domain(box: BoxDomain, spec: PerforationSpec, resolution_per_cell: int) -> PerforatedDomain:
    if box.d != spec.d:
        raise ValueError("box and perforation dimensions differ")
    r = int(resolution_per_cell)
    h = box.epsilon / r
    shape = []
    for side in box.L:
        n = side / h
        if abs(n - round(n)) > 1e-8 * max(1.0, n):
            raise GridMismatch(f"side {side} is not a whole number of cells of size {h}")
        shape.append(int(round(n)))
    grid = Grid(tuple(shape), h, periodic=False)
    cell = build_hole_indicator(spec, r)
    idx = np.ix_(*[np.arange(n) % r for n in shape])
    holes = cell[idx]
    fluid = ~holes

    edge = np.zeros(shape, dtype=bool)
    for ax in range(box.d):
        sl = [slice(None)] * box.d
        sl[ax] = 0
        edge[tuple(sl)] = True
        sl[ax] = -1
        edge[tuple(sl)] = True
    gamma = fluid & edge

    near_hole = np.zeros(shape, dtype=bool)
    for ax in range(box.d):
        for step in (1, -1):
            shifted = np.zeros(shape, dtype=bool)
            src = [slice(None)] * box.d
            dst = [slice(None)] * box.d
            if step == 1:
                dst[ax], src[ax] = slice(0, -1), slice(1, None)
            else:
                dst[ax], src[ax] = slice(1, None), slice(0, -1)
            shifted[tuple(dst)] = holes[tuple(src)]
            near_hole |= shifted
    sigma = fluid & near_hole
    return PerforatedDomain(box, spec, r, grid, cell, holes, fluid, gamma, sigma)


@dataclass
class AssumptionReport:
    ok: bool = True
    interior: int = 0
    cut: int = 0
    classifications: list = field(default_factory=list)
    violations: list = field(default_factory=list)


def _connected(mask: np.ndarray) -> bool:
    if not mask.any():
        return True
    _, count = ndimage.label(mask)
    return count == 1


def check_assumption_A(pd: PerforatedDomain) -> AssumptionReport:
    """Classify every hole image meeting the box as interior or cut.

    Cut holes get a connectivity check of both the part inside the box and
    the hole neighbourhood outside the hole.  This is a sampling proxy for
    the uniform Lipschitz condition, not a proof of it.
    """
    report = AssumptionReport()
    box, spec = pd.box, pd.perforation
    eps, eta, h = box.epsilon, spec.eta, pd.h
    L = np.asarray(box.L)
    threshold = spec.c0 * eps * eta
    centers = pd.grid.centers()
    counts = [int(np.ceil(side / eps)) for side in box.L]
    for z in itertools.product(*[range(-1, n + 1) for n in counts]):
        for i, hole in enumerate(spec.holes):
            c = eps * (np.asarray(z) + np.asarray(hole.center))
            ext = eps * hole.extent(eta)
            lo, hi = c - ext, c + ext
            if np.any(hi <= 0) or np.any(lo >= L):
                continue
            dist = float(min((lo - 0).min(), (L - hi).min()))
            entry = {"cell": list(z), "hole": i}
            if dist > threshold:
                entry["kind"] = "INTERIOR"
                report.interior += 1
            elif dist > 0:
                entry["kind"] = "TANGENT"
                report.violations.append(
                    f"hole {i} in cell {z} lies within {dist:.3g} < c0*eps*eta of the boundary")
            else:
                entry["kind"] = "CUT"
                report.cut += 1
                pts = centers / eps - np.asarray(z)
                inside = hole.signed_distance(pts, eta) <= 0
                margin = (centers >= (lo - threshold)) & (centers <= (hi + threshold))
                neighbourhood = margin.all(axis=-1) & ~inside
                if not inside.any():
                    entry["connected"] = True
                else:
                    entry["connected"] = _connected(inside) and _connected(neighbourhood)
                if not entry["connected"]:
                    report.violations.append(f"cut hole {i} in cell {z} is not connected on the grid")
            report.classifications.append(entry)
    report.ok = not report.violations
    return report


def geometry_to_dict(spec: PerforationSpec, box: BoxDomain, resolution_per_cell: int) -> dict:
    out = spec.to_dict()
    out.update(box.to_dict())
    out["resolution_per_cell"] = int(resolution_per_cell)
    return out


def geometry_from_dict(data: dict):
    spec = PerforationSpec.from_dict(data)
    box = BoxDomain(tuple(data["L"]), float(data["epsilon"]))
    return spec, box, int(data["resolution_per_cell"])


def save_geometry(path, spec, box, resolution_per_cell) -> None:
    Path(path).write_text(json.dumps(geometry_to_dict(spec, box, resolution_per_cell), indent=2))


def load_geometry(path):
    return geometry_from_dict(json.loads(Path(path).read_text()))
