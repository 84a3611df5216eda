"""Rectangular grids, sampled fields, densities, polylines, and their on-disk forms.

CSV conventions: one node per line in row-major order, 17 significant digits,
header ``x1,..,xn,value`` for scalar fields and ``x1,..,xn,A1,..,An`` for
covector fields.  Polylines serialize as ``x1,x2`` vertex lists with a blank
line between curves.  Densities get a JSON sidecar carrying Z, lambda,
basepoint, provenance and the grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "GridError",
    "NormalizationError",
    "GridSpec",
    "ScalarField",
    "CovectorField",
    "Density",
    "Polyline",
    "quad_weights",
    "l1_distance",
    "format_float",
    "dump_json",
    "write_scalar_csv",
    "write_covector_csv",
    "write_polylines_csv",
    "write_density",
]

DEFAULT_NODE_CAP = 2 ** 24


class GridError(ValueError):
    pass


class NormalizationError(ValueError):
    """A partition sum came out non-finite or non-positive."""


@dataclass(frozen=True)
class GridSpec:
    """A rectangular patch of state space, 1 to 3 dimensional.

    ``lower``/``upper`` are per-axis bounds, ``nodes`` the per-axis node
    counts (>= 3 so central differences have interior nodes).  Spacing is
    derived: h_i = (upper_i - lower_i) / (nodes_i - 1).
    """

    lower: tuple
    upper: tuple
    nodes: tuple
    node_cap: int = field(default=DEFAULT_NODE_CAP, compare=False)

    def __post_init__(self):
        lower = tuple(float(v) for v in self.lower)
        upper = tuple(float(v) for v in self.upper)
        nodes = tuple(int(v) for v in self.nodes)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "nodes", nodes)
        n = len(lower)
        if not (1 <= n <= 3) or len(upper) != n or len(nodes) != n:
            raise GridError(f"need matching 1-3 dimensional bounds, got "
                            f"{lower}, {upper}, {nodes}")
        for lo, hi in zip(lower, upper):
            if not hi > lo:
                raise GridError(f"upper bound {hi} not above lower bound {lo}")
        for m in nodes:
            if m < 3:
                raise GridError(f"need at least 3 nodes per axis, got {m}")
        total = int(np.prod(nodes))
        if total > self.node_cap:
            raise GridError(f"grid has {total} nodes, exceeding cap {self.node_cap}")

    @property
    def dimension(self) -> int:
        return len(self.nodes)

    @property
    def shape(self) -> tuple:
        return self.nodes

    @property
    def node_count(self) -> int:
        return int(np.prod(self.nodes))

    @property
    def spacing(self) -> tuple:
        return tuple((hi - lo) / (m - 1)
                     for lo, hi, m in zip(self.lower, self.upper, self.nodes))

    @property
    def center(self) -> tuple:
        return tuple(0.5 * (lo + hi) for lo, hi in zip(self.lower, self.upper))

    @property
    def volume(self) -> float:
        return float(np.prod([hi - lo for lo, hi in zip(self.lower, self.upper)]))

    def axes(self) -> list:
        return [np.linspace(lo, hi, m)
                for lo, hi, m in zip(self.lower, self.upper, self.nodes)]

    def meshgrid(self) -> list:
        return list(np.meshgrid(*self.axes(), indexing="ij"))

    def contains(self, point) -> bool:
        return all(lo <= x <= hi
                   for x, lo, hi in zip(point, self.lower, self.upper))

    def node_coords(self, flat_index: int) -> tuple:
        idx = np.unravel_index(flat_index, self.shape)
        axes = self.axes()
        return tuple(float(axes[d][i]) for d, i in enumerate(idx))


def quad_weights(grid: GridSpec) -> np.ndarray:
    """Trapezoid-rule quadrature weights, shaped like the grid."""
    w = None
    for h, m in zip(grid.spacing, grid.nodes):
        wa = np.full(m, h)
        wa[0] = wa[-1] = 0.5 * h
        w = wa if w is None else np.multiply.outer(w, wa)
    return w


def _check_values(grid: GridSpec, values: np.ndarray, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape != grid.shape:
        raise ValueError(f"{what} shape {values.shape} does not match grid {grid.shape}")
    if not np.all(np.isfinite(values)):
        flat = int(np.flatnonzero(~np.isfinite(values))[0])
        raise ValueError(f"{what} is non-finite at node {grid.node_coords(flat)}")
    return values


@dataclass(frozen=True)
class ScalarField:
    """Real samples on a grid, one value per node."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.grid, self.values, "field"))

    def integrate(self) -> float:
        return float(np.sum(quad_weights(self.grid) * self.values))


@dataclass(frozen=True)
class CovectorField:
    """One covector per node; ``components[i]`` holds A_i on the grid."""

    grid: GridSpec
    components: np.ndarray  # shape (n, *grid.shape)

    def __post_init__(self):
        comps = np.asarray(self.components, dtype=float)
        expected = (self.grid.dimension,) + self.grid.shape
        if comps.shape != expected:
            raise ValueError(f"components shape {comps.shape}, expected {expected}")
        if not np.all(np.isfinite(comps)):
            raise ValueError("covector components must be finite")
        object.__setattr__(self, "components", comps)


@dataclass(frozen=True)
class Density:
    """A normalized scalar field with its partition constant and provenance.

    ``Z`` is the quadrature sum of the unnormalized values, ``lam`` and
    ``basepoint`` record how exponent scaling was applied when that applies.
    Provenance is one of ``transport-built``, ``el-built``, ``pde-evolved``
    or ``gauge-transformed``.
    """

    grid: GridSpec
    values: np.ndarray
    Z: float
    provenance: str
    lam: Optional[float] = None
    basepoint: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.grid, self.values, "density"))
        if not np.isfinite(self.Z) or self.Z <= 0:
            raise ValueError(f"partition constant must be positive, got {self.Z}")
        if self.basepoint is not None:
            object.__setattr__(self, "basepoint",
                               tuple(float(x) for x in self.basepoint))

    def integrate(self) -> float:
        return float(np.sum(quad_weights(self.grid) * self.values))

    def as_field(self) -> ScalarField:
        return ScalarField(self.grid, self.values)


def uniform_density(grid: GridSpec) -> Density:
    """The unconstrained maximum-entropy density: constant 1/volume."""
    vol = grid.volume
    return Density(grid, np.full(grid.shape, 1.0 / vol), Z=vol,
                   provenance="el-built", lam=0.0)


__all__.append("uniform_density")


@dataclass(frozen=True)
class Polyline:
    """Ordered vertices in R^n; consecutive vertices must be distinct."""

    vertices: np.ndarray  # shape (m, n)
    closed: bool = False

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[0] < 2:
            raise ValueError("polyline needs at least two vertices")
        if not np.all(np.isfinite(verts)):
            raise ValueError("polyline vertices must be finite")
        seg = np.diff(verts, axis=0)
        if np.any(np.all(seg == 0.0, axis=1)):
            raise ValueError("consecutive polyline vertices must be distinct")
        object.__setattr__(self, "vertices", verts)

    @property
    def dimension(self) -> int:
        return self.vertices.shape[1]

    @property
    def segment_count(self) -> int:
        return self.vertices.shape[0] - 1

    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)))


def l1_distance(a, b) -> float:
    """Trapezoid-weighted L1 distance between two fields on the same grid."""
    if a.grid != b.grid:
        raise ValueError("fields live on different grids")
    return float(np.sum(quad_weights(a.grid) * np.abs(a.values - b.values)))


# ---------------------------------------------------------------------------
# Serialization: 17 significant digits everywhere, byte-deterministic.


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def _json_text(obj, indent: int = 0) -> str:
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = ",\n".join(f'{pad}  {json.dumps(str(k))}: {_json_text(v, indent + 1)}'
                           for k, v in obj.items())
        return "{\n" + items + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if len(obj) == 0:
            return "[]"
        return "[" + ", ".join(_json_text(v, indent) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    return json.dumps(obj)


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        fh.write(_json_text(obj) + "\n")


def _flat_coords(grid: GridSpec) -> list:
    return [m.reshape(-1) for m in grid.meshgrid()]


def write_scalar_csv(field, path) -> None:
    coords = _flat_coords(field.grid)
    vals = field.values.reshape(-1)
    n = field.grid.dimension
    with open(path, "w") as fh:
        fh.write(",".join(f"x{i + 1}" for i in range(n)) + ",value\n")
        for k in range(vals.size):
            row = [format_float(c[k]) for c in coords] + [format_float(vals[k])]
            fh.write(",".join(row) + "\n")


def write_covector_csv(cov: CovectorField, path) -> None:
    coords = _flat_coords(cov.grid)
    n = cov.grid.dimension
    comps = [cov.components[i].reshape(-1) for i in range(n)]
    with open(path, "w") as fh:
        header = [f"x{i + 1}" for i in range(n)] + [f"A{i + 1}" for i in range(n)]
        fh.write(",".join(header) + "\n")
        for k in range(comps[0].size):
            row = [format_float(c[k]) for c in coords] + [format_float(c[k]) for c in comps]
            fh.write(",".join(row) + "\n")


def write_polylines_csv(polylines, path) -> None:
    with open(path, "w") as fh:
        fh.write("x1,x2\n")
        for j, line in enumerate(polylines):
            if j > 0:
                fh.write("\n")
            for v in line.vertices:
                fh.write(",".join(format_float(c) for c in v) + "\n")


def grid_to_dict(grid: GridSpec) -> dict:
    return {"lower": list(grid.lower), "upper": list(grid.upper),
            "nodes": list(grid.nodes)}


__all__.append("grid_to_dict")


def write_density(density: Density, csv_path, json_path) -> None:
    write_scalar_csv(density, csv_path)
    meta = {
        "Z": density.Z,
        "lambda": density.lam,
        "basepoint": list(density.basepoint) if density.basepoint is not None else None,
        "provenance": density.provenance,
        "grid": grid_to_dict(density.grid),
    }
    dump_json(meta, json_path)
