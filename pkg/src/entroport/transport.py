"""Line integrals of connection forms, parallel transport, transport densities.

Transport of a fiber value along a path is multiplication by
``exp(-integral of A along the path)``.  Exact connections A = lam * dJ make
the factor path-independent, which is what the spread check falsifies for
non-exact inputs.  Densities are built by transporting from one shared
basepoint along straight segments and normalizing with the trapezoid rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .expr import DomainError, Expr, const, differentiate, evaluate_arrays, mul
from .fields import Density, GridSpec, NormalizationError, Polyline

__all__ = [
    "GradientSource",
    "ComponentSource",
    "TransportResult",
    "line_integral",
    "parallel_transport",
    "concatenate_paths",
    "path_independence_check",
    "build_density_by_transport",
    "build_density_from_source",
]

# 4-point Gauss-Legendre on [0, 1]
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(4)
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS
_TRAP_NODES = np.array([0.0, 1.0])
_TRAP_WEIGHTS = np.array([0.5, 0.5])


class GradientSource:
    """Exact connection A_i = lam * dJ/dx_i from a potential expression."""

    def __init__(self, potential: Expr, lam: float = 1.0):
        self.potential = potential
        self.lam = float(lam)
        self.dimension = potential.dimension
        self.components = [
            Expr(mul(const(self.lam), differentiate(potential, i + 1).root),
                 self.dimension)
            for i in range(self.dimension)
        ]


class ComponentSource:
    """Connection supplied componentwise (possibly non-exact), times a scale."""

    def __init__(self, components, scale: float = 1.0):
        if not components:
            raise ValueError("need at least one component expression")
        dims = {c.dimension for c in components}
        if len(dims) != 1 or len(components) != dims.pop():
            raise ValueError("need one component per dimension, all of equal dimension")
        self.dimension = len(components)
        self.scale = float(scale)
        self.components = [
            Expr(mul(const(self.scale), c.root), self.dimension) for c in components
        ]


def _eval_components(source, pts: np.ndarray) -> np.ndarray:
    """Evaluate A at points of shape (..., n); returns matching (..., n)."""
    coords = [pts[..., d] for d in range(source.dimension)]
    out = np.empty_like(pts)
    for i, comp in enumerate(source.components):
        out[..., i] = evaluate_arrays(comp, coords)
    return out


def _segment_integrals(source, path: Polyline, nodes, weights) -> np.ndarray:
    if path.dimension != source.dimension:
        raise ValueError(f"path dimension {path.dimension} != connection dimension "
                         f"{source.dimension}")
    a = path.vertices[:-1]
    d = np.diff(path.vertices, axis=0)
    # (q, m, n) evaluation points: all quadrature nodes on all segments at once
    pts = a[None, :, :] + nodes[:, None, None] * d[None, :, :]
    try:
        A = _eval_components(source, pts)
    except DomainError as err:
        seg = ""
        if err.bad_mask is not None and err.bad_mask.shape[:2] == pts.shape[:2]:
            seg = f" on segment {int(np.argwhere(err.bad_mask)[0][1])}"
        raise DomainError(err.reason + seg, err.subexpr, err.bad_mask) from None
    integrand = np.sum(A * d[None, :, :], axis=2)  # (q, m)
    return weights @ integrand


def _rule(quadrature: str):
    if quadrature == "gauss4":
        return _GL_NODES, _GL_WEIGHTS
    if quadrature == "trapezoid":
        return _TRAP_NODES, _TRAP_WEIGHTS
    raise ValueError(f"unknown quadrature {quadrature!r}; use 'trapezoid' or 'gauss4'")


def line_integral(source, path: Polyline, quadrature: str = "gauss4") -> float:
    """Composite quadrature of sum_i A_i dx^i along the polyline."""
    nodes, weights = _rule(quadrature)
    return float(np.sum(_segment_integrals(source, path, nodes, weights)))


@dataclass(frozen=True)
class TransportResult:
    """Line integral, transport factor exp(-integral), per-segment partials."""

    integral: float
    factor: float
    partials: np.ndarray

    def __post_init__(self):
        if not self.factor > 0:
            raise ValueError("transport factor must be strictly positive")


def _rk4_factors(source, path: Polyline, substeps: int) -> np.ndarray:
    """Per-segment factors from RK4 on s' = -A(x(t)) x'(t) s, s(0) = 1."""
    a = path.vertices[:-1]
    d = np.diff(path.vertices, axis=0)
    m = d.shape[0]

    def rate(t):
        pts = a + t * d
        return np.sum(_eval_components(source, pts) * d, axis=1)

    s = np.ones(m)
    h = 1.0 / substeps
    for k in range(substeps):
        t0 = k * h
        r1 = rate(t0)
        r2 = rate(t0 + 0.5 * h)
        r4 = rate(t0 + h)
        k1 = -r1 * s
        k2 = -r2 * (s + 0.5 * h * k1)
        k3 = -r2 * (s + 0.5 * h * k2)
        k4 = -r4 * (s + h * k3)
        s = s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return s


def parallel_transport(source, path: Polyline, method: str = "gauss4",
                       rk4_substeps: int = 128) -> TransportResult:
    """Transport factor along the path.

    ``method`` is ``gauss4`` or ``trapezoid`` for quadrature of the line
    integral, or ``rk4`` to integrate the transport ODE directly (the
    cross-validation route).  The stored integral and factor always satisfy
    factor = exp(-integral).
    """
    if method == "rk4":
        seg_factors = _rk4_factors(source, path, rk4_substeps)
        if np.any(seg_factors <= 0):
            raise ArithmeticError("RK4 transport produced a non-positive factor; "
                                  "increase rk4_substeps")
        seg = -np.log(seg_factors)
    else:
        nodes, weights = _rule(method)
        seg = _segment_integrals(source, path, nodes, weights)
    partials = np.cumsum(seg)
    integral = float(partials[-1])
    return TransportResult(integral, math.exp(-integral), partials)


def concatenate_paths(first: Polyline, second: Polyline) -> Polyline:
    """Join end-to-start; the shared vertex must match exactly."""
    if not np.array_equal(first.vertices[-1], second.vertices[0]):
        raise ValueError("paths do not share an endpoint")
    return Polyline(np.vstack([first.vertices, second.vertices[1:]]))


def path_independence_check(source, start, end, k: int, box: GridSpec,
                            seed: int = 0, max_vertices: int = 16) -> float:
    """Max relative spread of transport factors over k seeded random paths.

    Paths run start -> end through up to ``max_vertices - 2`` uniform interior
    points of the box.  Exact connections give spread at rounding level.
    """
    if k < 2:
        raise ValueError("need at least 2 paths to measure a spread")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    lo = np.asarray(box.lower)
    hi = np.asarray(box.upper)
    factors = []
    for _ in range(k):
        n_mid = int(rng.integers(1, max_vertices - 1))
        mids = rng.uniform(lo, hi, size=(n_mid, box.dimension))
        verts = np.vstack([start, mids, end])
        factors.append(parallel_transport(source, Polyline(verts)).factor)
    factors = np.array(factors)
    return float((factors.max() - factors.min()) / factors.min())


def build_density_from_source(source, grid: GridSpec, basepoint=None) -> Density:
    """Density of horizontal-lift endpoints: exp(-transport integral) per node.

    Every node is reached by a straight path from the shared basepoint
    (default: box center), integrated with 4-point Gauss-Legendre; the result
    is normalized by the trapezoid partition sum.
    """
    if source.dimension != grid.dimension:
        raise ValueError("connection and grid dimensions differ")
    base = np.asarray(grid.center if basepoint is None else basepoint, dtype=float)
    if not grid.contains(base):
        raise ValueError(f"basepoint {tuple(base)} is outside the grid box")
    mesh = grid.meshgrid()
    targets = np.stack([m.reshape(-1) for m in mesh], axis=-1)  # (N, n)
    d = targets - base
    integrals = np.zeros(d.shape[0])
    for t, w in zip(_GL_NODES, _GL_WEIGHTS):
        pts = base + t * d
        integrals += w * np.sum(_eval_components(source, pts) * d, axis=1)
    log_unnorm = -integrals
    shift = float(np.max(log_unnorm))
    shifted = np.exp(log_unnorm - shift).reshape(grid.shape)
    from .fields import quad_weights

    z_shifted = float(np.sum(quad_weights(grid) * shifted))
    if not np.isfinite(z_shifted) or z_shifted <= 0:
        raise NormalizationError(f"partition sum is {z_shifted}")
    Z = math.exp(shift) * z_shifted
    if not np.isfinite(Z) or Z <= 0:
        raise NormalizationError(f"partition constant overflowed: {Z}")
    lam = getattr(source, "lam", None)
    return Density(grid, shifted / z_shifted, Z=Z, provenance="transport-built",
                   lam=lam, basepoint=tuple(base))


def build_density_by_transport(e: Expr, lam: float, grid: GridSpec,
                               basepoint=None) -> Density:
    """Spec surface for exact potentials; see build_density_from_source."""
    return build_density_from_source(GradientSource(e, lam), grid, basepoint)
