"""Connection assembly, flatness certification, level-set tracing, field splitting.

The connection one-form attached to a potential is sampled from *symbolic*
partial derivatives, never finite differences, so the flatness certificate is
not polluted by discretization noise.  Curvature is checked with central
differences on interior nodes only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expr import DomainError, Expr, differentiate, evaluate, evaluate_arrays
from .fields import CovectorField, GridSpec, Polyline, ScalarField

__all__ = [
    "CurvatureReport",
    "SeedNotFoundError",
    "CriticalPointError",
    "sample_scalar",
    "connection_form",
    "curvature",
    "trace_level_set",
    "split_field",
    "level_deviation",
]

CRITICAL_GRADIENT = 1e-10


class SeedNotFoundError(ValueError):
    """No grid cell straddles the requested level."""


class CriticalPointError(ArithmeticError):
    """Tracing ran into a vanishing gradient (level set degenerates)."""


def _located_domain_error(err: DomainError, grid: GridSpec) -> DomainError:
    where = ""
    if err.bad_mask is not None and err.bad_mask.shape == grid.shape:
        flat = int(np.flatnonzero(err.bad_mask.reshape(-1))[0])
        where = f" at node {grid.node_coords(flat)}"
    return DomainError(err.reason + where, err.subexpr, err.bad_mask)


def sample_scalar(e: Expr, grid: GridSpec) -> ScalarField:
    """Evaluate an expression node-wise over the grid."""
    if e.dimension != grid.dimension:
        raise ValueError(f"expression dimension {e.dimension} != grid dimension "
                         f"{grid.dimension}")
    try:
        values = evaluate_arrays(e, grid.meshgrid())
    except DomainError as err:
        raise _located_domain_error(err, grid) from None
    return ScalarField(grid, values)


def connection_form(e: Expr, grid: GridSpec, scale: float = 1.0) -> CovectorField:
    """Sample A_i = scale * dJ/dx_i from the exact symbolic derivatives."""
    if e.dimension != grid.dimension:
        raise ValueError(f"expression dimension {e.dimension} != grid dimension "
                         f"{grid.dimension}")
    mesh = grid.meshgrid()
    comps = np.empty((grid.dimension,) + grid.shape)
    for i in range(grid.dimension):
        try:
            comps[i] = scale * evaluate_arrays(differentiate(e, i + 1), mesh)
        except DomainError as err:
            raise _located_domain_error(err, grid) from None
    return CovectorField(grid, comps)


@dataclass(frozen=True)
class CurvatureReport:
    """Discrete exterior-derivative check: max |dA_j/dx_i - dA_i/dx_j|."""

    max_antisymmetry: float
    tolerance: float
    flat: bool


def _central_diff(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    fwd = [slice(None)] * values.ndim
    bwd = [slice(None)] * values.ndim
    fwd[axis] = slice(2, None)
    bwd[axis] = slice(None, -2)
    out = np.zeros_like(values)
    mid = [slice(None)] * values.ndim
    mid[axis] = slice(1, -1)
    out[tuple(mid)] = (values[tuple(fwd)] - values[tuple(bwd)]) / (2.0 * h)
    return out


def _interior(values: np.ndarray) -> np.ndarray:
    return values[tuple(slice(1, -1) for _ in range(values.ndim))]


def curvature(A: CovectorField, tol: float) -> CurvatureReport:
    """Flat iff every antisymmetrized interior derivative pair is within tol."""
    n = A.grid.dimension
    if n == 1:
        return CurvatureReport(0.0, tol, True)  # every 1-D form is closed
    h = A.grid.spacing
    worst = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            dAj_dxi = _central_diff(A.components[j], i, h[i])
            dAi_dxj = _central_diff(A.components[i], j, h[j])
            worst = max(worst, float(np.max(np.abs(
                _interior(dAj_dxi - dAi_dxj)))))
    return CurvatureReport(worst, tol, worst <= tol)


# ---------------------------------------------------------------------------
# Level-set tracing (2-D): arc-length stepping on the rotated gradient with
# Newton projection back onto the level after every step.


def _gradient_at(dx: Expr, dy: Expr, p) -> np.ndarray:
    return np.array([evaluate(dx, p), evaluate(dy, p)])


def _project(e: Expr, dx: Expr, dy: Expr, p, c, tol, max_iter=12):
    """Newton-project p onto {J = c}; raises on vanishing/degenerate gradient.

    Newton with a nonzero gradient at the root converges quadratically; the
    linear (halving) behaviour near a critical level is what the iteration cap
    detects.
    """
    p = np.asarray(p, dtype=float)
    for _ in range(max_iter):
        r = evaluate(e, p) - c
        if abs(r) <= tol:
            return p
        g = _gradient_at(dx, dy, p)
        g2 = float(g @ g)
        if np.sqrt(g2) < CRITICAL_GRADIENT:
            raise CriticalPointError(
                f"gradient below {CRITICAL_GRADIENT} while projecting onto level {c}")
        p = p - (r / g2) * g
    raise CriticalPointError(
        f"projection onto level {c} stalled near {tuple(p)}; "
        "the level set degenerates at a critical point")


def _tangent(dx: Expr, dy: Expr, p, direction: float) -> np.ndarray:
    g = _gradient_at(dx, dy, p)
    norm = float(np.hypot(g[0], g[1]))
    if norm < CRITICAL_GRADIENT:
        raise CriticalPointError(
            f"gradient below {CRITICAL_GRADIENT} at vertex {tuple(p)}")
    return direction * np.array([-g[1], g[0]]) / norm


def _rk4_step(dx: Expr, dy: Expr, p, step: float, direction: float) -> np.ndarray:
    k1 = _tangent(dx, dy, p, direction)
    k2 = _tangent(dx, dy, p + 0.5 * step * k1, direction)
    k3 = _tangent(dx, dy, p + 0.5 * step * k2, direction)
    k4 = _tangent(dx, dy, p + step * k3, direction)
    return p + (step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _clip_to_box(grid: GridSpec, inside, outside):
    """Last in-box point on the segment inside->outside."""
    s = 1.0
    for d in range(2):
        delta = outside[d] - inside[d]
        if delta == 0.0:
            continue
        for bound in (grid.lower[d], grid.upper[d]):
            t = (bound - inside[d]) / delta
            if 0.0 <= t < s and (delta > 0) == (bound == grid.upper[d]):
                s = t
    p = inside + s * (outside - inside)
    return np.clip(p, grid.lower, grid.upper)


def _boundary_project(e: Expr, dx: Expr, dy: Expr, grid: GridSpec, p, c, tol):
    """1-D Newton along the boundary edge the point landed on."""
    p = np.asarray(p, dtype=float)
    # the free axis is the one farther from its bounds; the other is pinned
    slack = [min(p[d] - grid.lower[d], grid.upper[d] - p[d]) for d in range(2)]
    free = 0 if slack[0] > slack[1] else 1
    dfree = dx if free == 0 else dy
    for _ in range(8):
        r = evaluate(e, p) - c
        if abs(r) <= tol:
            break
        d = evaluate(dfree, p)
        if abs(d) < CRITICAL_GRADIENT:
            break
        p[free] -= r / d
    return np.clip(p, grid.lower, grid.upper)


def _trace_one_direction(e, dx, dy, grid, start, c, step, max_steps, proj_tol,
                         direction):
    verts = []
    p = np.asarray(start, dtype=float)
    for k in range(max_steps):
        pred = _rk4_step(dx, dy, p, step, direction)
        new = _project(e, dx, dy, pred, c, proj_tol)
        if not grid.contains(new):
            edge = _clip_to_box(grid, p, new)
            edge = _boundary_project(e, dx, dy, grid, edge, c, proj_tol)
            if np.any(edge != p):
                verts.append(edge)
            return verts, "boundary"
        advance = float(np.hypot(new[0] - p[0], new[1] - p[1]))
        if advance < 0.1 * step:
            raise CriticalPointError(
                f"tracer stalled near {tuple(new)}: level set curvature is "
                "below the step size (degenerate level or step too large)")
        verts.append(new)
        if k >= 2 and float(np.hypot(new[0] - start[0], new[1] - start[1])) < step:
            return verts, "closed"
        p = new
    return verts, "exhausted"


def _straddling_cells(values: np.ndarray, c: float) -> np.ndarray:
    corners = [values[:-1, :-1], values[1:, :-1], values[:-1, 1:], values[1:, 1:]]
    lo = np.minimum.reduce(corners)
    hi = np.maximum.reduce(corners)
    return (lo <= c) & (c <= hi)


def trace_level_set(e: Expr, grid: GridSpec, c: float, step: float,
                    max_steps: int) -> list:
    """Trace the level set J = c as one polyline per connected component.

    Steps have arc length ``step`` along the rotated gradient
    (-dJ/dx2, dJ/dx1)/|grad J|; each vertex is Newton-projected back onto the
    level.  Curves close when the head returns within ``step`` of the start;
    open curves are traced in both directions and clipped to the grid box.
    """
    if grid.dimension != 2 or e.dimension != 2:
        raise ValueError("level-set tracing is 2-D only")
    if step <= 0 or max_steps < 1:
        raise ValueError("need step > 0 and max_steps >= 1")
    dx = differentiate(e, 1)
    dy = differentiate(e, 2)
    J = sample_scalar(e, grid).values
    cells = _straddling_cells(J, c)
    if not np.any(cells):
        raise SeedNotFoundError(
            f"no grid cell straddles level {c}; range is [{J.min()}, {J.max()}]")
    proj_tol = max(1e-13, 1e-13 * abs(c))
    hx, hy = grid.spacing
    ax, ay = grid.axes()
    visited = np.zeros_like(cells)

    def mark(vertex):
        i = int(np.clip((vertex[0] - grid.lower[0]) / hx, 0, cells.shape[0] - 1))
        j = int(np.clip((vertex[1] - grid.lower[1]) / hy, 0, cells.shape[1] - 1))
        visited[max(i - 1, 0):i + 2, max(j - 1, 0):j + 2] = True

    polylines = []
    for _ in range(64):  # component cap
        todo = np.argwhere(cells & ~visited)
        if todo.size == 0:
            break
        ci, cj = todo[0]
        center = (ax[ci] + 0.5 * hx, ay[cj] + 0.5 * hy)
        seed = _project(e, dx, dy, center, c, proj_tol)
        if not grid.contains(seed):
            visited[ci, cj] = True
            continue
        fwd, status = _trace_one_direction(e, dx, dy, grid, seed, c, step,
                                           max_steps, proj_tol, +1.0)
        if status == "closed":
            verts = [seed] + fwd
            closed = True
        else:
            bwd, _ = _trace_one_direction(e, dx, dy, grid, seed, c, step,
                                          max_steps, proj_tol, -1.0)
            verts = list(reversed(bwd)) + [seed] + fwd
            closed = False
        for v in verts:
            mark(v)
        if len(verts) >= 2:
            polylines.append(Polyline(np.array(verts), closed=closed))
    return polylines


def level_deviation(e: Expr, points, c: float) -> float:
    """Max |J(p) - c| over sampled points (the containment check, any dim)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    vals = evaluate_arrays(e, [pts[:, d] for d in range(pts.shape[1])])
    return float(np.max(np.abs(vals - c)))


def split_field(v: CovectorField, A: CovectorField):
    """Split v into (horizontal, vertical) parts relative to A.

    Vertical is the Euclidean projection onto A; horizontal is the
    subtraction-defined remainder, so v = horizontal + vertical exactly.
    Nodes with |A| < 1e-12 split as (v, 0).
    """
    if v.grid != A.grid:
        raise ValueError("fields live on different grids")
    norm2 = np.sum(A.components ** 2, axis=0)
    degenerate = norm2 < 1e-24
    vdotA = np.sum(v.components * A.components, axis=0)
    coef = np.where(degenerate, 0.0, vdotA / np.where(degenerate, 1.0, norm2))
    vertical = coef * A.components
    horizontal = v.components - vertical
    return CovectorField(v.grid, horizontal), CovectorField(v.grid, vertical)
