"""Constrained entropy, Euler-Lagrange residuals, multiplier fitting, gauge maps.

The fit solves the convex dual: lambda -> ln Z(lambda) + sum_k lambda_k C_k is
minimized with damped Newton steps, where Z(lambda) is the trapezoid partition
sum of exp(-sum_k lambda_k J_k) on the grid.  Gradient and Hessian are the
moment mismatch and the constraint covariance under the current density.  All
exponentials of fields are computed as exp(v - max v) before normalizing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .expr import Expr, add, const, mul
from .fields import Density, GridSpec, NormalizationError, quad_weights
from .geometry import sample_scalar

__all__ = [
    "Constraint",
    "ConstraintSet",
    "FitReport",
    "SingularHessianError",
    "GaugeInvarianceReport",
    "entropy_action",
    "el_residual",
    "fit_multipliers",
    "maxent_density",
    "combined_potential",
    "gauge_transform",
    "gauge_invariance_check",
]

_PLNP_FLOOR = 1e-300  # below this, p ln p contributes 0 (x ln x -> 0)


class SingularHessianError(np.linalg.LinAlgError):
    """Constraints are (numerically) linearly dependent on the grid."""

    def __init__(self, message: str, null_vector):
        super().__init__(message)
        self.null_vector = np.asarray(null_vector)


@dataclass(frozen=True)
class Constraint:
    """One constraint term: potential J_k, multiplier lambda_k, target C_k."""

    expr: Expr
    lam: Optional[float] = None
    target: Optional[float] = None


@dataclass(frozen=True)
class ConstraintSet:
    constraints: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        dims = {c.expr.dimension for c in self.constraints}
        if len(dims) > 1:
            raise ValueError(f"constraints mix dimensions {sorted(dims)}")

    def __len__(self):
        return len(self.constraints)

    def __iter__(self):
        return iter(self.constraints)

    @property
    def dimension(self) -> Optional[int]:
        return self.constraints[0].expr.dimension if self.constraints else None

    def with_lams(self, lams) -> "ConstraintSet":
        if len(lams) != len(self.constraints):
            raise ValueError("one multiplier per constraint required")
        return ConstraintSet(tuple(
            Constraint(c.expr, float(l), c.target)
            for c, l in zip(self.constraints, lams)))


def combined_potential(cs: ConstraintSet, dimension: Optional[int] = None) -> Expr:
    """The linear combination sum_k lambda_k J_k as a single expression."""
    dim = cs.dimension or dimension
    if dim is None:
        raise ValueError("cannot infer dimension of an empty constraint set")
    root = const(0.0)
    for c in cs:
        if c.lam is None:
            raise ValueError("combined potential needs multipliers on every constraint")
        root = add(root, mul(const(c.lam), c.expr.root))
    return Expr(root, dim)


def _require_normalized(p: Density, tol: float = 1e-8) -> np.ndarray:
    w = quad_weights(p.grid)
    mass = float(np.sum(w * p.values))
    if abs(mass - 1.0) > tol:
        raise ValueError(f"density integrates to {mass}, not 1 within {tol}")
    return w


def _plnp(values: np.ndarray) -> np.ndarray:
    safe = np.where(values < _PLNP_FLOOR, 1.0, values)
    return np.where(values < _PLNP_FLOOR, 0.0, values * np.log(safe))


def entropy_action(p: Density, cs: ConstraintSet) -> float:
    """S[p; J] = -int p ln p - sum_k lambda_k (int J_k p - C_k), trapezoid rule."""
    w = _require_normalized(p)
    s = -float(np.sum(w * _plnp(p.values)))
    for c in cs:
        if c.lam is None or c.target is None:
            raise ValueError("entropy action needs both lambda and target per constraint")
        jk = sample_scalar(c.expr, p.grid).values
        s -= c.lam * (float(np.sum(w * jk * p.values)) - c.target)
    return s


def el_residual(p: Density, cs: ConstraintSet) -> float:
    """Max deviation of -ln p - sum_k lambda_k J_k from its nodewise mean.

    Zero (modulo the ln Z constant) exactly at the maxent solution for cs.
    """
    if np.any(p.values <= 0):
        flat = int(np.flatnonzero(p.values.reshape(-1) <= 0)[0])
        raise ValueError(f"density is non-positive at node {p.grid.node_coords(flat)}")
    r = -np.log(p.values)
    for c in cs:
        if c.lam is None:
            raise ValueError("EL residual needs a multiplier on every constraint")
        r = r - c.lam * sample_scalar(c.expr, p.grid).values
    return float(np.max(np.abs(r - np.mean(r))))


@dataclass(frozen=True)
class FitReport:
    lam: tuple
    moments: tuple
    residual: float
    iterations: int
    converged: bool
    residual_trajectory: tuple = field(default=(), repr=False)
    dual_trajectory: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {"lambda": list(self.lam), "moments": list(self.moments),
                "residual": self.residual, "iterations": self.iterations,
                "converged": self.converged}


def _dual_state(j_samples, lams, weights):
    """Density, ln Z, moments and covariance at the given multipliers."""
    v = np.zeros_like(weights)
    for jk, lam in zip(j_samples, lams):
        v -= lam * jk
    shift = float(np.max(v))
    unnorm = np.exp(v - shift)
    zs = float(np.sum(weights * unnorm))
    if not np.isfinite(zs) or zs <= 0:
        raise NormalizationError(f"partition sum is {zs}")
    p = unnorm / zs
    ln_z = shift + math.log(zs)
    wp = weights * p
    moments = np.array([float(np.sum(wp * jk)) for jk in j_samples])
    k = len(j_samples)
    cov = np.empty((k, k))
    for a in range(k):
        for b in range(a, k):
            cov[a, b] = cov[b, a] = float(np.sum(wp * j_samples[a] * j_samples[b])) \
                - moments[a] * moments[b]
    return p, ln_z, moments, cov


def fit_multipliers(cs: ConstraintSet, grid: GridSpec, tol: float = 1e-10,
                    max_iter: int = 50):
    """Fit multipliers so grid moments hit their targets; damped dual Newton.

    Starts from lambda = 0 (the unconstrained gauge).  Returns
    (FitReport, Density); non-convergence is reported, not raised.  Raises
    SingularHessianError when the constraint covariance is numerically
    singular (linearly dependent constraints).
    """
    if len(cs) == 0:
        raise ValueError("nothing to fit: constraint set is empty")
    targets = np.array([c.target for c in cs], dtype=float)
    if not np.all(np.isfinite(targets)):
        raise ValueError("every constraint needs a finite target in fit mode")
    j_samples = [sample_scalar(c.expr, grid).values for c in cs]
    weights = quad_weights(grid)

    lams = np.zeros(len(cs))
    p, ln_z, moments, cov = _dual_state(j_samples, lams, weights)
    dual = ln_z + float(lams @ targets)
    residuals = [float(np.max(np.abs(moments - targets)))]
    duals = [dual]
    converged = residuals[-1] <= tol
    iterations = 0

    while not converged and iterations < max_iter:
        iterations += 1
        eigvals, eigvecs = np.linalg.eigh(cov)
        if eigvals[-1] <= 0 or eigvals[0] <= 1e-12 * eigvals[-1]:
            if iterations == 1:
                raise SingularHessianError(
                    "constraint covariance is singular on this grid "
                    f"(eigenvalues {eigvals.tolist()}); constraints are linearly "
                    "dependent along the near-null vector", eigvecs[:, 0])
            break  # iteration-driven collapse: an infeasible target, not
            # dependent constraints; surfaces as non-convergence below
        grad = targets - moments
        step = -np.linalg.solve(cov, grad)
        alpha = 1.0
        for _ in range(60):
            trial = lams + alpha * step
            p_t, ln_z_t, moments_t, cov_t = _dual_state(j_samples, trial, weights)
            dual_t = ln_z_t + float(trial @ targets)
            # the ln Z cap keeps the partition constant in double range;
            # infeasible targets stall against it and report non-convergence
            if dual_t <= dual and abs(ln_z_t) <= 700.0:
                break
            alpha *= 0.5
        else:
            break  # no acceptable step: at the minimizer up to rounding
        lams, p, ln_z, moments, cov, dual = trial, p_t, ln_z_t, moments_t, cov_t, dual_t
        residuals.append(float(np.max(np.abs(moments - targets))))
        duals.append(dual)
        converged = residuals[-1] <= tol

    z = math.exp(ln_z)
    density = Density(grid, p, Z=z, provenance="el-built")
    report = FitReport(
        lam=tuple(float(v) for v in lams),
        moments=tuple(float(v) for v in moments),
        residual=residuals[-1],
        iterations=iterations,
        converged=bool(converged),
        residual_trajectory=tuple(residuals),
        dual_trajectory=tuple(duals),
    )
    return report, density


def maxent_density(cs: ConstraintSet, grid: GridSpec) -> Density:
    """Closed-form exp(-sum_k lambda_k J_k)/Z for fixed multipliers."""
    j_samples = [sample_scalar(c.expr, grid).values for c in cs]
    lams = []
    for c in cs:
        if c.lam is None:
            raise ValueError("maxent_density needs a multiplier on every constraint")
        lams.append(c.lam)
    weights = quad_weights(grid)
    if not j_samples:
        j_samples, lams = [np.zeros(grid.shape)], [0.0]
    v = np.zeros(grid.shape)
    for jk, lam in zip(j_samples, lams):
        v -= lam * jk
    shift = float(np.max(v))
    unnorm = np.exp(v - shift)
    zs = float(np.sum(weights * unnorm))
    if not np.isfinite(zs) or zs <= 0:
        raise NormalizationError(f"partition sum is {zs}")
    return Density(grid, unnorm / zs, Z=math.exp(shift) * zs, provenance="el-built")


def gauge_transform(p: Density, cs: ConstraintSet, new_expr: Expr, new_lam: float):
    """Reweight p by exp(-new_lam * J') and extend the constraint list.

    Returns the renormalized density and the constraint set
    cs + (J', lambda', achieved moment).  Constants shift only Z.
    """
    if np.any(p.values < 0):
        raise ValueError("gauge transform needs a non-negative density")
    jp = sample_scalar(new_expr, p.grid).values
    v = -float(new_lam) * jp
    if np.all(v == 0.0):  # identity transformation, exactly
        new_cs = ConstraintSet(cs.constraints + (Constraint(
            new_expr, float(new_lam),
            float(np.sum(quad_weights(p.grid) * jp * p.values))),))
        return Density(p.grid, p.values, Z=p.integrate(),
                       provenance="gauge-transformed"), new_cs
    shift = float(np.max(v))
    unnorm = np.exp(v - shift) * p.values
    weights = quad_weights(p.grid)
    zs = float(np.sum(weights * unnorm))
    if not np.isfinite(zs) or zs <= 0:
        raise NormalizationError(f"gauge-transformed partition sum is {zs}")
    values = unnorm / zs
    achieved = float(np.sum(weights * jp * values))
    new_cs = ConstraintSet(cs.constraints + (Constraint(new_expr, float(new_lam),
                                                        achieved),))
    out = Density(p.grid, values, Z=math.exp(shift) * zs,
                  provenance="gauge-transformed")
    return out, new_cs


@dataclass(frozen=True)
class GaugeInvarianceReport:
    residual_before: float
    residual_after: float
    winner_before: int
    winner_after: int

    @property
    def residual_invariant(self) -> bool:
        return abs(self.residual_before - self.residual_after) <= 1e-8

    @property
    def argmax_invariant(self) -> bool:
        return self.winner_before == self.winner_after


def _perturbed_family(p: Density, count: int, eps: float, seed: int):
    """p itself plus smooth multiplicative perturbations, renormalized."""
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    weights = quad_weights(p.grid)
    family = [p]
    mesh = p.grid.meshgrid()
    for _ in range(count - 1):
        bump = np.zeros(p.grid.shape)
        for m in mesh:
            a = rng.uniform(0.5, 2.0)
            b = rng.uniform(0.0, 2.0 * np.pi)
            bump += np.sin(a * m + b)
        unnorm = p.values * np.exp(eps * bump)
        z = float(np.sum(weights * unnorm))
        family.append(Density(p.grid, unnorm / z, Z=z, provenance=p.provenance))
    return family


def gauge_invariance_check(p_before: Density, cs_before: ConstraintSet,
                           new_expr: Expr, new_lam: float, candidates: int = 5,
                           eps: float = 0.05, seed: int = 7) -> GaugeInvarianceReport:
    """Check the two faces of gauge invariance around a maxent solution.

    ``p_before`` should be the maxent solution for ``cs_before``.  The EL
    residual must be unchanged by the transformation (the residual is measured
    modulo its additive constant, which is all a gauge shift can touch), and
    the action argmax over a perturbed candidate family must pick the same
    member before and after transforming every candidate.
    """
    residual_before = el_residual(p_before, cs_before)
    transformed, cs_after = gauge_transform(p_before, cs_before, new_expr, new_lam)
    residual_after = el_residual(transformed, cs_after)

    family = _perturbed_family(p_before, candidates, eps, seed)
    actions_before = [entropy_action(q, cs_before) for q in family]
    winner_before = int(np.argmax(actions_before))
    actions_after = []
    for q in family:
        q_t, _ = gauge_transform(q, cs_before, new_expr, new_lam)
        actions_after.append(entropy_action(q_t, cs_after))
    winner_after = int(np.argmax(actions_after))
    return GaugeInvarianceReport(residual_before, residual_after,
                                 winner_before, winner_after)
