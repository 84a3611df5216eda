"""Run configuration: INI-style sections with JSON-encoded values.

One canonical parser.  Every value is parsed with ``json.loads`` (numbers,
lists, objects); bare strings are taken verbatim.  The only environment
override honored anywhere is OUTPUT_DIR.
"""

from __future__ import annotations

import configparser
import json
import os
from dataclasses import dataclass, field
from typing import Optional

from .expr import Expr, parse
from .fields import GridSpec
from .maxent import Constraint, ConstraintSet

__all__ = ["ConfigError", "RunConfig", "load_config", "write_effective_config"]


class ConfigError(ValueError):
    pass


def _value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


@dataclass
class RunConfig:
    dimension: int
    grid: GridSpec
    constraints: ConstraintSet
    fit_mode: bool
    drift_components: Optional[list] = None  # parsed Exprs, overrides -lam grad J
    seed: int = 0
    threads: int = 1
    output_dir: str = "out"
    # solver
    tol: float = 1e-10
    max_iter: int = 50
    path_tol: float = 1e-8
    # dynamics
    dt: float = 1e-3
    total_time: float = 1.0
    diffusion: float = 1.0
    particles: int = 100000
    snapshot_every: Optional[int] = None
    # transport / contour extras
    path: Optional[list] = None
    quadrature: str = "gauss4"
    levels: list = field(default_factory=list)
    contour_step: float = 1e-3
    contour_max_steps: int = 100000
    # certificate tolerances
    tol_curvature: float = 1e-8
    tol_path_spread: float = 1e-8
    tol_fp_residual: float = 1e-4

    def potential(self) -> Expr:
        """Combined fixed-lambda potential sum_k lambda_k J_k."""
        from .maxent import combined_potential

        return combined_potential(self.constraints, self.dimension)


def _parse_constraints(entries, dimension: int):
    constraints = []
    fit_flags = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "expr" not in entry:
            raise ConfigError(f"constraint {i} must be an object with an 'expr' key")
        has_lam = "lambda" in entry
        has_target = "target" in entry
        if has_lam == has_target:
            raise ConfigError(
                f"constraint {i} needs exactly one of 'lambda' (fixed mode) or "
                "'target' (fit mode)")
        expr = parse(str(entry["expr"]), dimension)
        constraints.append(Constraint(
            expr,
            lam=float(entry["lambda"]) if has_lam else None,
            target=float(entry["target"]) if has_target else None))
        fit_flags.append(has_target)
    if fit_flags and any(fit_flags) != all(fit_flags):
        raise ConfigError("constraints mix fixed-lambda and fit modes")
    return ConstraintSet(tuple(constraints)), bool(fit_flags and fit_flags[0])


def load_config(path, output_override: Optional[str] = None,
                seed_override: Optional[int] = None,
                threads_override: Optional[int] = None) -> RunConfig:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")

    def get(section, key, default=None):
        if cp.has_option(section, key):
            return _value(cp.get(section, key))
        return default

    dimension = get("run", "dimension")
    if not isinstance(dimension, int) or not 1 <= dimension <= 3:
        raise ConfigError(f"run.dimension must be an integer in 1..3, got {dimension}")

    lower = get("grid", "lower")
    upper = get("grid", "upper")
    nodes = get("grid", "nodes")
    for name, v in (("lower", lower), ("upper", upper), ("nodes", nodes)):
        if not isinstance(v, list) or len(v) != dimension:
            raise ConfigError(f"grid.{name} must be a list of length {dimension}")
    try:
        grid = GridSpec(tuple(lower), tuple(upper), tuple(nodes))
    except ValueError as err:
        raise ConfigError(str(err)) from None

    entries = get("constraints", "constraints", [])
    if not isinstance(entries, list):
        raise ConfigError("constraints.constraints must be a JSON list")
    try:
        constraints, fit_mode = _parse_constraints(entries, dimension)
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(str(err)) from None

    drift = get("drift", "components")
    drift_exprs = None
    if drift is not None:
        if not isinstance(drift, list) or len(drift) != dimension:
            raise ConfigError(f"drift.components must list {dimension} expressions")
        try:
            drift_exprs = [parse(str(c), dimension) for c in drift]
        except ValueError as err:
            raise ConfigError(str(err)) from None

    cfg = RunConfig(
        dimension=dimension,
        grid=grid,
        constraints=constraints,
        fit_mode=fit_mode,
        drift_components=drift_exprs,
        seed=int(get("run", "seed", 0)),
        threads=int(get("run", "threads", 1)),
        output_dir=str(get("run", "output_dir", "out")),
        tol=float(get("solver", "tol", 1e-10)),
        max_iter=int(get("solver", "max_iter", 50)),
        path_tol=float(get("solver", "path_tol", 1e-8)),
        dt=float(get("dynamics", "dt", 1e-3)),
        total_time=float(get("dynamics", "time", 1.0)),
        diffusion=float(get("dynamics", "diffusion", 1.0)),
        particles=int(get("dynamics", "particles", 100000)),
        snapshot_every=get("dynamics", "snapshot_every"),
        path=get("transport", "path"),
        quadrature=str(get("transport", "quadrature", "gauss4")),
        levels=get("contour", "levels", []),
        contour_step=float(get("contour", "step", 1e-3)),
        contour_max_steps=int(get("contour", "max_steps", 100000)),
        tol_curvature=float(get("certificate", "tol_curvature", 1e-8)),
        tol_path_spread=float(get("certificate", "tol_path_spread", 1e-8)),
        tol_fp_residual=float(get("certificate", "tol_fp_residual", 1e-4)),
    )
    env_out = os.environ.get("OUTPUT_DIR")
    if env_out:
        cfg.output_dir = env_out
    if output_override:
        cfg.output_dir = output_override
    if seed_override is not None:
        cfg.seed = int(seed_override)
    if threads_override is not None:
        cfg.threads = int(threads_override)
    return cfg


def write_effective_config(cfg: RunConfig, path) -> None:
    """Echo the fully resolved config; re-running from it reproduces outputs."""
    from .fields import format_float

    cp = configparser.ConfigParser()
    cp["run"] = {
        "dimension": str(cfg.dimension),
        "seed": str(cfg.seed),
        "threads": str(cfg.threads),
        "output_dir": json.dumps(cfg.output_dir),
    }
    cp["grid"] = {
        "lower": json.dumps([float(v) for v in cfg.grid.lower]),
        "upper": json.dumps([float(v) for v in cfg.grid.upper]),
        "nodes": json.dumps([int(v) for v in cfg.grid.nodes]),
    }
    entries = []
    for c in cfg.constraints:
        entry = {"expr": str(c.expr)}
        if c.lam is not None and not cfg.fit_mode:
            entry["lambda"] = c.lam
        if c.target is not None and cfg.fit_mode:
            entry["target"] = c.target
        entries.append(entry)
    cp["constraints"] = {"constraints": json.dumps(entries)}
    if cfg.drift_components is not None:
        cp["drift"] = {"components": json.dumps([str(c) for c in cfg.drift_components])}
    cp["solver"] = {"tol": format_float(cfg.tol), "max_iter": str(cfg.max_iter),
                    "path_tol": format_float(cfg.path_tol)}
    cp["dynamics"] = {
        "dt": format_float(cfg.dt),
        "time": format_float(cfg.total_time),
        "diffusion": format_float(cfg.diffusion),
        "particles": str(cfg.particles),
    }
    if cfg.snapshot_every is not None:
        cp["dynamics"]["snapshot_every"] = str(cfg.snapshot_every)
    if cfg.path is not None:
        cp["transport"] = {"path": json.dumps(cfg.path),
                           "quadrature": json.dumps(cfg.quadrature)}
    if cfg.levels:
        cp["contour"] = {"levels": json.dumps(cfg.levels),
                         "step": format_float(cfg.contour_step),
                         "max_steps": str(cfg.contour_max_steps)}
    cp["certificate"] = {
        "tol_curvature": format_float(cfg.tol_curvature),
        "tol_path_spread": format_float(cfg.tol_path_spread),
        "tol_fp_residual": format_float(cfg.tol_fp_residual),
    }
    with open(path, "w") as fh:
        cp.write(fh)
