"""Batch front end: every pipeline as a subcommand with deterministic outputs.

Exit codes: 0 success, 1 config or expression errors, 2 solver failures
(non-convergence, singular Hessian, stability violations), 3 certificate not
solvable / transport not path-independent.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import ConfigError, RunConfig, load_config, write_effective_config
from .dynamics import (CertificateTolerances, FPConfig, NegativeDensityError,
                       ParticleEscapeError, StabilityError, certify_stationarity,
                       evolve_fp, free_energy, langevin_sample, stationary_residual)
from .expr import DomainError, ParseError
from .fields import (NormalizationError, Polyline, dump_json, l1_distance,
                     uniform_density, write_density, write_polylines_csv,
                     write_scalar_csv)
from .geometry import CriticalPointError, SeedNotFoundError, trace_level_set
from .maxent import SingularHessianError, fit_multipliers
from .transport import (ComponentSource, GradientSource,
                        build_density_by_transport, parallel_transport,
                        path_independence_check)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_CERTIFICATE = 3


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _fixed_potential(cfg: RunConfig):
    if cfg.fit_mode:
        raise ConfigError("this command needs fixed-lambda constraints, "
                          "not fit-mode targets")
    if len(cfg.constraints) == 0:
        raise ConfigError("this command needs at least one constraint expression")
    return cfg.potential()


def _drift_exprs(cfg: RunConfig):
    if cfg.drift_components is not None:
        return list(cfg.drift_components)
    fp = FPConfig(potential=_fixed_potential(cfg), lam=1.0,
                  diffusion=cfg.diffusion, dt=cfg.dt, total_time=cfg.total_time)
    return fp.drift_exprs()


def cmd_fit(cfg: RunConfig, outdir: str) -> int:
    if not cfg.fit_mode or len(cfg.constraints) == 0:
        return _fail("fit needs constraints with targets", EXIT_CONFIG)
    try:
        report, density = fit_multipliers(cfg.constraints, cfg.grid,
                                          tol=cfg.tol, max_iter=cfg.max_iter)
    except SingularHessianError as err:
        return _fail(f"singular Hessian: {err} "
                     f"(near-null vector {err.null_vector.tolist()})", EXIT_SOLVER)
    dump_json(report.to_dict(), os.path.join(outdir, "fit_report.json"))
    write_density(density, os.path.join(outdir, "density.csv"),
                  os.path.join(outdir, "density.json"))
    if not report.converged:
        print(f"fit did not converge in {report.iterations} iterations; "
              f"residual trajectory {list(report.residual_trajectory)}",
              file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_transport(cfg: RunConfig, outdir: str) -> int:
    if cfg.path is None or len(cfg.path) < 2:
        return _fail("transport needs [transport] path = [[...], [...]] "
                     "with at least 2 vertices", EXIT_CONFIG)
    verts = np.asarray(cfg.path, dtype=float)
    if verts.ndim != 2 or verts.shape[1] != cfg.dimension:
        return _fail(f"path vertices must have dimension {cfg.dimension}",
                     EXIT_CONFIG)
    path = Polyline(verts)
    if cfg.drift_components is not None:
        from .expr import Expr, neg

        source = ComponentSource(
            [Expr(neg(c.root), c.dimension) for c in cfg.drift_components])
    else:
        source = GradientSource(_fixed_potential(cfg), 1.0)
    result = parallel_transport(source, path, method=cfg.quadrature)
    spread = path_independence_check(source, verts[0], verts[-1], k=8,
                                     box=cfg.grid, seed=cfg.seed)
    independent = spread <= cfg.path_tol
    dump_json({
        "integral": result.integral,
        "factor": result.factor,
        "partials": [float(v) for v in result.partials],
        "pathSpread": spread,
        "pathSpreadTolerance": cfg.path_tol,
        "pathIndependent": independent,
    }, os.path.join(outdir, "transport.json"))
    return EXIT_OK if independent else EXIT_CERTIFICATE


def cmd_evolve(cfg: RunConfig, outdir: str) -> int:
    potential = None
    if cfg.drift_components is not None:
        fp = FPConfig(drift_components=tuple(cfg.drift_components),
                      diffusion=cfg.diffusion, dt=cfg.dt,
                      total_time=cfg.total_time)
    else:
        potential = _fixed_potential(cfg)
        fp = FPConfig(potential=potential, lam=1.0, diffusion=cfg.diffusion,
                      dt=cfg.dt, total_time=cfg.total_time)
    p0 = uniform_density(cfg.grid)
    trajectory = evolve_fp(p0, fp, cfg.grid, snapshot_every=cfg.snapshot_every)
    times, masses, energies = [], [], []
    for t, dens in trajectory:
        write_scalar_csv(dens, os.path.join(outdir, f"p_t{t:.6f}.csv"))
        times.append(t)
        masses.append(dens.integrate())
        if potential is not None:
            energies.append(free_energy(dens, potential, 1.0))
    final = trajectory[-1][1]
    summary = {
        "times": times,
        "mass": masses,
        "l1_to_final": [l1_distance(d, final) for _, d in trajectory],
        "stationary_residual": stationary_residual(final, fp),
    }
    if energies:
        summary["free_energy"] = energies
    dump_json(summary, os.path.join(outdir, "convergence.json"))
    return EXIT_OK


def cmd_sample(cfg: RunConfig, outdir: str) -> int:
    potential = _fixed_potential(cfg)
    positions, hist = langevin_sample(
        potential, 1.0, cfg.diffusion, cfg.particles, cfg.dt, cfg.total_time,
        seed=cfg.seed, grid=cfg.grid, threads=cfg.threads)
    write_scalar_csv(hist, os.path.join(outdir, "histogram.csv"))
    target = build_density_by_transport(potential, 1.0, cfg.grid)
    dump_json({
        "particles": cfg.particles,
        "dt": cfg.dt,
        "time": cfg.total_time,
        "seed": cfg.seed,
        "diffusion": cfg.diffusion,
        "l1_to_transport_density": l1_distance(hist, target),
    }, os.path.join(outdir, "sample.json"))
    return EXIT_OK


def cmd_certify(cfg: RunConfig, outdir: str) -> int:
    drift = _drift_exprs(cfg)
    tols = CertificateTolerances(curvature=cfg.tol_curvature,
                                 path_spread=cfg.tol_path_spread,
                                 fp_residual=cfg.tol_fp_residual)
    cert = certify_stationarity(drift, 1.0, cfg.grid, tols,
                                diffusion=cfg.diffusion, seed=cfg.seed)
    dump_json(cert.to_dict(), os.path.join(outdir, "certificate.json"))
    return EXIT_OK if cert.solvable else EXIT_CERTIFICATE


def cmd_contour(cfg: RunConfig, outdir: str) -> int:
    if not cfg.levels:
        return _fail("contour needs [contour] levels = [...]", EXIT_CONFIG)
    potential = _fixed_potential(cfg)
    for level in cfg.levels:
        lines = trace_level_set(potential, cfg.grid, float(level),
                                cfg.contour_step, cfg.contour_max_steps)
        write_polylines_csv(lines, os.path.join(outdir, f"contour_{level}.csv"))
    return EXIT_OK


_COMMANDS = {
    "fit": cmd_fit,
    "transport": cmd_transport,
    "evolve": cmd_evolve,
    "sample": cmd_sample,
    "certify": cmd_certify,
    "contour": cmd_contour,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="entroport",
        description="maxent / parallel-transport / Fokker-Planck pipelines")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="INI config file")
    parser.add_argument("--output", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (default 1: bit-reproducible)")
    parser.add_argument("--seed", type=int, default=None, help="RNG seed")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, output_override=args.output,
                          seed_override=args.seed,
                          threads_override=args.threads)
    except (ConfigError, ParseError) as err:
        return _fail(str(err), EXIT_CONFIG)

    outdir = cfg.output_dir
    os.makedirs(outdir, exist_ok=True)
    write_effective_config(cfg, os.path.join(outdir, "effective.cfg"))

    try:
        return _COMMANDS[args.command](cfg, outdir)
    except (ConfigError, ParseError) as err:
        return _fail(str(err), EXIT_CONFIG)
    except (StabilityError, NormalizationError, NegativeDensityError,
            ParticleEscapeError, SeedNotFoundError, CriticalPointError,
            SingularHessianError, DomainError) as err:
        return _fail(str(err), EXIT_SOLVER)


if __name__ == "__main__":
    sys.exit(main())
