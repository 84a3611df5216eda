"""entroport: constrained maximum entropy as parallel transport.

Define a constraint potential, fit multipliers to moment targets, build the
stationary density by transporting along the flat connection it generates,
and cross-check the result against Fokker-Planck evolution and Langevin
sampling.
"""

from .expr import DomainError, Expr, ParseError, differentiate, evaluate, parse, \
    to_source
from .fields import (CovectorField, Density, GridError, GridSpec,
                     NormalizationError, Polyline, ScalarField, l1_distance,
                     quad_weights, uniform_density)
from .geometry import (CriticalPointError, CurvatureReport, SeedNotFoundError,
                       connection_form, curvature, level_deviation, sample_scalar,
                       split_field, trace_level_set)
from .transport import (ComponentSource, GradientSource, TransportResult,
                        build_density_by_transport, build_density_from_source,
                        concatenate_paths, line_integral, parallel_transport,
                        path_independence_check)
from .maxent import (Constraint, ConstraintSet, FitReport, GaugeInvarianceReport,
                     SingularHessianError, combined_potential, el_residual,
                     entropy_action, fit_multipliers, gauge_invariance_check,
                     gauge_transform, maxent_density)
from .dynamics import (CertificateTolerances, FPConfig, NegativeDensityError,
                       ParticleEscapeError, StabilityError,
                       StationarityCertificate, certify_stationarity, evolve_fp,
                       free_energy, langevin_sample, stationary_residual)

__version__ = "0.1.0"
