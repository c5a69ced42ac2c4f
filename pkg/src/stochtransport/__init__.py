"""Numerical lab for the stochastic transport equation and regularization by noise."""

__version__ = "0.1.0"

from .drift import (DRIFT_CATALOG, DriftField, MixedNormSpec, MollifierFamily,
                    coalescing_drift, constant_drift, krylov_rockner_check, linear_drift,
                    make_drift, mixed_norm, mixed_norm_distance, mollify_drift, zero_drift)
from .flow import (FlowEnsemble, NoiseEnsemble, coalescence_metric, flow_gradient_fd,
                   flow_moment_estimates, integrate_flow, invert_flow_residual, sample_noise)
from .grids import SpatialGrid, interpolate
from .transport import (IC_CATALOG, InitialConditionSpec, ScalarFieldGrid,
                        make_initial_condition, representation_series,
                        representation_solution, weak_form_residual)
from .zvonkin import (PDEGridSpec, ZvonkinSolution, conjugacy_residual, gamma_apply,
                      gamma_invert, gradient_bound_sweep, load_solution,
                      quadratic_variation_estimate, save_solution, solve_backward_pde)
from .diagnostics import (energy_envelope_check, holder_constant, holder_estimate,
                          interpolation_check, regularity_report, sobolev_w1r_norm)
