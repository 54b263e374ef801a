"""Spectral Galerkin simulation and large-deviation checks for small-noise SPDEs."""
from .action import (ActionValue, EventSpec, MinimizeOptions, MinimizeResult, action_gradient,
                     action_via_inverse, drift_action, find_skeletons, galerkin_action,
                     galerkin_profile, initial_path, minimize_action, schilder_action)
from .drift import (AffineBoundedDrift, ConstantDrift, MollifyParams, PowerDrift, RegularizedDrift,
                    ShiftedDrift, ZeroDrift, approx_error_scan, cutoff_rho, default_mollify_params,
                    drift_from_config, eval_drift, mollify_BR, regularized_BR)
from .dynamics import (BlowupError, SimConfig, gamma_B, gamma_B_inverse, girsanov_log_weight,
                       integrate_mild, skeleton_flow)
from .noise import NoiseIncrements, PathOnGrid, convolve, sample_increments, tail_estimate
from .rare_event import (RareEventReport, Row, SweepSettings, eps_sweep, estimate_plain,
                         estimate_tilted, exponential_trick_check)
from .spectral import (SpectralOperator, apply_semigroup, fractional_power_norm, from_grid,
                       make_operator, operator_from_eigenvalues, smoothing_ratio, to_grid)

__version__ = "0.1.0"
