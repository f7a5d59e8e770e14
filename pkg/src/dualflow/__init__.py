"""Numerical lab for dual metric flows: alternating proximal steps for two
players, energy-dissipation checks and WGAN toy instances."""

__version__ = "0.1.0"

from .errors import (DualFlowError, GridMismatchError, InfeasibleError, OutOfDomainError,
                     ParticleEscapeError, StepFailure, UnsupportedConfigurationError)
from .metric import (Curve, CurvePair, Division, MetricSpace, metric_derivative, upsilon,
                     upsilon_refined, upsilon_x, upsilon_y)
from .spaces import (EmpiricalMeasure, EuclideanSpace, Grid, GridFunctionSpace,
                     GridLipschitzFunction, MeasureSpace, WeightedMeasure, lip_distance,
                     project_lipschitz, w1_distance, w1_distance_lp, w2_distance)
from .functionals import (BilinearToyFunctional, BivariateFunctional, Functional,
                          WganFunctional, check_a1_lower_bound, check_a5_lipschitz_second_arg,
                          check_a7_double_lipschitz, quadratic_energy, slope_estimate_x,
                          slope_estimate_y, zero_functional)
from .schemes import (ProxConfig, Trajectory, compare_schemes, de_giorgi_curve,
                      de_giorgi_interpolate, prox, prox_step_x, prox_step_y, run_dual_flow,
                      run_explicit, tau_sweep)
from .edi import EDIReport, edi_certify_limit, edi_residual
from .composed import (Parametrization, object_flow_step, parameter_flow_step,
                       stationary_criticality_check)
from .instances import (BilinearToyInstance, DiracFitWganInstance, ModeCollapseScenario,
                        mode_collapse_diagnostic, run_bilinear_toy, run_dirac_fit)
