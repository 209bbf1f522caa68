"""SOC estimation with sensor-bias augmentation for a 2-RC cell model."""

from .augmented import VARIANTS, build_model
from .ecm import (
    KOKAM_OCV,
    KOKAM_PARAMS,
    ECMParams,
    ECMState,
    ModelSpec,
    OCVPolynomial,
    builtin_parameters,
    discretize_step,
    ocv_eval,
    simulate,
)
from .filters import FilterConfig, FilterState, filter_step
from .harness import Scenario, named_scenario, rmse, run_batch, run_scenario, synthesize_cycle
from .observability import assemble_codistribution, condition_sweep, lie_gradient, rank_test

__version__ = "0.1.0"
