"""Finite metric two-level measure spaces: distances, test functionals and nested coalescents."""

from .core import (
    AtomicMeasure,
    FiniteMetricSpace,
    M2MSpace,
    TwoLevelMeasure,
    are_equivalent,
    effective_support,
    mass,
    moment_measure,
    normalize,
    pushforward,
    random_m2m,
    restrict_to_support,
    two_level_pushforward,
    validate_space,
)
from .functionals import TestFunctionalSpec, eval_tf, monte_carlo_tf
from .metrics import d2gp_bounds, prokhorov, two_level_prokhorov

__version__ = "0.1.0"
