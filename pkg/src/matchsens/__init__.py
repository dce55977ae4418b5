"""Sensitivity analysis for matched observational studies with a binary
unmeasured confounder.

The model treats the confounder ``U`` as a missing binary covariate,
fits it by EM for fixed sensitivity parameters ``(p, lam, delta)``, and
builds block-bootstrap intervals for the treatment effect.
"""

from .errors import (
    DataError,
    MatchSensError,
    NumericalError,
)
from .model import (
    CovariateMeta,
    MatchedDataset,
    ModelParams,
    Schema,
    SensitivityParams,
    Subject,
    load_dataset,
    standardize,
    write_dataset,
)
from .em import (
    FitResult,
    em_fit,
    m_step_outcome,
    m_step_treatment,
    observed_loglik,
    posterior_weight,
    posterior_weights,
)
from .inference import (
    BootConfig,
    BoundaryPoint,
    IntervalEstimate,
    block_bootstrap_ci,
    boundary_search,
    is_significant,
)

__version__ = "0.1.0"
