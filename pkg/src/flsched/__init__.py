"""Straggler-aware federated learning simulator with jointly optimized
per-round deadlines and batch scaling, plus layer-wise bias-corrected
aggregation and desk-scale verification suites."""

from .cost_model import AnalysisParams, convergence_bound, term_B, term_C
from .fl_engine import (
    LayeredModel,
    PartialUpdate,
    RoundOutcome,
    aggregate_drop,
    aggregate_fedavg,
    aggregate_layerwise,
)
from .scheduler import ScheduleSearchSpec, optimize_schedule
from .system_model import (
    ClientProfile,
    DepthSample,
    Schedule,
    batch_size,
    exact_no_contributor_prob,
    no_contributor_prob_bound,
    poisson_rate,
    sample_depth,
)

__all__ = [
    "AnalysisParams",
    "ClientProfile",
    "DepthSample",
    "LayeredModel",
    "PartialUpdate",
    "RoundOutcome",
    "Schedule",
    "ScheduleSearchSpec",
    "aggregate_drop",
    "aggregate_fedavg",
    "aggregate_layerwise",
    "batch_size",
    "convergence_bound",
    "exact_no_contributor_prob",
    "no_contributor_prob_bound",
    "optimize_schedule",
    "poisson_rate",
    "sample_depth",
    "term_B",
    "term_C",
]

__version__ = "0.1.0"
