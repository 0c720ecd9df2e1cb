"""Class-level forgetting for trained classifiers under limited data.

Pipeline: train (or load) an original model, identify the parameters the
restricted classes rely on, optimize only those with negated excluded-class
cross-entropy plus remaining-class cross-entropy and logit-sliced
distillation, then verify with the three-metric protocol (FA_e, FPA_e,
CA_ne) against the reference baselines.
"""

__version__ = "0.1.0"

from .data import ClassPartition, LimitedSubsetSpec, build_limited_subset
from .erwp import LossBreakdown, ModelPair, UnlearnConfig, erwp_run
from .metrics import GateThresholds, MetricsReport, evaluate_protocol
from .relevance import RelevanceMask, RelevanceSearchConfig

__all__ = [
    "ClassPartition", "LimitedSubsetSpec", "build_limited_subset",
    "LossBreakdown", "ModelPair", "UnlearnConfig", "erwp_run",
    "GateThresholds", "MetricsReport", "evaluate_protocol",
    "RelevanceMask", "RelevanceSearchConfig",
    "__version__",
]
