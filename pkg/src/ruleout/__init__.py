"""Rule-out screening workflow simulation and evaluation."""

__version__ = "0.1.0"

from .cohort import (  # noqa: E402
    ExamRecord, FollowUpEvent, OutcomeLabel, ReaderOpinion, ValidationError,
    assign_breast_label, ground_truth, operative_assessment, split_patients,
)
from .calibration import roc_curve, select_threshold  # noqa: E402
from .synth import SynthConfig, generate  # noqa: E402
from .workflow import apply_ruleout, normalize_flow, simulate_cohort  # noqa: E402

__all__ = [
    "ExamRecord", "FollowUpEvent", "OutcomeLabel", "ReaderOpinion", "ValidationError",
    "assign_breast_label", "ground_truth", "operative_assessment", "split_patients",
    "roc_curve", "select_threshold", "SynthConfig", "generate", "apply_ruleout",
    "normalize_flow", "simulate_cohort",
]
