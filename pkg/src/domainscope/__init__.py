"""Underwater domain labeling and domain-stratified detection evaluation."""

__version__ = "0.1.0"

from .calibration import CalibrationProfile, NormEntry, Thresholds
from .labels import CATEGORIES, CATEGORY_LABELS, DomainLabelRecord
from .pipeline import label_image, run_job, LabelingJob
from .evaluation import build_report, compute_map, failure_rates, stratify

__all__ = [
    "CalibrationProfile", "NormEntry", "Thresholds",
    "CATEGORIES", "CATEGORY_LABELS", "DomainLabelRecord",
    "label_image", "run_job", "LabelingJob",
    "build_report", "compute_map", "failure_rates", "stratify",
]
