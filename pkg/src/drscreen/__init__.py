"""Diabetic-retinopathy screening pipeline.

Lesion detections (from a pluggable external detector or a deterministic test
oracle) are turned into per-class count features and graded 0-4 by a
from-scratch one-vs-one SMO SVM; an HTTP service and a CLI expose the result.
"""

__version__ = "0.1.0"

from .domain import (
    ALL_GRADES,
    ALL_LESION_CLASSES,
    BBox,
    Detection,
    DrGrade,
    GradedRecord,
    Laterality,
    LesionClass,
    grade_from_int,
    severity_max,
)

__all__ = [
    "ALL_GRADES",
    "ALL_LESION_CLASSES",
    "BBox",
    "Detection",
    "DrGrade",
    "GradedRecord",
    "Laterality",
    "LesionClass",
    "grade_from_int",
    "severity_max",
    "__version__",
]
