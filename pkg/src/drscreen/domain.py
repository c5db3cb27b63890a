"""Canonical domain vocabulary: lesion taxonomy, grade scale, boxes, detections, records.

Every other module speaks in these types. All of them are immutable values and
safe to share between threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum

from .errors import DomainError


class LesionClass(IntEnum):
    """The seven retinal lesion categories, with fixed ids 0-6.

    Datasets may restrict themselves to a subset of classes, but ids are never
    renumbered: annotation files, feature indices and model files all rely on
    this numbering staying put.
    """

    MICROANEURYSM = 0
    HEMORRHAGE = 1
    HARD_EXUDATE = 2
    SOFT_EXUDATE = 3
    IRMA = 4
    VENOUS_BEADING = 5
    PROLIFERATIVE = 6

    @property
    def short_name(self) -> str:
        return _SHORT_NAMES[self]


_SHORT_NAMES = {
    LesionClass.MICROANEURYSM: "ma",
    LesionClass.HEMORRHAGE: "hem",
    LesionClass.HARD_EXUDATE: "he",
    LesionClass.SOFT_EXUDATE: "se",
    LesionClass.IRMA: "irma",
    LesionClass.VENOUS_BEADING: "vb",
    LesionClass.PROLIFERATIVE: "prolif",
}

ALL_LESION_CLASSES: tuple[LesionClass, ...] = tuple(LesionClass)


def lesion_from_int(v: int) -> LesionClass:
    try:
        return LesionClass(v)
    except ValueError:
        raise DomainError(f"invalid lesion class id {v!r}: expected 0..6") from None


class DrGrade(IntEnum):
    """Diabetic-retinopathy severity grade, 0 (none) through 4 (proliferative)."""

    NO_DR = 0
    MILD = 1
    MODERATE = 2
    SEVERE = 3
    PROLIFERATIVE_DR = 4

    @property
    def label(self) -> str:
        return _GRADE_LABELS[self]


_GRADE_LABELS = {
    DrGrade.NO_DR: "No DR",
    DrGrade.MILD: "Mild DR",
    DrGrade.MODERATE: "Moderate DR",
    DrGrade.SEVERE: "Severe DR",
    DrGrade.PROLIFERATIVE_DR: "Proliferative DR",
}

ALL_GRADES: tuple[DrGrade, ...] = tuple(DrGrade)


def grade_from_int(v: int) -> DrGrade:
    """Map an integer grade label to its DrGrade; 0..4 only."""
    try:
        return DrGrade(v)
    except ValueError:
        raise DomainError(f"invalid DR grade {v!r}: expected 0..4") from None


def severity_max(a: DrGrade, b: DrGrade) -> DrGrade:
    """The more severe of two grades."""
    return a if a >= b else b


class Laterality(Enum):
    LEFT = "left"
    RIGHT = "right"
    UNKNOWN = "unknown"


def laterality_from_image_id(image_id: str) -> Laterality:
    # Kaggle convention: "<subject>_left" / "<subject>_right"; anything else
    # carries no laterality information.
    if image_id.endswith("_left"):
        return Laterality.LEFT
    if image_id.endswith("_right"):
        return Laterality.RIGHT
    return Laterality.UNKNOWN


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized center format.

    All fields are fractions of image width/height, so boxes are resolution
    independent. The center must lie inside the unit square and sides must be
    positive; a box may overhang the image edge (its clip to [0,1]^2 always has
    positive area given these constraints).
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise DomainError(f"box center ({self.cx}, {self.cy}) outside [0,1]^2")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise DomainError(f"box size ({self.w}, {self.h}) outside (0,1]")

    def corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2) corner coordinates, unclipped."""
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    @staticmethod
    def from_corners(x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return BBox((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Detection:
    """A located lesion: class + box + confidence.

    Ground-truth annotations use confidence exactly 1.0; detector output uses
    whatever the detector reports.
    """

    lesion_class: LesionClass
    box: BBox
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise DomainError(f"confidence {self.confidence} outside [0,1]")


@dataclass(frozen=True)
class GradedRecord:
    """One graded image: opaque id, DR grade, and eye laterality."""

    image_id: str
    grade: DrGrade
    laterality: Laterality = Laterality.UNKNOWN

    def __post_init__(self):
        if not self.image_id:
            raise DomainError("image_id must be non-empty")
