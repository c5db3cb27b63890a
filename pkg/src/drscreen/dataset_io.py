"""Dataset artifacts: label tables, annotation files, splits, synthetic data.

File formats
------------
Label table      UTF-8 CSV with header columns ``image,level``.
Annotation file  one ``<image_id>.txt`` per image, one box per line:
                 ``class cx cy w h`` (ground truth) or ``class cx cy w h conf``
                 (detector output); space-separated decimals written with six
                 fractional digits, LF line endings.
Manifest         a JSON document naming the image dir, label table, annotation
                 dir and active class subset, with paths relative to itself.

The synthetic generator plants non-overlapping lesion ellipses on a dark
fundus disc following a fixed count rule table per grade, so the grade of
every generated image is recoverable from its own annotation counts. It
exists to make the whole pipeline testable at desk scale without real fundus
photographs or a trained detector.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .domain import (
    ALL_LESION_CLASSES,
    BBox,
    Detection,
    DrGrade,
    GradedRecord,
    LesionClass,
    grade_from_int,
    laterality_from_image_id,
)
from .errors import DomainError, GenerationError, LoadError, ParseError, SplitError

MANIFEST_NAME = "manifest.json"
_MANIFEST_FORMAT = "drscreen-dataset"


@dataclass(frozen=True)
class Dataset:
    """Graded records plus ground-truth annotations and the image directory."""

    records: tuple[GradedRecord, ...]
    annotations: Mapping[str, tuple[Detection, ...]]
    image_dir: Path
    class_subset: tuple[LesionClass, ...] = ALL_LESION_CLASSES

    def __post_init__(self):
        known = {r.image_id for r in self.records}
        orphans = set(self.annotations) - known
        if orphans:
            raise DomainError(
                f"annotations reference unknown image ids: {sorted(orphans)[:5]}"
            )

    def image_path(self, image_id: str) -> Path:
        return Path(self.image_dir) / f"{image_id}.png"


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    seed: int = 42
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise DomainError(f"test_fraction {self.test_fraction} outside (0,1)")


# --- label tables -----------------------------------------------------------


def load_labels(path) -> list[GradedRecord]:
    """Read the ``image,level`` table; raises LoadError with the line number."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LoadError(f"cannot read label table {path}: {exc}") from None
    reader = csv.reader(text.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise LoadError(f"{path}: empty label table") from None
    header = [h.strip() for h in header]
    if "image" not in header or "level" not in header:
        raise LoadError(f"{path}: header must contain 'image' and 'level' columns")
    i_img, i_lvl = header.index("image"), header.index("level")

    records: list[GradedRecord] = []
    seen: set[str] = set()
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) <= max(i_img, i_lvl):
            raise LoadError(f"{path}, line {lineno}: expected {len(header)} columns")
        image_id = row[i_img].strip()
        if not image_id:
            raise LoadError(f"{path}, line {lineno}: empty image id")
        if image_id in seen:
            raise LoadError(f"{path}, line {lineno}: duplicate image id {image_id!r}")
        seen.add(image_id)
        try:
            grade = grade_from_int(int(row[i_lvl]))
        except (ValueError, DomainError) as exc:
            raise LoadError(f"{path}, line {lineno}: bad level: {exc}") from None
        records.append(
            GradedRecord(image_id, grade, laterality_from_image_id(image_id))
        )
    return records


def write_labels(records: Sequence[GradedRecord], path) -> None:
    lines = ["image,level"] + [f"{r.image_id},{int(r.grade)}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- annotation files -------------------------------------------------------


def read_annotation_file(path, image_id: str | None = None) -> list[Detection]:
    """Parse one detection per line; 5-field lines get confidence 1.0."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read annotation file: {exc}", path=path) from None
    detections: list[Detection] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) not in (5, 6):
            raise ParseError(
                f"expected 5 or 6 fields, got {len(fields)}", path=path, line=lineno
            )
        try:
            class_id = int(fields[0])
            values = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise ParseError(str(exc), path=path, line=lineno) from None
        if not 0 <= class_id <= 6:
            raise ParseError(f"class id {class_id} outside 0..6", path=path, line=lineno)
        confidence = values[4] if len(values) == 5 else 1.0
        if not 0.0 <= confidence <= 1.0:
            raise ParseError(
                f"confidence {confidence} outside [0,1]", path=path, line=lineno
            )
        try:
            box = BBox(*values[:4])
            det = Detection(LesionClass(class_id), box, confidence)
        except DomainError as exc:
            raise ParseError(str(exc), path=path, line=lineno) from None
        detections.append(det)
    return detections


def write_annotation_file(
    detections: Iterable[Detection], path, include_confidence: bool = False
) -> None:
    """Write detections in file-exchange format; six fractional digits."""
    lines = []
    for det in detections:
        b = det.box
        line = f"{int(det.lesion_class)} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}"
        if include_confidence:
            line += f" {det.confidence:.6f}"
        lines.append(line)
    Path(path).write_text("".join(f"{l}\n" for l in lines), encoding="utf-8")


# --- splits -----------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(
    records: Sequence[GradedRecord], spec: SplitSpec
) -> tuple[list[GradedRecord], list[GradedRecord]]:
    """Deterministic train/test partition, stratified by grade when asked.

    Shuffling uses NumPy's PCG64 generator seeded with spec.seed, so the same
    seed reproduces the same partition anywhere. In stratified mode each grade
    contributes round(n_c * test_fraction) records to the test side.
    """
    if not records:
        raise SplitError("cannot split an empty record list")
    rng = np.random.Generator(np.random.PCG64(spec.seed))

    if not spec.stratified:
        order = rng.permutation(len(records))
        n_test = _round_half_up(len(records) * spec.test_fraction)
        test_idx = set(int(i) for i in order[:n_test])
        train = [r for i, r in enumerate(records) if i not in test_idx]
        test = [r for i, r in enumerate(records) if i in test_idx]
        return train, test

    by_grade: dict[DrGrade, list[int]] = {}
    for i, r in enumerate(records):
        by_grade.setdefault(r.grade, []).append(i)

    test_idx: set[int] = set()
    for grade in sorted(by_grade):
        idx = by_grade[grade]
        n_test = _round_half_up(len(idx) * spec.test_fraction)
        if n_test == 0 or n_test == len(idx):
            raise SplitError(
                f"grade {grade.name} has {len(idx)} records: cannot place at least "
                f"one in both partitions at test_fraction {spec.test_fraction}"
            )
        order = rng.permutation(len(idx))
        test_idx.update(idx[int(i)] for i in order[:n_test])
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return train, test


# --- manifest ---------------------------------------------------------------


def save_manifest(
    path,
    image_dir: str = "images",
    labels: str = "labels.csv",
    annotation_dir: str = "annotations",
    class_subset: Sequence[LesionClass] = ALL_LESION_CLASSES,
) -> Path:
    doc = {
        "format": _MANIFEST_FORMAT,
        "schema_version": 1,
        "image_dir": image_dir,
        "labels": labels,
        "annotation_dir": annotation_dir,
        "class_subset": [int(c) for c in class_subset],
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def load_dataset(manifest_path) -> Dataset:
    """Load records and ground-truth annotations described by a manifest."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read manifest {manifest_path}: {exc}") from None
    if doc.get("format") != _MANIFEST_FORMAT:
        raise LoadError(f"{manifest_path}: not a {_MANIFEST_FORMAT} manifest")
    base = manifest_path.parent
    records = load_labels(base / doc["labels"])
    ann_dir = base / doc["annotation_dir"]
    annotations: dict[str, tuple[Detection, ...]] = {}
    for r in records:
        ann_path = ann_dir / f"{r.image_id}.txt"
        if ann_path.exists():
            annotations[r.image_id] = tuple(read_annotation_file(ann_path, r.image_id))
    try:
        class_subset = tuple(LesionClass(int(v)) for v in doc["class_subset"])
    except (KeyError, ValueError) as exc:
        raise LoadError(f"{manifest_path}: bad class_subset: {exc}") from None
    return Dataset(
        records=tuple(records),
        annotations=annotations,
        image_dir=base / doc["image_dir"],
        class_subset=class_subset,
    )


# --- synthetic dataset ------------------------------------------------------

# Count rule table: the lesion mix drawn for each grade. The inverse map
# (grade_from_counts) is total on these ranges, which is what makes the
# generated data learnable and lets tests recover every label from counts.
#   0: nothing
#   1: 1-5 microaneurysms only
#   2: 3-10 MA, 1-5 hemorrhages, 0-5 hard and 0-5 soft exudates
#   3: grade-2 mix but >=5 hemorrhages plus at least one IRMA or venous beading
#   4: any of the above plus 1-3 proliferative lesions

_SIZE_RANGES: dict[LesionClass, tuple[float, float]] = {
    LesionClass.MICROANEURYSM: (0.020, 0.035),
    LesionClass.HEMORRHAGE: (0.035, 0.060),
    LesionClass.HARD_EXUDATE: (0.030, 0.050),
    LesionClass.SOFT_EXUDATE: (0.035, 0.060),
    LesionClass.IRMA: (0.050, 0.080),
    LesionClass.VENOUS_BEADING: (0.050, 0.090),
    LesionClass.PROLIFERATIVE: (0.070, 0.120),
}

_COLORS: dict[LesionClass, tuple[int, int, int]] = {
    LesionClass.MICROANEURYSM: (186, 36, 48),
    LesionClass.HEMORRHAGE: (120, 12, 22),
    LesionClass.HARD_EXUDATE: (235, 218, 118),
    LesionClass.SOFT_EXUDATE: (238, 238, 226),
    LesionClass.IRMA: (152, 62, 158),
    LesionClass.VENOUS_BEADING: (58, 140, 148),
    LesionClass.PROLIFERATIVE: (70, 170, 80),
}

_FUNDUS_RGB = (112, 48, 28)
_FUNDUS_RADIUS = 0.47


def draw_lesion_counts(grade: DrGrade, rng: np.random.Generator) -> dict[LesionClass, int]:
    counts = {cls: 0 for cls in ALL_LESION_CLASSES}
    if grade == DrGrade.NO_DR:
        return counts
    if grade == DrGrade.MILD:
        counts[LesionClass.MICROANEURYSM] = int(rng.integers(1, 6))
        return counts
    if grade == DrGrade.PROLIFERATIVE_DR:
        base = DrGrade(int(rng.integers(0, 4)))
        counts = draw_lesion_counts(base, rng)
        counts[LesionClass.PROLIFERATIVE] = int(rng.integers(1, 4))
        return counts
    counts[LesionClass.MICROANEURYSM] = int(rng.integers(3, 11))
    counts[LesionClass.HARD_EXUDATE] = int(rng.integers(0, 6))
    counts[LesionClass.SOFT_EXUDATE] = int(rng.integers(0, 6))
    if grade == DrGrade.MODERATE:
        counts[LesionClass.HEMORRHAGE] = int(rng.integers(1, 6))
    else:  # SEVERE
        counts[LesionClass.HEMORRHAGE] = int(rng.integers(5, 11))
        irma = int(rng.integers(0, 4))
        vb = int(rng.integers(1, 4)) if irma == 0 else int(rng.integers(0, 4))
        counts[LesionClass.IRMA] = irma
        counts[LesionClass.VENOUS_BEADING] = vb
    return counts


def grade_from_counts(counts: Mapping[LesionClass, float] | Sequence[float]) -> DrGrade:
    """Invert the rule table: the grade implied by a lesion count vector."""
    if not isinstance(counts, Mapping):
        counts = {cls: counts[int(cls)] for cls in ALL_LESION_CLASSES}
    if counts.get(LesionClass.PROLIFERATIVE, 0) >= 1:
        return DrGrade.PROLIFERATIVE_DR
    vessels = counts.get(LesionClass.IRMA, 0) + counts.get(LesionClass.VENOUS_BEADING, 0)
    if vessels >= 1 and counts.get(LesionClass.HEMORRHAGE, 0) >= 5:
        return DrGrade.SEVERE
    if (
        counts.get(LesionClass.HEMORRHAGE, 0) >= 1
        or counts.get(LesionClass.HARD_EXUDATE, 0) >= 1
        or counts.get(LesionClass.SOFT_EXUDATE, 0) >= 1
    ):
        return DrGrade.MODERATE
    if counts.get(LesionClass.MICROANEURYSM, 0) >= 1:
        return DrGrade.MILD
    return DrGrade.NO_DR


def _quantize(v: float) -> float:
    # annotation files carry six fractional digits; quantizing up front makes
    # the write -> read round trip exact
    return round(v, 6)


def _place_boxes(
    counts: Mapping[LesionClass, int],
    rng: np.random.Generator,
    max_tries: int = 200,
    margin: float = 0.01,
) -> list[Detection]:
    placed: list[tuple[float, float, float, float]] = []
    detections: list[Detection] = []
    order = sorted(
        (cls for cls in ALL_LESION_CLASSES for _ in range(counts.get(cls, 0))),
        key=lambda cls: -_SIZE_RANGES[cls][1],
    )
    for cls in order:
        lo, hi = _SIZE_RANGES[cls]
        for attempt in range(max_tries):
            w = float(rng.uniform(lo, hi))
            if cls == LesionClass.VENOUS_BEADING:
                h = w / float(rng.uniform(1.8, 2.6))
            elif cls == LesionClass.MICROANEURYSM:
                h = w
            else:
                h = w * float(rng.uniform(0.7, 1.4))
            w, h = _quantize(w), _quantize(h)
            half_diag = math.hypot(w / 2.0, h / 2.0)
            reach = _FUNDUS_RADIUS - half_diag - margin
            if reach <= 0:
                continue
            r = reach * math.sqrt(float(rng.random()))
            theta = 2.0 * math.pi * float(rng.random())
            cx = _quantize(0.5 + r * math.cos(theta))
            cy = _quantize(0.5 + r * math.sin(theta))
            x1, y1, x2, y2 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
            clash = any(
                not (x2 + margin <= ox1 or ox2 + margin <= x1
                     or y2 + margin <= oy1 or oy2 + margin <= y1)
                for ox1, oy1, ox2, oy2 in placed
            )
            if clash:
                continue
            placed.append((x1, y1, x2, y2))
            detections.append(Detection(cls, BBox(cx, cy, w, h), 1.0))
            break
        else:
            raise GenerationError(
                f"could not place a {cls.name} lesion without overlap "
                f"after {max_tries} tries"
            )
    return detections


def render_fundus(
    detections: Sequence[Detection], image_size: int, rng: np.random.Generator
) -> Image.Image:
    img = Image.new("RGB", (image_size, image_size), (8, 8, 8))
    draw = ImageDraw.Draw(img)
    c = image_size / 2.0
    radius = _FUNDUS_RADIUS * image_size
    jitter = rng.integers(-10, 11, size=3)
    disc = tuple(int(np.clip(v + j, 0, 255)) for v, j in zip(_FUNDUS_RGB, jitter))
    draw.ellipse([c - radius, c - radius, c + radius, c + radius], fill=disc)
    for det in detections:
        x1, y1, x2, y2 = det.box.corners()
        draw.ellipse(
            [x1 * image_size, y1 * image_size, x2 * image_size, y2 * image_size],
            fill=_COLORS[det.lesion_class],
        )
    return img


def generate_synthetic_dataset(
    out_dir,
    n_per_grade: int,
    image_size: int = 256,
    seed: int = 42,
    label_flip_rate: float = 0.0,
) -> Dataset:
    """Render n_per_grade images per grade with matching annotations.

    Deterministic for a fixed seed (each image derives its own PCG64 stream
    from (seed, grade, index), so generation order does not matter). The
    label_flip_rate knob mislabels that fraction of records - annotations stay
    truthful - to mimic noisy public gradings; default off.
    """
    if n_per_grade < 1:
        raise GenerationError(f"n_per_grade must be >= 1, got {n_per_grade}")
    if image_size < 64:
        raise GenerationError(f"image_size must be >= 64, got {image_size}")
    if not 0.0 <= label_flip_rate < 1.0:
        raise GenerationError(f"label_flip_rate {label_flip_rate} outside [0,1)")

    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    ann_dir = out_dir / "annotations"
    image_dir.mkdir(parents=True, exist_ok=True)
    ann_dir.mkdir(parents=True, exist_ok=True)

    records: list[GradedRecord] = []
    annotations: dict[str, tuple[Detection, ...]] = {}
    for grade in DrGrade:
        for idx in range(n_per_grade):
            image_id = f"syn_{int(grade)}_{idx:04d}"
            rng = np.random.default_rng([seed, int(grade), idx])
            counts = draw_lesion_counts(grade, rng)
            detections = _place_boxes(counts, rng)
            render_fundus(detections, image_size, rng).save(
                image_dir / f"{image_id}.png"
            )
            write_annotation_file(detections, ann_dir / f"{image_id}.txt")
            label = grade
            if label_flip_rate and rng.random() < label_flip_rate:
                others = [g for g in DrGrade if g != grade]
                label = others[int(rng.integers(0, len(others)))]
            records.append(GradedRecord(image_id, label))
            annotations[image_id] = tuple(detections)

    write_labels(records, out_dir / "labels.csv")
    save_manifest(out_dir / MANIFEST_NAME)
    return Dataset(
        records=tuple(records), annotations=annotations, image_dir=image_dir
    )
