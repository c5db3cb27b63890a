"""Pluggable lesion-detector boundary.

Two modes: EXTERNAL runs an off-the-shelf detector as a subprocess exchanging
annotation files (the detector itself is never linked in), ORACLE replays
ground-truth annotations, optionally perturbed with controlled drop/spurious/
jitter noise so detection metrics can be tested against known error rates.

Augmented box coordinates are quantized to the annotation-file grid (six
fractional digits); on that grid the flip and rotation maps are exact
involutions, so flipping twice restores boxes bit-for-bit.
"""

from __future__ import annotations

import hashlib
import logging
import shutil
import subprocess
import tempfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml
from PIL import Image

from .dataset_io import (
    Dataset,
    SplitSpec,
    read_annotation_file,
    stratified_split,
    write_annotation_file,
)
from .domain import ALL_LESION_CLASSES, BBox, Detection, LesionClass
from .errors import BundleError, DetectorError, DomainError, ParseError

log = logging.getLogger(__name__)

DEFAULT_CONFIDENCE_THRESHOLD = 0.25


class DetectorMode(Enum):
    EXTERNAL = "external"
    ORACLE = "oracle"


@dataclass(frozen=True)
class DetectorConfig:
    """How detections are produced for an image.

    external_command is an argv template; the placeholders {input_dir},
    {output_dir} and {conf} are substituted per call. truth_dir points the
    oracle at a directory of <image_id>.txt ground-truth files for callers
    that do not pass truth explicitly (the service does this).
    """

    mode: DetectorMode = DetectorMode.ORACLE
    external_command: tuple[str, ...] = ()
    confidence_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD
    class_subset: tuple[LesionClass, ...] = ALL_LESION_CLASSES
    truth_dir: Path | None = None

    def __post_init__(self):
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise DomainError(
                f"confidence_threshold {self.confidence_threshold} outside [0,1]"
            )
        if self.mode is DetectorMode.EXTERNAL and not self.external_command:
            raise DomainError("EXTERNAL mode requires a non-empty command template")


@dataclass(frozen=True)
class OraclePerturbation:
    """Controlled error injection for the oracle detector.

    Each truth box is dropped with probability drop_rate and spawns a spurious
    random box with probability spurious_rate; jitter shifts cx,cy,w,h by
    uniform noise of amplitude jitter*w (resp. jitter*h). Deterministic per
    seed and independent of the input ordering of the truth boxes.
    """

    drop_rate: float = 0.0
    spurious_rate: float = 0.0
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_rate <= 1.0:
            raise DomainError(f"drop_rate {self.drop_rate} outside [0,1]")
        if not 0.0 <= self.spurious_rate <= 1.0:
            raise DomainError(f"spurious_rate {self.spurious_rate} outside [0,1]")
        if self.jitter < 0.0:
            raise DomainError(f"jitter {self.jitter} must be >= 0")

    @property
    def is_noop(self) -> bool:
        return self.drop_rate == 0.0 and self.spurious_rate == 0.0 and self.jitter == 0.0


# --- augmentation -----------------------------------------------------------


class AugmentKind(Enum):
    FLIP_H = "flip_h"
    FLIP_V = "flip_v"
    ROT90 = "rot90"
    CROP = "crop"
    NOISE = "noise"


@dataclass(frozen=True)
class Augment:
    kind: AugmentKind
    amount: float = 0.0  # crop fraction or noise sigma

    def __post_init__(self):
        if self.kind is AugmentKind.CROP and not 0.0 < self.amount <= 1.0:
            raise DomainError(f"crop fraction {self.amount} outside (0,1]")
        if self.kind is AugmentKind.NOISE and self.amount < 0.0:
            raise DomainError(f"noise sigma {self.amount} must be >= 0")


def _q6(v: float) -> float:
    return round(v, 6)


def _replace_box(det: Detection, cx, cy, w, h) -> Detection:
    return Detection(det.lesion_class, BBox(_q6(cx), _q6(cy), _q6(w), _q6(h)), det.confidence)


def _crop_boxes(
    boxes: Sequence[Detection], frac: float, min_kept_area: float = 0.25
) -> list[Detection]:
    off = (1.0 - frac) / 2.0
    out = []
    for det in boxes:
        x1, y1, x2, y2 = det.box.corners()
        cx1, cy1 = max(x1, off), max(y1, off)
        cx2, cy2 = min(x2, off + frac), min(y2, off + frac)
        if cx2 <= cx1 or cy2 <= cy1:
            continue  # fully outside the crop window
        kept = (cx2 - cx1) * (cy2 - cy1)
        if kept < min_kept_area * (x2 - x1) * (y2 - y1):
            continue
        out.append(
            _replace_box(
                det,
                ((cx1 + cx2) / 2.0 - off) / frac,
                ((cy1 + cy2) / 2.0 - off) / frac,
                (cx2 - cx1) / frac,
                (cy2 - cy1) / frac,
            )
        )
    return out


def augment_image(
    image: np.ndarray,
    op: Augment,
    boxes: Sequence[Detection],
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, list[Detection]]:
    """Transform an image and its boxes together.

    ROT90 rotates clockwise: (cx, cy) -> (1-cy, cx) with width and height
    swapped. CROP is centered; boxes are clipped to the window and kept only
    if at least a quarter of their area survives. NOISE(sigma) adds Gaussian
    pixel noise (rng required for sigma > 0) and leaves boxes untouched.
    """
    image = np.asarray(image)
    if op.kind is AugmentKind.FLIP_H:
        return image[:, ::-1].copy(), [
            _replace_box(d, 1.0 - d.box.cx, d.box.cy, d.box.w, d.box.h) for d in boxes
        ]
    if op.kind is AugmentKind.FLIP_V:
        return image[::-1].copy(), [
            _replace_box(d, d.box.cx, 1.0 - d.box.cy, d.box.w, d.box.h) for d in boxes
        ]
    if op.kind is AugmentKind.ROT90:
        return np.rot90(image, k=-1).copy(), [
            _replace_box(d, 1.0 - d.box.cy, d.box.cx, d.box.h, d.box.w) for d in boxes
        ]
    if op.kind is AugmentKind.CROP:
        h, w = image.shape[:2]
        off_y = int(round(h * (1.0 - op.amount) / 2.0))
        off_x = int(round(w * (1.0 - op.amount) / 2.0))
        span_y = max(1, int(round(h * op.amount)))
        span_x = max(1, int(round(w * op.amount)))
        cropped = image[off_y : off_y + span_y, off_x : off_x + span_x].copy()
        return cropped, _crop_boxes(boxes, op.amount)
    if op.kind is AugmentKind.NOISE:
        if op.amount == 0.0:
            return image.copy(), list(boxes)
        if rng is None:
            raise DomainError("NOISE augmentation needs an rng for sigma > 0")
        noisy = image.astype(float) + rng.normal(0.0, op.amount, size=image.shape)
        return np.clip(np.rint(noisy), 0, 255).astype(image.dtype), list(boxes)
    raise DomainError(f"unknown augmentation {op.kind}")


# --- oracle perturbation ----------------------------------------------------


def _image_rng(seed: int, image_id: str) -> np.random.Generator:
    digest = hashlib.blake2s(image_id.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng([seed, int.from_bytes(digest, "little")])


def _canonical(boxes: Sequence[Detection]) -> list[Detection]:
    return sorted(
        boxes,
        key=lambda d: (int(d.lesion_class), d.box.cx, d.box.cy, d.box.w, d.box.h,
                       d.confidence),
    )


def _spurious_box(rng: np.random.Generator) -> Detection:
    cls = LesionClass(int(rng.integers(0, 7)))
    w = _q6(float(rng.uniform(0.02, 0.08)))
    h = _q6(float(rng.uniform(0.02, 0.08)))
    cx = _q6(float(rng.uniform(0.15, 0.85)))
    cy = _q6(float(rng.uniform(0.15, 0.85)))
    conf = round(float(rng.uniform(0.3, 1.0)), 6)
    return Detection(cls, BBox(cx, cy, w, h), conf)


def _jittered(det: Detection, jitter: float, rng: np.random.Generator) -> Detection:
    b = det.box
    cx = b.cx + float(rng.uniform(-1, 1)) * jitter * b.w
    cy = b.cy + float(rng.uniform(-1, 1)) * jitter * b.h
    w = b.w + float(rng.uniform(-1, 1)) * jitter * b.w
    h = b.h + float(rng.uniform(-1, 1)) * jitter * b.h
    cx, cy = min(max(cx, 0.0), 1.0), min(max(cy, 0.0), 1.0)
    w = min(max(w, 1e-6), 1.0)
    h = min(max(h, 1e-6), 1.0)
    return Detection(det.lesion_class, BBox(_q6(cx), _q6(cy), _q6(w), _q6(h)),
                     det.confidence)


def perturb_truth(
    truth: Sequence[Detection], perturb: OraclePerturbation, image_id: str
) -> list[Detection]:
    """Apply drop/spurious/jitter noise; a function of the truth SET, not its order."""
    rng = _image_rng(perturb.seed, image_id)
    out: list[Detection] = []
    for det in _canonical(truth):
        keep = float(rng.random()) >= perturb.drop_rate
        spawn = float(rng.random()) < perturb.spurious_rate
        if keep:
            out.append(_jittered(det, perturb.jitter, rng) if perturb.jitter > 0 else det)
        if spawn:
            out.append(_spurious_box(rng))
    return out


# --- detection --------------------------------------------------------------


def _apply_filters(dets: Sequence[Detection], config: DetectorConfig) -> list[Detection]:
    subset = set(config.class_subset)
    return [
        d
        for d in dets
        if d.confidence >= config.confidence_threshold and d.lesion_class in subset
    ]


def detect(
    image: str | Path,
    config: DetectorConfig,
    truth: Sequence[Detection] | None = None,
    perturb: OraclePerturbation | None = None,
) -> list[Detection]:
    """Detect lesions in one image (a path, or a bare image id in oracle mode).

    Output is filtered to the configured class subset and confidence
    threshold. Oracle detections are deterministic per perturbation seed.
    """
    image = Path(image)
    image_id = image.stem
    if config.mode is DetectorMode.ORACLE:
        if truth is None:
            if config.truth_dir is None:
                raise DetectorError(
                    "oracle detector needs truth annotations or a truth_dir"
                )
            truth_path = Path(config.truth_dir) / f"{image_id}.txt"
            truth = (
                read_annotation_file(truth_path, image_id)
                if truth_path.exists()
                else []
            )
        if perturb is not None and not perturb.is_noop:
            dets = perturb_truth(truth, perturb, image_id)
        else:
            dets = list(truth)
        return _apply_filters(dets, config)
    return _apply_filters(_run_external(image, config), config)


def _run_external(image: Path, config: DetectorConfig) -> list[Detection]:
    if not image.exists():
        raise DetectorError(f"image file not found: {image}")
    with tempfile.TemporaryDirectory(prefix="drscreen-detect-") as tmp:
        in_dir = Path(tmp) / "in"
        out_dir = Path(tmp) / "out"
        in_dir.mkdir()
        out_dir.mkdir()
        shutil.copy2(image, in_dir / image.name)
        argv = [
            arg.format(
                input_dir=str(in_dir),
                output_dir=str(out_dir),
                conf=str(config.confidence_threshold),
            )
            for arg in config.external_command
        ]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=600)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise DetectorError(f"external detector failed to run: {exc}") from None
        if proc.returncode != 0:
            raise DetectorError(
                f"external detector exited {proc.returncode}",
                diagnostics=(proc.stdout or "") + (proc.stderr or ""),
            )
        out_path = out_dir / f"{image.stem}.txt"
        if not out_path.exists():
            return []
        try:
            return read_annotation_file(out_path, image.stem)
        except ParseError as exc:
            raise DetectorError(
                f"unparsable detector output: {exc}", diagnostics=str(exc)
            ) from None


def detect_dataset(
    dataset: Dataset,
    config: DetectorConfig,
    perturb: OraclePerturbation | None = None,
) -> dict[str, list[Detection]]:
    """Run the detector over every record of a dataset."""
    out: dict[str, list[Detection]] = {}
    for record in dataset.records:
        truth = None
        if config.mode is DetectorMode.ORACLE:
            truth = dataset.annotations.get(record.image_id, ())
        out[record.image_id] = detect(
            dataset.image_path(record.image_id), config, truth=truth, perturb=perturb
        )
    return out


def parse_detection_output(
    directory, expected_ids: Sequence[str]
) -> dict[str, list[Detection]]:
    """Read per-image detection files; a missing file means no detections."""
    directory = Path(directory)
    out: dict[str, list[Detection]] = {}
    for image_id in expected_ids:
        path = directory / f"{image_id}.txt"
        out[image_id] = read_annotation_file(path, image_id) if path.exists() else []
    return out


# --- training bundle --------------------------------------------------------

_BUNDLE_AUGMENTS = (
    ("flip_h", Augment(AugmentKind.FLIP_H)),
    ("flip_v", Augment(AugmentKind.FLIP_V)),
    ("rot90", Augment(AugmentKind.ROT90)),
)


def prepare_training_bundle(
    dataset: Dataset, out_dir, augment: bool = False, seed: int = 42
) -> Path:
    """Lay out images/ and labels/ train-val trees for an external detector.

    Returns the path of the written data.yaml manifest. With augment on, each
    training image additionally emits flipped and rotated variants with
    correctly transformed boxes.
    """
    out_dir = Path(out_dir)
    dirs = {}
    for kind in ("images", "labels"):
        for part in ("train", "val"):
            d = out_dir / kind / part
            d.mkdir(parents=True, exist_ok=True)
            dirs[(kind, part)] = d

    # plain split: detector training has no use for grade stratification, and
    # this keeps tiny datasets bundleable
    train, val = stratified_split(
        dataset.records, SplitSpec(0.2, seed=seed, stratified=False)
    )

    def emit(image_id: str, part: str, image: np.ndarray, boxes: Sequence[Detection]):
        Image.fromarray(image).save(dirs[("images", part)] / f"{image_id}.png")
        write_annotation_file(boxes, dirs[("labels", part)] / f"{image_id}.txt")

    for part, records in (("train", train), ("val", val)):
        for record in records:
            src = dataset.image_path(record.image_id)
            if not src.exists():
                raise BundleError(f"missing image file for {record.image_id!r}: {src}")
            image = np.asarray(Image.open(src).convert("RGB"))
            boxes = list(dataset.annotations.get(record.image_id, ()))
            emit(record.image_id, part, image, boxes)
            if augment and part == "train":
                for suffix, op in _BUNDLE_AUGMENTS:
                    aug_img, aug_boxes = augment_image(image, op, boxes)
                    emit(f"{record.image_id}_{suffix}", part, aug_img, aug_boxes)

    manifest = out_dir / "data.yaml"
    doc = {
        "path": str(out_dir.resolve()),
        "train": "images/train",
        "val": "images/val",
        "nc": len(ALL_LESION_CLASSES),
        "names": {int(c): c.name.lower() for c in ALL_LESION_CLASSES},
    }
    manifest.write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")
    return manifest


# --- config (de)serialization ------------------------------------------------


def detector_config_to_doc(config: DetectorConfig) -> dict:
    return {
        "mode": config.mode.value,
        "external_command": list(config.external_command),
        "confidence_threshold": config.confidence_threshold,
        "class_subset": [int(c) for c in config.class_subset],
        "truth_dir": None if config.truth_dir is None else str(config.truth_dir),
    }


def detector_config_from_doc(doc: Mapping) -> DetectorConfig:
    try:
        mode = DetectorMode(doc.get("mode", "oracle"))
        subset = tuple(
            LesionClass(int(v))
            for v in doc.get("class_subset", [int(c) for c in ALL_LESION_CLASSES])
        )
        truth_dir = doc.get("truth_dir")
        return DetectorConfig(
            mode=mode,
            external_command=tuple(doc.get("external_command", ())),
            confidence_threshold=float(
                doc.get("confidence_threshold", DEFAULT_CONFIDENCE_THRESHOLD)
            ),
            class_subset=subset,
            truth_dir=None if truth_dir is None else Path(truth_dir),
        )
    except (ValueError, TypeError) as exc:
        raise DomainError(f"bad detector config: {exc}") from None
