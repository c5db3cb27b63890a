"""HTTP API for the triage console and scripted clients.

Endpoints (all JSON except the image fetch):

    GET  /healthz                     liveness probe, plain "ok"
    GET  /api/v1/model                loaded-model metadata, 503 when none
    POST /api/v1/predict              multipart image upload -> prediction
    POST /api/v1/triage               append a clinician decision
    GET  /api/v1/triage?image_id=...  decisions for an image, newest first
    GET  /api/v1/images/{image_id}    stored upload, for overlay display

Uploaded images are retained under content-hash ids (write-then-rename, LRU
eviction beyond a cap); the triage log is an append-only JSONL file with a
single serialized writer. Box coordinates in responses stay normalized - the
client owns pixel mapping.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from fastapi import FastAPI, File, HTTPException, UploadFile
from fastapi.responses import PlainTextResponse, Response
from pydantic import BaseModel, Field

from .dataset_io import read_annotation_file
from .detector import DetectorConfig, detect
from .domain import DrGrade, LesionClass
from .errors import DetectorError
from .features import extract_counts
from .pipeline import REFERENCE_SCORES
from .svm import SvmModel, load_model, predict_from_counts

log = logging.getLogger(__name__)

DEFAULT_MAX_UPLOAD = 16 * 1024 * 1024
DEFAULT_IMAGE_CAP = 1000

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
_JPEG_MAGIC = b"\xff\xd8\xff"


@dataclass(frozen=True)
class ServiceConfig:
    data_dir: Path
    model_path: Path | None = None
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    max_upload_bytes: int = DEFAULT_MAX_UPLOAD
    image_cap: int = DEFAULT_IMAGE_CAP


class ImageStore:
    """Content-addressed upload store with LRU eviction past a cap."""

    def __init__(self, root: Path, cap: int = DEFAULT_IMAGE_CAP):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cap = cap
        self._lock = threading.Lock()

    def put(self, data: bytes, ext: str) -> str:
        image_id = hashlib.sha256(data).hexdigest()[:16]
        path = self.root / f"{image_id}{ext}"
        with self._lock:
            if not path.exists():
                tmp = path.with_name(f".{path.name}.{uuid.uuid4().hex}.tmp")
                tmp.write_bytes(data)
                os.replace(tmp, path)  # atomic publish
            else:
                path.touch()
            self._evict()
        return image_id

    def path_of(self, image_id: str) -> Path | None:
        for ext in (".png", ".jpg"):
            p = self.root / f"{image_id}{ext}"
            if p.exists():
                return p
        return None

    def _evict(self) -> None:
        entries = sorted(
            (p for p in self.root.iterdir() if not p.name.startswith(".")),
            key=lambda p: p.stat().st_mtime,
        )
        while len(entries) > self.cap:
            entries.pop(0).unlink(missing_ok=True)


class TriageLog:
    """Append-only JSONL log of clinician decisions; one serialized writer."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._count = 0
        self._last_ts = ""
        if self.path.exists():
            lines = self.path.read_text(encoding="utf-8").splitlines()
            self._count = len(lines)
            if lines:
                self._last_ts = json.loads(lines[-1]).get("timestamp", "")

    def append(self, record: dict) -> dict:
        with self._lock:
            now = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
            # the log's timestamps never go backwards, even if the clock does
            record["timestamp"] = max(now, self._last_ts)
            record["record_id"] = f"tr-{self._count:08d}"
            self._last_ts = record["timestamp"]
            self._count += 1
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
        return record

    def for_image(self, image_id: str) -> list[dict]:
        if not self.path.exists():
            return []
        records = [
            json.loads(line)
            for line in self.path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        matching = [r for r in records if r.get("image_id") == image_id]
        return list(reversed(matching))  # newest first


class BoxOut(BaseModel):
    cx: float
    cy: float
    w: float
    h: float


class DetectionOut(BaseModel):
    class_id: int
    class_name: str
    box: BoxOut
    confidence: float


class PredictResponse(BaseModel):
    image_id: str
    detections: list[DetectionOut]
    counts: dict[str, float]
    grade: int
    grade_label: str
    votes: dict[int, int]
    scores: dict[int, float]
    model_version: str


class TriageCreate(BaseModel):
    image_id: str
    predicted_grade: int = Field(ge=0, le=4)
    clinician_grade: int = Field(ge=0, le=4)
    reviewer_id: str = Field(min_length=1)
    note: str = ""


class TriageRecordOut(TriageCreate):
    record_id: str
    timestamp: str
    override: bool


def _sniff_ext(data: bytes) -> str | None:
    if data.startswith(_PNG_MAGIC):
        return ".png"
    if data.startswith(_JPEG_MAGIC):
        return ".jpg"
    return None


def create_app(config: ServiceConfig) -> FastAPI:
    app = FastAPI(title="drscreen", version="0.1.0")
    model: SvmModel | None = None
    if config.model_path is not None:
        model = load_model(config.model_path)
    store = ImageStore(Path(config.data_dir) / "images", cap=config.image_cap)
    triage = TriageLog(Path(config.data_dir) / "triage.jsonl")
    app.state.model = model
    app.state.store = store
    app.state.triage = triage
    app.state.detector = config.detector

    def require_model() -> SvmModel:
        if app.state.model is None:
            raise HTTPException(status_code=503, detail="no model loaded")
        return app.state.model

    @app.get("/healthz", response_class=PlainTextResponse)
    def healthz() -> str:
        return "ok"

    @app.get("/api/v1/model")
    def model_info() -> dict:
        m = require_model()
        first = next(iter(m.machines.values()))
        return {
            "classes": [int(c) for c in m.classes],
            "class_labels": [c.label for c in m.classes],
            "feature_classes": [c.name.lower() for c in m.feature_classes],
            "kernel": first.kernel.kind.value,
            "gamma": first.kernel.gamma,
            "C": first.C,
            "schema_version": m.schema_version,
            "created_at": m.created_at,
            "train_summary": m.train_summary,
            "reference_scores": REFERENCE_SCORES,
        }

    @app.post("/api/v1/predict", response_model=PredictResponse)
    async def predict_endpoint(file: UploadFile = File(...)) -> PredictResponse:
        m = require_model()
        data = await file.read()
        if len(data) == 0:
            raise HTTPException(status_code=400, detail="empty upload")
        if len(data) > config.max_upload_bytes:
            raise HTTPException(
                status_code=413,
                detail=f"upload exceeds {config.max_upload_bytes} bytes",
            )
        ext = _sniff_ext(data)
        if ext is None:
            raise HTTPException(
                status_code=415, detail="payload is neither PNG nor JPEG"
            )
        image_id = store.put(data, ext)
        stored_path = store.path_of(image_id)

        detector: DetectorConfig = app.state.detector
        truth = None
        if detector.truth_dir is not None and file.filename:
            # oracle-backed deployments key ground truth by the upload's name
            truth_path = Path(detector.truth_dir) / f"{Path(file.filename).stem}.txt"
            truth = (
                read_annotation_file(truth_path) if truth_path.exists() else []
            )
        try:
            detections = detect(stored_path, detector, truth=truth)
        except DetectorError as exc:
            diag_id = uuid.uuid4().hex[:12]
            log.error("detector failure %s: %s\n%s", diag_id, exc, exc.diagnostics)
            raise HTTPException(
                status_code=502,
                detail=f"detector failure (diagnostic id {diag_id})",
            ) from None

        counts_fv = extract_counts(
            detections, class_subset=m.feature_classes, image_id=image_id
        )
        grade, votes, scores = predict_from_counts(m, counts_fv.values)
        return PredictResponse(
            image_id=image_id,
            detections=[
                DetectionOut(
                    class_id=int(d.lesion_class),
                    class_name=d.lesion_class.name.lower(),
                    box=BoxOut(cx=d.box.cx, cy=d.box.cy, w=d.box.w, h=d.box.h),
                    confidence=d.confidence,
                )
                for d in detections
            ],
            counts={
                cls.name.lower(): float(v)
                for cls, v in zip(m.feature_classes, counts_fv.values)
            },
            grade=int(grade),
            grade_label=grade.label,
            votes={int(k): v for k, v in votes.items()},
            scores={int(k): v for k, v in scores.items()},
            model_version=f"svm-v{m.schema_version}"
            + (f"@{m.created_at}" if m.created_at else ""),
        )

    @app.post("/api/v1/triage", response_model=TriageRecordOut, status_code=201)
    def triage_create(body: TriageCreate) -> TriageRecordOut:
        if store.path_of(body.image_id) is None:
            raise HTTPException(
                status_code=404, detail=f"unknown image_id {body.image_id!r}"
            )
        record = triage.append(
            {
                "image_id": body.image_id,
                "predicted_grade": body.predicted_grade,
                "clinician_grade": body.clinician_grade,
                "reviewer_id": body.reviewer_id,
                "note": body.note,
                "override": body.clinician_grade != body.predicted_grade,
            }
        )
        return TriageRecordOut(**record)

    @app.get("/api/v1/triage", response_model=list[TriageRecordOut])
    def triage_list(image_id: str) -> list[TriageRecordOut]:
        return [TriageRecordOut(**r) for r in triage.for_image(image_id)]

    @app.get("/api/v1/images/{image_id}")
    def image_fetch(image_id: str) -> Response:
        path = store.path_of(image_id)
        if path is None:
            raise HTTPException(status_code=404, detail="unknown image")
        media = "image/png" if path.suffix == ".png" else "image/jpeg"
        return Response(content=path.read_bytes(), media_type=media)

    return app


def serve(config: ServiceConfig, host: str = "127.0.0.1", port: int = 8000) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=host, port=port, log_level="info")
