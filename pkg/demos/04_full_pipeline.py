"""The whole workflow in one sitting: synth -> train -> predict -> serve.

Renders a synthetic dataset, runs the full training pipeline (oracle
detections -> count features -> grid-searched one-vs-one SVM), grades one
image offline, then exercises the HTTP service in-process including a
clinician override.

Run:  python demos/04_full_pipeline.py
"""

import json
import tempfile
from pathlib import Path

from fastapi.testclient import TestClient

from drscreen import cli
from drscreen.detector import DetectorConfig
from drscreen.service import ServiceConfig, create_app

root = Path(tempfile.mkdtemp(prefix="drscreen-demo-"))
data, run = root / "data", root / "run"

print("1. synthetic dataset")
cli.main(["synth", "--out", str(data), "--n-per-grade", "30",
          "--image-size", "128", "--seed", "5"])

print("\n2. full training run (oracle detector, small grid)")
cli.main(["train", "--data", str(data), "--out", str(run),
          "--c-grid", "1", "10", "--gamma-grid", "scale",
          "--cv-folds", "3", "--seed", "5"])

print("\n3. offline prediction for one severe image")
cli.main(["predict", "--model", str(run / "model.svm"),
          "--image", str(data / "images" / "syn_3_0004.png"),
          "--truth", str(data / "annotations" / "syn_3_0004.txt")])

print("\n4. the same flow through the HTTP service")
client = TestClient(
    create_app(
        ServiceConfig(
            data_dir=root / "state",
            model_path=run / "model.svm",
            detector=DetectorConfig(truth_dir=data / "annotations"),
        )
    )
)
image_bytes = (data / "images" / "syn_2_0007.png").read_bytes()
response = client.post(
    "/api/v1/predict",
    files={"file": ("syn_2_0007.png", image_bytes, "image/png")},
).json()
print(f"  predicted: {response['grade_label']} "
      f"({sum(response['counts'].values()):.0f} lesions detected)")

stored = client.post(
    "/api/v1/triage",
    json={
        "image_id": response["image_id"],
        "predicted_grade": response["grade"],
        "clinician_grade": 3,
        "reviewer_id": "dr-demo",
        "note": "upgrading after slit-lamp review",
    },
).json()
print(f"  clinician override stored: {stored['record_id']} "
      f"(override={stored['override']})")

history = client.get(
    "/api/v1/triage", params={"image_id": response["image_id"]}
).json()
print(f"  review history for image: {json.dumps(history, indent=2)}")
